import struct
from datetime import datetime

import numpy as np
import pytest

from stgrid_recon.grid import GridSeries, GridSpec, Granularity, MaskSequence, NormStats, PointRecord, SparsePatternSpec
from stgrid_recon.storage import (
    DTYPE_F32,
    FormatError,
    decode_stgr,
    encode_stgr,
    load_mask,
    load_series,
    read_records_csv,
    save_mask,
    save_series,
    sidecar_path,
    write_records_csv,
)

T0 = datetime(2013, 7, 1)


def test_header_layout():
    data = encode_stgr(np.zeros((2, 3, 4), dtype=np.float32), DTYPE_F32)
    magic, version, t, i, j, tag = struct.unpack_from("<4sIIIII", data)
    assert (magic, version, t, i, j, tag) == (b"STGR", 1, 2, 3, 4, 1)
    assert len(data) == 24 + 2 * 3 * 4 * 4


def test_series_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 8, 6)).astype(np.float32)
    s = GridSeries(v, GridSpec(4, 3, 2, interval=1800.0), T0, Granularity.FINE)
    p = tmp_path / "s.stgr"
    save_series(p, s, NormStats(-1.5, 2.5))
    back, norm = load_series(p)
    assert back.values.dtype == np.float32
    assert np.array_equal(back.values, v)
    assert back.spec == s.spec and back.start_time == T0 and back.granularity is Granularity.FINE
    assert norm == NormStats(-1.5, 2.5)
    assert sidecar_path(p).name == "s.meta.json"


def test_mask_roundtrip(tmp_path):
    flags = np.random.default_rng(1).integers(0, 2, size=(3, 4, 4))
    m = MaskSequence(flags, SparsePatternSpec("random", 0.5, 2))
    save_mask(tmp_path / "m.stgr", m)
    back = load_mask(tmp_path / "m.stgr")
    assert np.array_equal(back.flags, flags) and back.pattern == m.pattern


def test_mask_file_is_not_a_series(tmp_path):
    save_mask(tmp_path / "m.stgr", MaskSequence(np.ones((1, 2, 2))))
    with pytest.raises(FormatError):
        load_series(tmp_path / "m.stgr")


@pytest.mark.parametrize(
    "mutate",
    [lambda b: b"XXXX" + b[4:], lambda b: b[:10], lambda b: b[:-1], lambda b: b[:4] + struct.pack("<I", 9) + b[8:]],
)
def test_corrupt_files_rejected(mutate):
    good = encode_stgr(np.ones((1, 2, 2), dtype=np.float32), DTYPE_F32)
    with pytest.raises(FormatError):
        decode_stgr(mutate(good))


def test_records_csv_roundtrip(tmp_path):
    recs = [PointRecord(T0, 39.9, 116.3, 1.25), PointRecord(datetime(2013, 7, 1, 5, 30), 39.85, 116.4, 0.1)]
    write_records_csv(tmp_path / "r.csv", recs)
    assert read_records_csv(tmp_path / "r.csv") == recs


def test_records_csv_missing_column(tmp_path):
    (tmp_path / "r.csv").write_text("timestamp,lat,value\n")
    with pytest.raises(FormatError):
        read_records_csv(tmp_path / "r.csv")
