"""On-disk formats: STGR grid files with JSON sidecars, and point-record CSV."""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid import (
    GridSeries,
    GridSpec,
    Granularity,
    MaskSequence,
    NormStats,
    PointRecord,
    SparsePatternSpec,
)

MAGIC = b"STGR"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2
_HEADER = struct.Struct("<4sIIIII")  # magic, version, T, I, J, dtype tag


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_stgr(array: np.ndarray, tag: int) -> bytes:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"STGR payload must be 3-D, got shape {array.shape}")
    if tag == DTYPE_F32:
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    elif tag == DTYPE_U8:
        payload = np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    else:
        raise ValueError(f"unknown dtype tag {tag}")
    t, i, j = array.shape
    return _HEADER.pack(MAGIC, VERSION, t, i, j, tag) + payload


def decode_stgr(data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated STGR header")
    magic, version, t, i, j, tag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported STGR version {version}")
    dtype = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype(np.uint8)}.get(tag)
    if dtype is None:
        raise FormatError(f"unknown dtype tag {tag}")
    n = t * i * j
    payload = data[_HEADER.size :]
    if len(payload) != n * dtype.itemsize:
        raise FormatError("payload size does not match header")
    arr = np.frombuffer(payload, dtype=dtype, count=n).reshape(t, i, j)
    return arr.astype(np.float32 if tag == DTYPE_F32 else np.uint8), tag


def _series_meta(series: GridSeries, norm: NormStats | None) -> dict:
    return {
        "kind": "series",
        "grid": series.spec.to_dict(),
        "start_time": series.start_time.isoformat(),
        "granularity": series.granularity.value,
        "norm": norm.to_dict() if norm else None,
    }


def save_series(path, series: GridSeries, norm: NormStats | None = None) -> None:
    atomic_write_bytes(path, encode_stgr(series.values, DTYPE_F32))
    atomic_write_text(sidecar_path(path), json.dumps(_series_meta(series, norm), indent=2))


def load_series(path) -> tuple[GridSeries, NormStats | None]:
    arr, tag = decode_stgr(Path(path).read_bytes())
    if tag != DTYPE_F32:
        raise FormatError(f"{path}: expected a float32 series, found a mask file")
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    series = GridSeries(
        arr,
        GridSpec.from_dict(meta["grid"]),
        datetime.fromisoformat(meta["start_time"]),
        Granularity(meta["granularity"]),
    )
    norm = NormStats.from_dict(meta["norm"]) if meta.get("norm") else None
    return series, norm


def save_mask(path, mask: MaskSequence, spec: GridSpec | None = None, start_time=None) -> None:
    atomic_write_bytes(path, encode_stgr(mask.flags, DTYPE_U8))
    meta = {
        "kind": "mask",
        "grid": spec.to_dict() if spec else None,
        "start_time": start_time.isoformat() if start_time else None,
        "pattern": mask.pattern.to_dict() if mask.pattern else None,
    }
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2))


def load_mask(path) -> MaskSequence:
    arr, tag = decode_stgr(Path(path).read_bytes())
    if tag != DTYPE_U8:
        raise FormatError(f"{path}: expected a u8 mask file")
    meta_path = sidecar_path(path)
    pattern = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("pattern"):
            pattern = SparsePatternSpec(**meta["pattern"])
    return MaskSequence(arr, pattern)


def read_records_csv(path) -> list[PointRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "lat", "lon", "value"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            records.append(
                PointRecord(
                    timestamp=datetime.fromisoformat(row["timestamp"]),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    value=float(row["value"]),
                )
            )
    return records


def write_records_csv(path, records: Iterable[PointRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "lat", "lon", "value"])
        for r in records:
            w.writerow([r.timestamp.isoformat(), repr(r.lat), repr(r.lon), repr(r.value)])
