"""Grid data model: gridded series, observation masks, sparse patterns and calendar features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class Granularity(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


class PatternKind(str, Enum):
    FIXED = "fixed"
    RANDOM = "random"
    LARGE_SCALE = "large_scale"


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError(f"bbox is not well-ordered: {self}")

    def to_list(self) -> list[float]:
        return [self.lat_min, self.lat_max, self.lon_min, self.lon_max]


@dataclass(frozen=True)
class GridSpec:
    """Coarse grid geometry. ``rows``/``cols`` are I and J; the fine grid is
    ``magnification`` times finer along both axes."""

    rows: int
    cols: int
    magnification: int = 1
    bbox: BBox = field(default_factory=lambda: BBox(0.0, 1.0, 0.0, 1.0))
    interval: float = 3600.0

    def __post_init__(self):
        for name in ("rows", "cols", "magnification"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.interval > 0:
            raise ValueError(f"interval must be positive, got {self.interval!r}")

    @property
    def fine_shape(self) -> tuple[int, int]:
        return self.rows * self.magnification, self.cols * self.magnification

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "magnification": self.magnification,
            "bbox": self.bbox.to_list(),
            "interval": self.interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            magnification=int(d.get("magnification", 1)),
            bbox=BBox(*d.get("bbox", [0.0, 1.0, 0.0, 1.0])),
            interval=float(d.get("interval", 3600.0)),
        )


@dataclass
class GridSeries:
    values: np.ndarray  # [T, rows, cols]
    spec: GridSpec
    start_time: datetime
    granularity: Granularity = Granularity.COARSE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.granularity = Granularity(self.granularity)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError(f"values must be [T>=1, rows, cols], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid series contains non-finite values")
        expected = (
            (self.spec.rows, self.spec.cols)
            if self.granularity is Granularity.COARSE
            else self.spec.fine_shape
        )
        if self.values.shape[1:] != expected:
            raise ValueError(
                f"{self.granularity.value} series shape {self.values.shape[1:]} "
                f"does not match grid spec {expected}"
            )

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def timestamps(self) -> list[datetime]:
        dt = timedelta(seconds=self.spec.interval)
        return [self.start_time + i * dt for i in range(self.num_steps)]

    def slice(self, start: int, stop: int) -> "GridSeries":
        return GridSeries(
            self.values[start:stop].copy(),
            self.spec,
            self.start_time + timedelta(seconds=self.spec.interval * start),
            self.granularity,
        )

    def with_values(self, values: np.ndarray) -> "GridSeries":
        return GridSeries(values, self.spec, self.start_time, self.granularity)


@dataclass(frozen=True)
class SparsePatternSpec:
    kind: PatternKind = PatternKind.RANDOM
    missing_ratio: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise ValueError(f"missing_ratio must lie in [0, 1], got {self.missing_ratio}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "missing_ratio": self.missing_ratio, "seed": self.seed}

    def describe(self) -> str:
        if self.kind is PatternKind.LARGE_SCALE:
            return "large_scale"
        return f"{self.kind.value}-{self.missing_ratio:g}"


@dataclass
class MaskSequence:
    flags: np.ndarray  # [T, rows, cols] uint8, 1 = observed
    pattern: SparsePatternSpec | None = None

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.ndim != 3:
            raise ValueError(f"mask must be [T, rows, cols], got {flags.shape}")
        if not np.isin(flags, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.flags = flags.astype(np.uint8)
        if self.pattern is not None and self.pattern.kind is PatternKind.FIXED:
            if not (self.flags == self.flags[:1]).all():
                raise ValueError("fixed-pattern mask must be identical at every step")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.flags.shape


@dataclass(frozen=True)
class ExternalFeatureVector:
    day_index: int
    week_index: int
    month_index: int
    holiday: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.day_index <= 30:
            raise ValueError(f"day_index out of range: {self.day_index}")
        if not 0 <= self.week_index <= 6:
            raise ValueError(f"week_index out of range: {self.week_index}")
        if not 0 <= self.month_index <= 11:
            raise ValueError(f"month_index out of range: {self.month_index}")
        if self.holiday not in (0, 1):
            raise ValueError(f"holiday must be 0 or 1: {self.holiday}")


@dataclass(frozen=True)
class PointRecord:
    timestamp: datetime
    lat: float
    lon: float
    value: float


# one-hot day(31) + week(7) + month(12) + holiday(1)
CALENDAR_DIM = 31 + 7 + 12 + 1


def ingest_records(
    records: Iterable[PointRecord],
    spec: GridSpec,
    start_time: datetime,
    num_steps: int,
) -> tuple[GridSeries, MaskSequence]:
    """Average point records into a coarse grid series.

    Row 0 is the northern edge of the bbox, column 0 the western edge. Cells
    without records hold 0 and are flagged unobserved. Records outside the
    bbox are dropped; non-finite values and out-of-window timestamps raise.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    box = spec.bbox
    dlat = (box.lat_max - box.lat_min) / spec.rows
    dlon = (box.lon_max - box.lon_min) / spec.cols
    sums = np.zeros((num_steps, spec.rows, spec.cols), dtype=np.float64)
    counts = np.zeros((num_steps, spec.rows, spec.cols), dtype=np.int64)
    for n, rec in enumerate(records):
        if not math.isfinite(rec.value):
            raise ValueError(f"record {n}: non-finite value {rec.value!r}")
        offset = (rec.timestamp - start_time).total_seconds()
        step = math.floor(offset / spec.interval)
        if offset < 0 or step >= num_steps:
            raise ValueError(f"record {n}: timestamp {rec.timestamp} outside the series window")
        if not (box.lat_min <= rec.lat < box.lat_max and box.lon_min <= rec.lon < box.lon_max):
            continue
        row = min(int((box.lat_max - rec.lat) / dlat), spec.rows - 1)
        col = min(int((rec.lon - box.lon_min) / dlon), spec.cols - 1)
        sums[step, row, col] += rec.value
        counts[step, row, col] += 1
    observed = counts > 0
    values = np.zeros_like(sums)
    values[observed] = sums[observed] / counts[observed]
    series = GridSeries(values.astype(np.float32), spec, start_time, Granularity.COARSE)
    return series, MaskSequence(observed.astype(np.uint8))


def downsample(fine: GridSeries) -> GridSeries:
    """Block-mean a fine series onto its coarse grid."""
    if fine.granularity is not Granularity.FINE:
        raise ValueError("downsample expects a fine-grained series")
    n = fine.spec.magnification
    coarse = downsample_array(fine.values, n)
    return GridSeries(coarse, fine.spec, fine.start_time, Granularity.COARSE)


def downsample_array(values: np.ndarray, n: int) -> np.ndarray:
    t, h, w = values.shape
    if h % n or w % n:
        raise ValueError(f"shape {(h, w)} is not divisible by magnification {n}")
    if n == 1:
        return values.copy()
    return values.reshape(t, h // n, n, w // n, n).mean(axis=(2, 4), dtype=np.float64).astype(values.dtype)


def upsample_nearest(values: np.ndarray, n: int) -> np.ndarray:
    """Broadcast each coarse cell over its n x n fine block."""
    return np.repeat(np.repeat(values, n, axis=-2), n, axis=-1)


def apply_mask(complete: GridSeries, mask: MaskSequence) -> GridSeries:
    if complete.values.shape != mask.flags.shape:
        raise ValueError(f"shape mismatch: {complete.values.shape} vs mask {mask.flags.shape}")
    out = complete.values * mask.flags.astype(complete.values.dtype)
    return complete.with_values(out)


def masked_count(missing_ratio: float, rows: int, cols: int) -> int:
    # round half up
    return int(math.floor(missing_ratio * rows * cols + 0.5))


def generate_masks(pattern: SparsePatternSpec, shape: Sequence[int]) -> MaskSequence:
    t, rows, cols = (int(s) for s in shape)
    if t < 1 or rows < 1 or cols < 1:
        raise ValueError(f"invalid mask shape {tuple(shape)}")
    flags = np.ones((t, rows, cols), dtype=np.uint8)
    if pattern.kind is PatternKind.LARGE_SCALE:
        if rows % 2 or cols % 2:
            raise ValueError(
                f"large_scale pattern needs even rows and cols, got {rows}x{cols}"
            )
        flags[:, rows // 2 :, cols // 2 :] = 0
        return MaskSequence(flags, pattern)

    rng = np.random.default_rng(pattern.seed)
    k = masked_count(pattern.missing_ratio, rows, cols)
    if pattern.kind is PatternKind.FIXED:
        hidden = rng.choice(rows * cols, size=k, replace=False)
        flags.reshape(t, -1)[:, hidden] = 0
    else:
        flat = flags.reshape(t, -1)
        for i in range(t):
            flat[i, rng.choice(rows * cols, size=k, replace=False)] = 0
    return MaskSequence(flags, pattern)


def _as_date(x) -> date:
    if isinstance(x, datetime):
        return x.date()
    if isinstance(x, date):
        return x
    return date.fromisoformat(str(x))


def calendar_features(
    timestamp: datetime, holiday_table: Iterable | None = None
) -> ExternalFeatureVector:
    """Calendar indices for one timestamp; weeks start on Monday (index 0)."""
    holidays = {_as_date(h) for h in holiday_table} if holiday_table else set()
    return ExternalFeatureVector(
        day_index=timestamp.day - 1,
        week_index=timestamp.weekday(),
        month_index=timestamp.month - 1,
        holiday=int(timestamp.date() in holidays),
    )


def series_features(series: GridSeries, holiday_table=None) -> list[ExternalFeatureVector]:
    return [calendar_features(ts, holiday_table) for ts in series.timestamps()]


def encode_features(features: Sequence[ExternalFeatureVector]) -> np.ndarray:
    """One-hot encode calendar indices and append sorted extras: [T, F]."""
    extra_keys = sorted(features[0].extras) if features else []
    out = np.zeros((len(features), CALENDAR_DIM + len(extra_keys)), dtype=np.float32)
    for i, f in enumerate(features):
        out[i, f.day_index] = 1.0
        out[i, 31 + f.week_index] = 1.0
        out[i, 38 + f.month_index] = 1.0
        out[i, 50] = f.holiday
        for j, key in enumerate(extra_keys):
            out[i, CALENDAR_DIM + j] = f.extras[key]
    return out


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["min"]), float(d["max"]), bool(d.get("degenerate", False)))

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormStats":
        lo, hi = float(np.min(values)), float(np.max(values))
        return cls(lo, hi, degenerate=not hi > lo)


def normalize_array(values: np.ndarray, stats: NormStats) -> np.ndarray:
    if stats.degenerate:
        return np.zeros_like(values)
    scale = stats.max - stats.min
    return (2.0 * (values - stats.min) / scale - 1.0).astype(values.dtype)


def denormalize_array(values, stats: NormStats):
    if stats.degenerate:
        return values * 0 + stats.min
    return (values + 1.0) * (0.5 * (stats.max - stats.min)) + stats.min


def normalize(
    series: GridSeries, stats: NormStats | None = None
) -> tuple[GridSeries, NormStats]:
    """Map values affinely from [min, max] onto [-1, 1].

    Pass ``stats`` fitted on the training split when normalizing held-out data.
    """
    if stats is None:
        stats = NormStats.fit(series.values)
    return series.with_values(normalize_array(series.values, stats)), stats


def denormalize(series: GridSeries, stats: NormStats) -> GridSeries:
    return series.with_values(denormalize_array(series.values, stats))
