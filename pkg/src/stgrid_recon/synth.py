"""Synthetic fine-grained series with planted periodicities and spatial structure.

The field is a sum of static hotspots (sub-coarse-cell detail), two zones
modulated by periodic cycles with different phases, a hotspot drifting along
a closed orbit once per primary period, and white noise. Values stay
non-negative, like counts per interval.
"""

from __future__ import annotations

from datetime import datetime

import numpy as np

from .grid import BBox, GridSeries, GridSpec, Granularity


def _bump(yy, xx, cy, cx, width):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))


def synth_series(
    rows: int = 8,
    cols: int = 8,
    magnification: int = 2,
    steps: int = 480,
    periods=(24, 48),
    amplitudes=(0.5, 0.2),
    hotspots: int = 10,
    noise: float = 1.0,
    seed: int = 0,
    start_time: datetime = datetime(2013, 7, 1),
    interval: float = 3600.0,
    bbox: BBox | None = None,
) -> GridSeries:
    """Fine-grained series on a (rows*N) x (cols*N) grid.

    ``periods``/``amplitudes`` plant multiplicative cycles (fractions of the
    base level); the first period also drives the drifting hotspot.
    """
    rng = np.random.default_rng(seed)
    h, w = rows * magnification, cols * magnification
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    base = np.full((h, w), 10.0)
    for _ in range(hotspots):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        base += rng.uniform(20.0, 60.0) * _bump(yy, xx, cy, cx, rng.uniform(0.6, 1.8))

    # two zones (e.g. residential vs business) peaking half a cycle apart
    zone = 1.0 / (1.0 + np.exp(-(xx - w / 2.0) / 1.5))
    phase = np.pi * zone

    t = np.arange(steps, dtype=np.float64)[:, None, None]
    modulation = np.ones((steps, h, w))
    for i, (p, a) in enumerate(zip(periods, amplitudes)):
        shift = phase if i == 0 else 0.0
        modulation = modulation + a * np.sin(2 * np.pi * t / p + shift)
    values = base[None] * modulation

    p0 = periods[0]
    angle = 2 * np.pi * t / p0
    cy = h / 2.0 + 0.3 * h * np.sin(angle)
    cx = w / 2.0 + 0.3 * w * np.cos(angle)
    values = values + 40.0 * _bump(yy[None], xx[None], cy, cx, 1.5)

    values = values + noise * rng.standard_normal(values.shape)
    values = np.clip(values, 0.0, None).astype(np.float32)

    spec = GridSpec(
        rows=rows,
        cols=cols,
        magnification=magnification,
        bbox=bbox or BBox(39.82, 39.9966, 116.2498, 116.4950),
        interval=interval,
    )
    return GridSeries(values, spec, start_time, Granularity.FINE)


def split_series(series: GridSeries, fractions=(2, 1, 1)) -> tuple[GridSeries, GridSeries, GridSeries]:
    """Contiguous train/validation/test split by ratio."""
    total = sum(fractions)
    n = series.num_steps
    a = n * fractions[0] // total
    b = a + n * fractions[1] // total
    return series.slice(0, a), series.slice(a, b), series.slice(b, n)
