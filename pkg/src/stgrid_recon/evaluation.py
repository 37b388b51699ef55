"""Metrics, reference baselines, scenario and ablation harness, heatmap export."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .grid import (
    GridSeries,
    Granularity,
    MaskSequence,
    SparsePatternSpec,
    apply_mask,
    downsample,
    generate_masks,
)
from .pipeline import CheckpointBundle, TrainConfig, config_hash, reconstruct, train
from .storage import atomic_write_bytes, atomic_write_text

ABLATIONS = ("noPre", "noJoint", "noSTPointFormer", "noTPatternNet", "noFG-swap")
_FLAG_FOR = {
    "noPre": "no_pre",
    "noJoint": "no_joint",
    "noSTPointFormer": "no_stpointformer",
    "noTPatternNet": "no_tpatternnet",
}


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, GridSeries) else np.asarray(x)


def mae_rmse(pred, truth) -> tuple[float, float]:
    p = _values(pred).astype(np.float64)
    t = _values(truth).astype(np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    err = p - t
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def per_step_errors(pred, truth) -> list[dict]:
    err = _values(pred).astype(np.float64) - _values(truth).astype(np.float64)
    mae = np.abs(err).mean(axis=(1, 2))
    rmse = np.sqrt((err**2).mean(axis=(1, 2)))
    return [{"mae": float(a), "rmse": float(b)} for a, b in zip(mae, rmse)]


@dataclass
class EvalReport:
    scenario: str
    mae: float
    rmse: float
    per_step: list[dict]
    seed: int
    config_hash: str
    runtime_s: float = field(default=0.0, compare=False)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "scenario": self.scenario,
            "mae": self.mae,
            "rmse": self.rmse,
            "per_step": self.per_step,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "runtime_s": self.runtime_s,
        }
        out.update(self.extra)
        return out

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json(), indent=2))


def score(pred, truth, scenario: str, seed: int = 0, cfg_hash: str = "", runtime_s: float = 0.0) -> EvalReport:
    mae, rmse = mae_rmse(pred, truth)
    return EvalReport(scenario, mae, rmse, per_step_errors(pred, truth), seed, cfg_hash, runtime_s)


# ---------------------------------------------------------------- baselines


def nearest_fill(values: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Fill unobserved cells of every step from the nearest observed cell."""
    out = values.astype(np.float32).copy()
    for t in range(values.shape[0]):
        hidden = flags[t] == 0
        if not hidden.any():
            continue
        if hidden.all():
            out[t] = 0.0
            continue
        _, (ri, ci) = ndimage.distance_transform_edt(hidden, return_indices=True)
        out[t] = values[t][ri, ci]
    return out


def bilinear_upsample(values: np.ndarray, n: int) -> np.ndarray:
    x = torch.from_numpy(values.astype(np.float32))[:, None]
    return F.interpolate(x, scale_factor=n, mode="bilinear", align_corners=False)[:, 0].numpy()


def nn_bilinear_baseline(observed: GridSeries, mask: MaskSequence) -> np.ndarray:
    filled = nearest_fill(observed.values, mask.flags)
    return bilinear_upsample(filled, observed.spec.magnification)


def historical_mean_baseline(train_fine: GridSeries, steps: int) -> np.ndarray:
    """Per-fine-cell mean of the training series, repeated ``steps`` times."""
    mean = train_fine.values.astype(np.float64).mean(axis=0).astype(np.float32)
    return np.repeat(mean[None], steps, axis=0)


# ---------------------------------------------------------------- scenarios


def prepare_observation(truth_fine: GridSeries, pattern: SparsePatternSpec) -> tuple[GridSeries, MaskSequence]:
    coarse = downsample(truth_fine)
    mask = generate_masks(pattern, coarse.values.shape)
    return apply_mask(coarse, mask), mask


def run_scenario(
    checkpoint: CheckpointBundle,
    truth_fine: GridSeries,
    pattern: SparsePatternSpec,
    seed: int = 0,
    external=None,
    fine_model=None,
) -> EvalReport:
    """Downsample, mask, reconstruct and score against the fine truth."""
    if truth_fine.granularity is not Granularity.FINE:
        raise ValueError("run_scenario expects a fine-grained truth series")
    start = time.perf_counter()
    observed, mask = prepare_observation(truth_fine, pattern)
    pred = reconstruct(checkpoint, observed, mask, external, seed, fine_model=fine_model)
    report = score(
        pred, truth_fine, pattern.describe(), seed, checkpoint.config_hash(), time.perf_counter() - start
    )
    report.extra["pattern"] = pattern.to_dict()
    return report


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")
    if variant == "noFG-swap":
        return cfg
    return replace(cfg, **{_FLAG_FOR[variant]: True})


@dataclass
class AblationResult:
    variant: str
    full: EvalReport
    ablated: EvalReport
    full_checkpoint: CheckpointBundle = field(repr=False)
    ablated_checkpoint: CheckpointBundle = field(repr=False)

    def relative_change(self) -> float:
        """(ablated - full) / full MAE; positive means the full model is better."""
        return (self.ablated.mae - self.full.mae) / self.full.mae

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "full": self.full.to_json(),
            "ablated": self.ablated.to_json(),
            "relative_mae_change": self.relative_change(),
        }


def run_ablation(
    variant: str,
    train_fine: GridSeries,
    test_fine: GridSeries,
    pattern: SparsePatternSpec,
    cfg: TrainConfig,
    seed: int = 0,
    fine_model=None,
    full_checkpoint: CheckpointBundle | None = None,
) -> AblationResult:
    """Train (or reuse) the full model and the variant under identical data
    and seeds, and score both on ``test_fine``.

    ``noFG-swap`` keeps the full model's stage C and replaces stage F by the
    ``fine_model`` plug-in.
    """
    vcfg = variant_config(variant, cfg)
    if variant == "noFG-swap" and fine_model is None:
        raise ValueError("noFG-swap needs a fine_model plug-in")
    full_ckpt = full_checkpoint or train(train_fine, pattern, cfg)
    full_report = run_scenario(full_ckpt, test_fine, pattern, seed)
    if variant == "noFG-swap":
        ablated_ckpt = full_ckpt
        ablated_report = run_scenario(full_ckpt, test_fine, pattern, seed, fine_model=fine_model)
        ablated_report.config_hash = config_hash({**full_ckpt.provenance(), "fine_model": repr(fine_model)})
    else:
        ablated_ckpt = train(train_fine, pattern, vcfg)
        ablated_report = run_scenario(ablated_ckpt, test_fine, pattern, seed)
    ablated_report.extra["variant"] = variant
    full_report.extra["variant"] = "full"
    return AblationResult(variant, full_report, ablated_report, full_ckpt, ablated_ckpt)


# ---------------------------------------------------------------- export


def grid_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "value"])
    for (r, c), v in np.ndenumerate(grid):
        w.writerow([r, c, repr(float(v))])
    return buf.getvalue()


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    h = max(int(r["row"]) for r in rows) + 1
    w = max(int(r["col"]) for r in rows) + 1
    out = np.zeros((h, w), dtype=np.float64)
    for r in rows:
        out[int(r["row"]), int(r["col"])] = float(r["value"])
    return out


def export_heatmap(grid, step: int, path, cmap: str = "viridis") -> tuple[Path, Path]:
    """Write ``<path>.png`` (colour-mapped raster) and ``<path>.csv`` (exact values)
    for one step of a series."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = _values(grid)
    if not 0 <= step < values.shape[0]:
        raise IndexError(f"step {step} outside [0, {values.shape[0]})")
    frame = values[step]
    base = Path(path)
    png, csv_path = base.with_suffix(".png"), base.with_suffix(".csv")
    lo, hi = float(frame.min()), float(frame.max())
    buf = io.BytesIO()
    plt.imsave(buf, frame, cmap=cmap, vmin=lo, vmax=hi if hi > lo else lo + 1.0, format="png")
    atomic_write_bytes(png, buf.getvalue())
    atomic_write_text(csv_path, grid_csv(frame))
    return png, csv_path


def export_error_map(pred, truth, step: int, path, cmap: str = "magma") -> tuple[Path, Path]:
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    err = np.abs(p.astype(np.float64) - t.astype(np.float64))
    return export_heatmap(err, step, path, cmap)
