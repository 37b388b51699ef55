"""Two-stage reconstruction: coarse completion (stage C) then fine inference (stage F)."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import __version__
from .diffusion import NoiseSchedule, build_schedule, epsilon_loss, predict_x0, q_sample, sample_loop
from .grid import (
    GridSeries,
    Granularity,
    MaskSequence,
    NormStats,
    PatternKind,
    SparsePatternSpec,
    downsample_array,
    encode_features,
    generate_masks,
    masked_count,
    normalize_array,
    denormalize_array,
    series_features,
    upsample_nearest,
)
from .nets import AttentionConfig, Condition, NetConfig, NoisePredictor
from .storage import atomic_write_bytes

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stgrid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    lr: float = 2e-3
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    pretrain_steps_c: int = 600
    pretrain_steps_f: int = 600
    joint_steps: int = 200
    joint_lr_frac: float = 0.25
    joint_tau_frac: float = 0.1
    lambda_c: float = 1.0
    lambda_f: float = 1.0
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05
    schedule_kind: str = "linear"
    history: int = 8
    d_model: int = 64
    heads: int = 4
    attention_layers: int = 2
    ff_width: int = 128
    times_layers: int = 2
    top_k: int = 3
    base_channels: int = 32
    tau_dim: int = 64
    no_pre: bool = False
    no_joint: bool = False
    no_stpointformer: bool = False
    no_tpatternnet: bool = False
    coarse_samples: int = 1
    sample_chunk: int = 64

    def __post_init__(self):
        positive = (
            "batch_size", "diffusion_steps", "history", "d_model", "heads", "ff_width",
            "top_k", "base_channels", "tau_dim", "coarse_samples", "sample_chunk",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_steps_c", "pretrain_steps_f", "joint_steps", "attention_layers", "times_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.joint_lr_frac <= 1 or not 0 < self.joint_tau_frac <= 1:
            raise ValueError("joint_lr_frac and joint_tau_frac must lie in (0, 1]")
        if self.lambda_c < 0 or self.lambda_f < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.diffusion_steps, self.beta_start, self.beta_end, self.schedule_kind)

    def net_config(self, stage: str, rows: int, cols: int, magnification: int, feature_dim: int) -> NetConfig:
        use_inter = not (self.no_stpointformer if stage == "C" else self.no_tpatternnet)
        return NetConfig(
            stage=stage,
            rows=rows,
            cols=cols,
            magnification=magnification,
            history=self.history,
            feature_dim=feature_dim,
            base_channels=self.base_channels,
            attention=AttentionConfig(self.d_model, self.heads, self.attention_layers, self.ff_width),
            times_layers=self.times_layers,
            top_k=self.top_k,
            tau_dim=self.tau_dim,
            use_inter=use_inter,
        )


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelBundle:
    stage: str
    net: NoisePredictor
    schedule: NoiseSchedule
    norm: NormStats
    loss_curve: list[float] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def net_config(self) -> NetConfig:
        return self.net.cfg

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def has_inter_encoder(self) -> bool:
        return self.net.inter is not None


@dataclass
class CheckpointBundle:
    stage_c: ModelBundle
    stage_f: ModelBundle
    config: TrainConfig
    pattern: SparsePatternSpec | None = None
    grid_meta: dict = field(default_factory=dict)
    log: dict = field(default_factory=dict)

    def provenance(self) -> dict:
        return {
            "train": self.config.to_dict(),
            "pattern": self.pattern.to_dict() if self.pattern else None,
        }

    def config_hash(self) -> str:
        return config_hash(self.provenance())


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: CheckpointBundle):
        super().__init__(message)
        self.checkpoint = checkpoint


def window_indices(t: int, history: int) -> np.ndarray:
    """Indices of the ``history`` steps ending at ``t``, clamped at the series start."""
    return np.clip(np.arange(t - history + 1, t + 1), 0, None)


def _features_array(series: GridSeries, external) -> np.ndarray:
    if external is None:
        external = series_features(series)
    if isinstance(external, np.ndarray):
        feats = external.astype(np.float32)
    else:
        feats = encode_features(list(external))
    if feats.shape[0] != series.num_steps:
        raise ValueError(f"{feats.shape[0]} feature rows for {series.num_steps} steps")
    return feats


class TrainingData:
    """Normalized tensors of one training series plus batch builders for both stages."""

    def __init__(
        self,
        fine: GridSeries,
        pattern: SparsePatternSpec,
        history: int,
        norm: NormStats,
        external=None,
    ):
        if fine.granularity is not Granularity.FINE:
            raise ValueError("training data must be a fine-grained series")
        self.n = fine.spec.magnification
        self.history = history
        self.pattern = pattern
        self.norm = norm
        fine_n = normalize_array(fine.values.astype(np.float32), norm)
        self.fine = torch.from_numpy(fine_n)
        self.coarse = torch.from_numpy(downsample_array(fine_n, self.n))
        self.feats = torch.from_numpy(_features_array(fine, external))
        steps, rows, cols = self.coarse.shape
        self.masks = torch.from_numpy(generate_masks(pattern, (steps, rows, cols)).flags.astype(np.float32))
        self.hidden = masked_count(pattern.missing_ratio, rows, cols)
        self.degenerate = norm.degenerate

    @property
    def num_steps(self) -> int:
        return self.coarse.shape[0]

    def sample_indices(self, b: int, gen: torch.Generator) -> torch.Tensor:
        return torch.randint(0, self.num_steps, (b,), generator=gen)

    def windows(self, idx: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(np.stack([window_indices(int(i), self.history) for i in idx]))

    def draw_masks(self, win: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        """Masks for every history step; random patterns are redrawn per batch."""
        if self.pattern.kind is not PatternKind.RANDOM:
            return self.masks[win]
        b, w = win.shape
        rows, cols = self.coarse.shape[1:]
        order = torch.rand(b, w, rows * cols, generator=gen).argsort(dim=-1)
        flags = torch.ones(b, w, rows * cols)
        flags.scatter_(-1, order[..., : self.hidden], 0.0)
        # steps repeated by edge clamping share one mask
        same = win[:, 1:] == win[:, :-1]
        for j in range(1, w):
            flags[:, j][same[:, j - 1]] = flags[:, j - 1][same[:, j - 1]]
        return flags.reshape(b, w, rows, cols)

    def batch_c(self, idx, gen) -> tuple[torch.Tensor, Condition]:
        win = self.windows(idx)
        masks = self.draw_masks(win, gen)
        hist = self.coarse[win] * masks
        cond = Condition(
            observed=hist[:, -1:],
            history=hist,
            external=self.feats[win],
            mask=masks[:, -1:],
            history_mask=masks,
        )
        return self.coarse[idx][:, None], cond

    def batch_f(self, idx, current: torch.Tensor | None = None) -> tuple[torch.Tensor, Condition]:
        """Stage-F batch conditioned on pseudo-complete coarse truth, or on
        ``current`` [B, 1, I, J] in place of the current coarse step."""
        win = self.windows(idx)
        hist = self.coarse[win]
        if current is not None:
            hist = torch.cat([hist[:, :-1], current], dim=1)
        up = hist[:, -1:].repeat_interleave(self.n, dim=-2).repeat_interleave(self.n, dim=-1)
        cond = Condition(observed=up, history=hist, external=self.feats[win])
        return self.fine[idx][:, None], cond


def _lr_at(cfg: TrainConfig, step: int, total: int, base: float | None = None) -> float:
    base = cfg.lr if base is None else base
    if total <= 1:
        return base
    frac = cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * step / (total - 1)))
    return base * frac


def new_bundle(stage: str, fine: GridSeries, cfg: TrainConfig, norm: NormStats, feature_dim: int) -> ModelBundle:
    spec = fine.spec
    net_cfg = cfg.net_config(stage, spec.rows, spec.cols, spec.magnification, feature_dim)
    torch.manual_seed(cfg.seed + (0 if stage == "C" else 1))
    net = NoisePredictor(net_cfg)
    return ModelBundle(stage, net, cfg.schedule(), norm)


def _fit_norm(fine: GridSeries, norm: NormStats | None) -> NormStats:
    norm = norm or NormStats.fit(fine.values)
    if norm.degenerate:
        log.warning("training series is constant; normalization degenerates to zeros")
    return norm


def _train_stage(bundle: ModelBundle, data: TrainingData, steps: int, cfg: TrainConfig, seed_offset: int) -> ModelBundle:
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + seed_offset)
    net = bundle.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, step, steps)
        idx = data.sample_indices(cfg.batch_size, gen)
        if bundle.stage == "C":
            target, cond = data.batch_c(idx, gen)
        else:
            target, cond = data.batch_f(idx)
        loss = epsilon_loss(net, target, cond, bundle.schedule, gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"stage {bundle.stage} loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        bundle.loss_curve.append(loss.item())
    net.eval()
    if data.degenerate:
        bundle.flags["degenerate_data"] = True
    return bundle


def pretrain_stage_c(
    fine_truth: GridSeries,
    pattern: SparsePatternSpec,
    cfg: TrainConfig,
    norm: NormStats | None = None,
    external=None,
) -> ModelBundle:
    """Train coarse completion on downsampled truth masked by ``pattern``."""
    norm = _fit_norm(fine_truth, norm)
    data = TrainingData(fine_truth, pattern, cfg.history, norm, external)
    bundle = new_bundle("C", fine_truth, cfg, norm, data.feats.shape[1])
    return _train_stage(bundle, data, cfg.pretrain_steps_c, cfg, seed_offset=1)


def pretrain_stage_f(
    fine_truth: GridSeries,
    cfg: TrainConfig,
    norm: NormStats | None = None,
    external=None,
) -> ModelBundle:
    """Train fine inference conditioned on the pseudo-complete coarse series."""
    norm = _fit_norm(fine_truth, norm)
    data = TrainingData(fine_truth, SparsePatternSpec(PatternKind.FIXED, 0.0), cfg.history, norm, external)
    bundle = new_bundle("F", fine_truth, cfg, norm, data.feats.shape[1])
    return _train_stage(bundle, data, cfg.pretrain_steps_f, cfg, seed_offset=2)


def _snapshot(bundle_c, bundle_f, cfg, pattern, fine, log_) -> CheckpointBundle:
    return CheckpointBundle(
        copy.deepcopy(bundle_c), copy.deepcopy(bundle_f), cfg, pattern, _grid_meta(fine), dict(log_)
    )


def _grid_meta(fine: GridSeries) -> dict:
    return {
        "grid": fine.spec.to_dict(),
        "start_time": fine.start_time.isoformat(),
        "steps": fine.num_steps,
        "granularity": fine.granularity.value,
    }


def joint_train(
    bundle_c: ModelBundle,
    bundle_f: ModelBundle,
    data: GridSeries,
    pattern: SparsePatternSpec,
    cfg: TrainConfig,
    steps: int | None = None,
    external=None,
    lr: float | None = None,
) -> CheckpointBundle:
    """Fine-tune both stages on lambda_C * L_C + lambda_F * L_F.

    Stage F is conditioned on stage C's one-shot clean estimate (observed
    cells restored), so the stage-F loss back-propagates into stage C. The
    estimate comes from a second stage-C pass at a low noise level
    (tau <= joint_tau_frac * T), where it resembles a finished sample rather
    than a blur. ``lr`` defaults to ``cfg.lr * cfg.joint_lr_frac``.
    """
    log_ = {"loss_c": bundle_c.loss_curve, "loss_f": bundle_f.loss_curve, "joint": []}
    if cfg.no_joint:
        return CheckpointBundle(bundle_c, bundle_f, cfg, pattern, _grid_meta(data), log_)
    steps = cfg.joint_steps if steps is None else steps
    lr = cfg.lr * cfg.joint_lr_frac if lr is None else lr
    sched_c = bundle_c.schedule
    tau_max = max(1, math.ceil(cfg.joint_tau_frac * sched_c.T))
    tdata = TrainingData(data, pattern, cfg.history, bundle_c.norm, external)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + 3)
    nets = [bundle_c.net, bundle_f.net]
    params = [p for net in nets for p in net.parameters()]
    opt = torch.optim.Adam(params, lr=lr)
    for net in nets:
        net.train()
    joint_log = log_["joint"]
    grad_norm_c = []
    last_good = _snapshot(bundle_c, bundle_f, cfg, pattern, data, log_)
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, step, steps, lr)
        idx = tdata.sample_indices(cfg.batch_size, gen)
        target_c, cond_c = tdata.batch_c(idx, gen)
        loss_c = epsilon_loss(bundle_c.net, target_c, cond_c, sched_c, gen)
        tau = torch.randint(1, tau_max + 1, (len(idx),), generator=gen)
        eps = torch.randn(target_c.shape, generator=gen)
        s_tau = q_sample(target_c, tau, eps, sched_c)
        x0 = predict_x0(s_tau, tau, bundle_c.net(s_tau, tau, cond_c), sched_c).clamp(-1.0, 1.0)
        x0 = cond_c.mask * cond_c.observed + (1.0 - cond_c.mask) * x0
        target_f, cond_f = tdata.batch_f(idx, current=x0)
        loss_f = epsilon_loss(bundle_f.net, target_f, cond_f, bundle_f.schedule, gen)
        loss = cfg.lambda_c * loss_c + cfg.lambda_f * loss_f
        if not torch.isfinite(loss):
            last_good.log["diverged_at"] = step
            raise TrainingDiverged(f"joint loss became non-finite at step {step}", last_good)
        opt.zero_grad()
        loss.backward()
        grad_norm_c.append(
            float(torch.sqrt(sum((p.grad**2).sum() for p in bundle_c.net.parameters() if p.grad is not None)))
        )
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        joint_log.append(loss.item())
        if (step + 1) % 50 == 0:
            last_good = _snapshot(bundle_c, bundle_f, cfg, pattern, data, log_)
    for net in nets:
        net.eval()
    log_["grad_norm_c"] = grad_norm_c
    return CheckpointBundle(bundle_c, bundle_f, cfg, pattern, _grid_meta(data), log_)


def train(
    fine_truth: GridSeries,
    pattern: SparsePatternSpec,
    cfg: TrainConfig,
    external=None,
) -> CheckpointBundle:
    """Full training honoring the ablation flags.

    Without pretraining the joint phase runs from scratch for the joint budget
    plus the longer of the two pretraining budgets.
    """
    norm = _fit_norm(fine_truth, None)
    if cfg.no_pre:
        feature_dim = _features_array(fine_truth, external).shape[1]
        bundle_c = new_bundle("C", fine_truth, cfg, norm, feature_dim)
        bundle_f = new_bundle("F", fine_truth, cfg, norm, feature_dim)
        steps = cfg.joint_steps + max(cfg.pretrain_steps_c, cfg.pretrain_steps_f)
        return joint_train(bundle_c, bundle_f, fine_truth, pattern, cfg, steps=steps, external=external, lr=cfg.lr)
    bundle_c = pretrain_stage_c(fine_truth, pattern, cfg, norm, external)
    bundle_f = pretrain_stage_f(fine_truth, cfg, norm, external)
    return joint_train(bundle_c, bundle_f, fine_truth, pattern, cfg, external=external)


# ---------------------------------------------------------------- inference


def _predictor(net: NoisePredictor):
    def fn(s, tau, cond):
        return net(s, tau, cond)

    return fn


def _sample_chunks(bundle: ModelBundle, cond: Condition, shape, gen, chunk: int) -> torch.Tensor:
    outs = []
    n = len(cond)
    for lo in range(0, n, chunk):
        sel = slice(lo, min(lo + chunk, n))
        sub = cond.select(sel)
        outs.append(
            sample_loop(_predictor(bundle.net), sub, bundle.schedule, (len(sub),) + tuple(shape), generator=gen)
        )
    return torch.cat(outs).clamp(-1.0, 1.0)


def _coarse_condition(obs_n: np.ndarray, flags: np.ndarray, feats: np.ndarray, history: int) -> Condition:
    steps = obs_n.shape[0]
    win = torch.from_numpy(np.stack([window_indices(t, history) for t in range(steps)]))
    obs = torch.from_numpy(obs_n)
    fl = torch.from_numpy(flags.astype(np.float32))
    hist = obs[win] * fl[win]
    return Condition(
        observed=hist[:, -1:],
        history=hist,
        external=torch.from_numpy(feats)[win],
        mask=fl[win][:, -1:],
        history_mask=fl[win],
    )


def _complete_normalized(
    bundle_c: ModelBundle,
    observed: GridSeries,
    mask: MaskSequence,
    feats: np.ndarray,
    gen: torch.Generator,
    samples: int,
    chunk: int,
    skip: int = 0,
) -> np.ndarray:
    """Sampled coarse completion in normalized units for steps ``skip:``,
    observed cells restored."""
    if bundle_c.stage != "C":
        raise ValueError("complete_coarse needs a stage-C bundle")
    cfg = bundle_c.net_config
    if observed.values.shape[1:] != (cfg.rows, cfg.cols):
        raise ValueError(
            f"observed grid {observed.values.shape[1:]} does not match model {(cfg.rows, cfg.cols)}"
        )
    if observed.values.shape != mask.flags.shape:
        raise ValueError("observed series and mask differ in shape")
    flags = mask.flags.astype(np.float32)
    obs_n = normalize_array(observed.values.astype(np.float32), bundle_c.norm) * flags
    cond = _coarse_condition(obs_n, flags, feats, cfg.history).select(slice(skip, None))
    shape = (1, cfg.rows, cfg.cols)
    draws = [_sample_chunks(bundle_c, cond, shape, gen, chunk) for _ in range(samples)]
    est = torch.stack(draws).mean(0)[:, 0].numpy()
    keep = flags[skip:]
    return keep * obs_n[skip:] + (1 - keep) * est


def complete_coarse(
    bundle_c: ModelBundle,
    observed: GridSeries,
    mask: MaskSequence,
    external=None,
    seed: int = 0,
    history: tuple[GridSeries, MaskSequence] | None = None,
    samples: int = 1,
    chunk: int = 64,
) -> GridSeries:
    """Fill the unobserved cells of every step of ``observed``.

    History windows come from ``observed`` itself, preceded by the optional
    ``history`` prefix. Observed cells keep their exact input values.
    """
    skip = 0
    feats = _features_array(observed, external)
    obs_all, mask_all = observed, mask
    if history is not None:
        h_series, h_mask = history
        skip = h_series.num_steps
        obs_all = GridSeries(
            np.concatenate([h_series.values, observed.values]), observed.spec,
            h_series.start_time, Granularity.COARSE,
        )
        mask_all = MaskSequence(np.concatenate([h_mask.flags, mask.flags]))
        feats = np.concatenate([_features_array(h_series, None), feats])
    gen = torch.Generator().manual_seed(int(seed))
    est_n = _complete_normalized(bundle_c, obs_all, mask_all, feats, gen, samples, chunk, skip)
    raw = denormalize_array(est_n, bundle_c.norm).astype(np.float32)
    flags = mask.flags.astype(bool)
    raw[flags] = observed.values[flags]
    return observed.with_values(raw)


def _fine_from_coarse(
    bundle_f: ModelBundle, coarse_n: np.ndarray, feats: np.ndarray, gen, chunk: int
) -> np.ndarray:
    cfg = bundle_f.net_config
    steps = coarse_n.shape[0]
    win = torch.from_numpy(np.stack([window_indices(t, cfg.history) for t in range(steps)]))
    coarse = torch.from_numpy(coarse_n.astype(np.float32))
    hist = coarse[win]
    up = torch.from_numpy(upsample_nearest(coarse_n.astype(np.float32), cfg.magnification))[:, None]
    cond = Condition(observed=up, history=hist, external=torch.from_numpy(feats)[win])
    return _sample_chunks(bundle_f, cond, (1,) + cfg.out_shape, gen, chunk)[:, 0].numpy()


def reconstruct(
    checkpoint: CheckpointBundle,
    observed_series: GridSeries,
    masks: MaskSequence,
    external=None,
    seed: int = 0,
    coarse_samples: int | None = None,
    fine_model=None,
) -> GridSeries:
    """Complete fine-grained maps [T, N*I, N*J] in data units.

    ``fine_model`` optionally replaces stage F: a callable mapping the
    completed coarse series (data units, [T, I, J]) and N to [T, N*I, N*J].
    """
    cfg = checkpoint.config
    samples = coarse_samples or cfg.coarse_samples
    feats = _features_array(observed_series, external)
    gen = torch.Generator().manual_seed(int(seed))
    coarse_n = _complete_normalized(
        checkpoint.stage_c, observed_series, masks, feats, gen, samples, cfg.sample_chunk
    )
    n = checkpoint.stage_f.net_config.magnification
    spec = observed_series.spec
    if fine_model is not None:
        coarse_raw = denormalize_array(coarse_n, checkpoint.stage_c.norm).astype(np.float32)
        flags = masks.flags.astype(bool)
        coarse_raw[flags] = observed_series.values[flags]
        fine = _call_fine_model(fine_model, coarse_raw, n)
    else:
        fine_n = _fine_from_coarse(checkpoint.stage_f, coarse_n, feats, gen, cfg.sample_chunk)
        fine = denormalize_array(fine_n, checkpoint.stage_f.norm).astype(np.float32)
    return GridSeries(fine, spec, observed_series.start_time, Granularity.FINE)


class PluginError(ValueError):
    pass


def _call_fine_model(fine_model, coarse: np.ndarray, n: int) -> np.ndarray:
    out = np.asarray(fine_model(coarse.copy(), n), dtype=np.float32)
    t, i, j = coarse.shape
    if out.shape != (t, i * n, j * n):
        raise PluginError(f"fine-grained plug-in returned shape {out.shape}, expected {(t, i * n, j * n)}")
    if not np.all(np.isfinite(out)):
        raise PluginError("fine-grained plug-in returned non-finite values")
    return out


# ---------------------------------------------------------------- checkpoints


def _bundle_meta(b: ModelBundle) -> dict:
    return {
        "stage": b.stage,
        "net": b.net_config.to_dict(),
        "schedule": b.schedule.to_dict(),
        "norm": b.norm.to_dict(),
        "flags": b.flags,
        "loss_curve": b.loss_curve,
    }


def _state_bytes(net: NoisePredictor) -> bytes:
    buf = io.BytesIO()
    torch.save(net.state_dict(), buf)
    return buf.getvalue()


def _put(zf: zipfile.ZipFile, name: str, data) -> None:
    # fixed entry timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: CheckpointBundle) -> None:
    """Write a zip archive: versioned manifest, JSON config/metadata and both
    stages' parameter payloads."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "payloads": {"stage_c": "stage_c.pt", "stage_f": "stage_f.pt"},
        }
        _put(zf, "manifest.json", json.dumps(manifest, indent=2))
        _put(zf, "config.json", json.dumps(ckpt.provenance(), indent=2, sort_keys=True))
        _put(zf, "grid_meta.json", json.dumps(ckpt.grid_meta, indent=2))
        _put(zf, "stage_c.json", json.dumps(_bundle_meta(ckpt.stage_c)))
        _put(zf, "stage_f.json", json.dumps(_bundle_meta(ckpt.stage_f)))
        _put(zf, "stage_c.pt", _state_bytes(ckpt.stage_c.net))
        _put(zf, "stage_f.pt", _state_bytes(ckpt.stage_f.net))
        _put(zf, "log.json", json.dumps(ckpt.log))
    atomic_write_bytes(path, buf.getvalue())


def _load_bundle(zf: zipfile.ZipFile, name: str) -> ModelBundle:
    meta = json.loads(zf.read(f"{name}.json"))
    net = NoisePredictor(NetConfig.from_dict(meta["net"]))
    state = torch.load(io.BytesIO(zf.read(f"{name}.pt")), weights_only=True)
    net.load_state_dict(state)
    net.eval()
    return ModelBundle(
        meta["stage"],
        net,
        NoiseSchedule.from_dict(meta["schedule"]),
        NormStats.from_dict(meta["norm"]),
        list(meta.get("loss_curve", [])),
        dict(meta.get("flags", {})),
    )


def load_checkpoint(path) -> CheckpointBundle:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint archive")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        prov = json.loads(zf.read("config.json"))
        pattern = SparsePatternSpec(**prov["pattern"]) if prov.get("pattern") else None
        return CheckpointBundle(
            _load_bundle(zf, "stage_c"),
            _load_bundle(zf, "stage_f"),
            TrainConfig.from_dict(prov["train"]),
            pattern,
            json.loads(zf.read("grid_meta.json")),
            json.loads(zf.read("log.json")),
        )
