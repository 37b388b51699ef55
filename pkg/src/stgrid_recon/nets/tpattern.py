"""FFT period detection, 1-D/2-D folding and the TimesBlock temporal encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


# amplitudes closer than this (relative to the spectrum scale) count as ties
_TIE_DECIMALS = 9


@dataclass(frozen=True)
class PeriodDecomposition:
    freqs: np.ndarray
    periods: np.ndarray
    amps: np.ndarray

    @property
    def k(self) -> int:
        return len(self.freqs)


def amplitude_spectrum(x: torch.Tensor) -> torch.Tensor:
    """Channel-averaged DFT amplitude along the time axis: [..., t, d] -> [..., t//2 + 1]."""
    return torch.fft.rfft(x, dim=-2).abs().mean(dim=-1)


def _check_k(t: int, k: int) -> None:
    if t < 2:
        raise ValueError(f"need at least 2 time steps, got {t}")
    if not 1 <= k <= t // 2:
        raise ValueError(f"k must lie in [1, {t // 2}] for t={t}, got {k}")


def topk_frequencies(amp: torch.Tensor, k: int) -> torch.Tensor:
    """Top-k non-DC frequency indices per row of ``amp`` [..., t//2+1].

    Sorted by descending amplitude; ties resolve toward the lower frequency.
    """
    cand = amp[..., 1:].detach()
    scale = cand.abs().amax(dim=-1, keepdim=True).clamp_min(1e-30)
    key = torch.round(cand / scale * 10**_TIE_DECIMALS)
    order = torch.sort(key, dim=-1, descending=True, stable=True).indices
    return order[..., :k] + 1


def detect_periods(x1d, k: int) -> PeriodDecomposition:
    """Dominant periods of a [t, d] series from its channel-averaged spectrum."""
    x = torch.as_tensor(np.asarray(x1d, dtype=np.float64)) if not isinstance(x1d, torch.Tensor) else x1d
    if x.ndim == 1:
        x = x[:, None]
    t = x.shape[0]
    _check_k(t, k)
    n_freq = t // 2
    amp = amplitude_spectrum(x.detach().double())[: n_freq + 1]
    freqs = topk_frequencies(amp, k).numpy()
    periods = np.array([math.ceil(t / f) for f in freqs], dtype=np.int64)
    return PeriodDecomposition(freqs.astype(np.int64), periods, amp.numpy()[freqs])


def fold_2d(x: torch.Tensor, p: int) -> torch.Tensor:
    """Zero-pad the time axis to a multiple of ``p`` and fold it.

    [..., t, d] -> [..., p, ceil(t/p), d]; entry [r, c] holds time step c*p + r,
    so columns index the period and rows the phase within a period.
    """
    if p < 1:
        raise ValueError("period must be >= 1")
    t = x.shape[-2]
    cols = -(-t // p)
    pad = cols * p - t
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
    x = x.reshape(*x.shape[:-2], cols, p, x.shape[-1])
    return x.transpose(-3, -2)


def unfold_trunc(x2d: torch.Tensor, t: int) -> torch.Tensor:
    """Inverse of :func:`fold_2d`, truncated back to ``t`` steps."""
    x = x2d.transpose(-3, -2)
    x = x.reshape(*x.shape[:-3], -1, x.shape[-1])
    return x[..., :t, :]


class Inception(nn.Module):
    """Parallel same-padded 2-D convolutions, summed."""

    def __init__(self, channels: int, kernels=(1, 3, 5)):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=k // 2) for k in kernels
        )

    def forward(self, x):
        return sum(conv(x) for conv in self.convs)


class TimesBlock(nn.Module):
    def __init__(self, d_model: int, k: int, kernels=(1, 3, 5)):
        super().__init__()
        self.k = k
        self.inception = Inception(d_model, kernels)

    def branch(self, x: torch.Tensor, f: int) -> torch.Tensor:
        """Fold by the period of frequency ``f``, convolve, unfold: [n, t, d] -> [n, t, d]."""
        t = x.shape[1]
        p = math.ceil(t / f)
        x2d = fold_2d(x, p).permute(0, 3, 1, 2)  # [n, d, p, cols]
        y = F.gelu(self.inception(x2d)).permute(0, 2, 3, 1)
        return unfold_trunc(y, t)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        # x: [B, t, d]; each series picks its own top-k periods
        b, t, _ = x.shape
        _check_k(t, self.k)
        amp = amplitude_spectrum(x)
        freqs = topk_frequencies(amp, self.k)  # [B, k]
        weights = torch.softmax(torch.gather(amp, 1, freqs), dim=1)
        branches = x.new_zeros((b, self.k) + x.shape[1:])
        for f in torch.unique(freqs).tolist():
            rows, slots = torch.nonzero(freqs == f, as_tuple=True)
            branches = branches.index_put((rows, slots), self.branch(x[rows], f))
        out = (weights[:, :, None, None] * branches).sum(dim=1) + x
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in TimesBlock")
        return (out, weights) if return_weights else out


class TPatternNet(nn.Module):
    """Temporal encoder over the completed coarse history.

    The coarse cells inside each bottleneck subregion form the channels of one
    series, linearly embedded to d_model (plus a learned region embedding and
    the external features). Stacked TimesBlocks run on every region series, and
    each region's output is averaged over time and projected, giving a
    [B, d_model, I_down, J_down] map aligned with the backbone bottleneck.
    """

    def __init__(
        self,
        t: int,
        rows: int,
        cols: int,
        feature_dim: int,
        d_model: int,
        layers: int,
        k: int,
        down_rows: int,
        down_cols: int,
        kernels=(1, 3, 5),
    ):
        super().__init__()
        _check_k(t, k)
        if rows % down_rows or cols % down_cols:
            raise ValueError(
                f"grid {rows}x{cols} does not split into {down_rows}x{down_cols} subregions"
            )
        self.t, self.rows, self.cols = t, rows, cols
        self.down = (down_rows, down_cols)
        cells = (rows // down_rows) * (cols // down_cols)
        self.value = nn.Linear(cells, d_model)
        self.region = nn.Parameter(torch.randn(down_rows * down_cols, d_model) * 0.02)
        self.external = nn.Linear(feature_dim, d_model)
        self.blocks = nn.ModuleList(TimesBlock(d_model, k, kernels) for _ in range(layers))
        self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(layers))
        self.project = nn.Linear(d_model, d_model)

    def region_series(self, values):
        """[B, t, I, J] -> [B, regions, t, cells per region]."""
        b, t = values.shape[:2]
        dr, dc = self.down
        x = values.reshape(b, t, dr, self.rows // dr, dc, self.cols // dc)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, dr * dc, t, -1)

    def embed(self, values, feats):
        if values.shape[1:] != (self.t, self.rows, self.cols):
            raise ValueError(
                f"history shape {tuple(values.shape[1:])} != {(self.t, self.rows, self.cols)}"
            )
        x = self.value(self.region_series(values))
        x = x + self.region[None, :, None, :] + self.external(feats)[:, None, :, :]
        return x.reshape(-1, self.t, x.shape[-1])

    def forward(self, values, feats):
        b = values.shape[0]
        x = self.embed(values, feats)
        for block, norm in zip(self.blocks, self.norms):
            x = norm(block(x))
        dr, dc = self.down
        g = x.mean(dim=1).reshape(b, dr, dc, -1)
        return self.project(g).permute(0, 3, 1, 2)
