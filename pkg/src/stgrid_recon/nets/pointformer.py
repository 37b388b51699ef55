"""Self-attention encoder over spatiotemporal points of the coarse history."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ff_width: int = 128

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


def token_index(t: int, rows: int, cols: int) -> np.ndarray:
    """(time, row, col) of every token, in token order (row-major over t, rows, cols)."""
    tt, rr, cc = np.meshgrid(np.arange(t), np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([tt.ravel(), rr.ravel(), cc.ravel()], axis=1)


class PointEmbedding(nn.Module):
    """Sum of value, learned position and external-feature embeddings per ST-point."""

    def __init__(self, t: int, rows: int, cols: int, feature_dim: int, d_model: int):
        super().__init__()
        self.t, self.rows, self.cols = t, rows, cols
        self.value = nn.Linear(2, d_model)
        self.position = nn.Parameter(torch.randn(t, rows, cols, d_model) * 0.02)
        self.external = nn.Linear(feature_dim, d_model)

    def parts(self, values, flags, feats):
        # values/flags: [B, t, I, J]; feats: [B, t, F]
        if values.shape[1:] != (self.t, self.rows, self.cols):
            raise ValueError(
                f"history shape {tuple(values.shape[1:])} != {(self.t, self.rows, self.cols)}"
            )
        if feats.shape[-1] != self.external.in_features:
            raise ValueError(
                f"feature width {feats.shape[-1]} != {self.external.in_features}"
            )
        b = values.shape[0]
        v = self.value(torch.stack([values, flags], dim=-1))
        p = self.position.expand(b, -1, -1, -1, -1)
        e = self.external(feats)[:, :, None, None, :].expand_as(v)
        return v, p, e

    def forward(self, values, flags, feats):
        v, p, e = self.parts(values, flags, feats)
        return (v + p + e).reshape(values.shape[0], -1, v.shape[-1])


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_k = d_model // heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_k).transpose(1, 2)

    def head_outputs(self, x, return_weights: bool = False):
        """Concatenated per-head outputs S_i V_i before the output projection."""
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        if return_weights:
            scores = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)
            out = scores @ v
        else:
            scores = None
            out = F.scaled_dot_product_attention(q, k, v)
        b, h, n, dk = out.shape
        out = out.transpose(1, 2).reshape(b, n, h * dk)
        return (out, scores) if return_weights else out

    def forward(self, x, return_weights: bool = False):
        if return_weights:
            out, scores = self.head_outputs(x, True)
            return self.w_o(out), scores
        return self.w_o(self.head_outputs(x))


class AttentionLayer(nn.Module):
    """Attention with residual + LayerNorm, then a two-layer ReLU feedforward with
    its own residual path."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.heads)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.ff_width)
        self.ff2 = nn.Linear(cfg.ff_width, cfg.d_model)

    def forward(self, x, return_weights: bool = False):
        if return_weights:
            a, scores = self.attn(x, True)
        else:
            a, scores = self.attn(x), None
        h = self.norm(a + x)
        out = h + F.relu(self.ff2(F.relu(self.ff1(h))))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in attention layer")
        return (out, scores) if return_weights else out


def subregion_mean(tokens, t: int, rows: int, cols: int, down_rows: int, down_cols: int):
    """Average the tokens of each bottleneck subregion over time and space.

    tokens: [B, t*rows*cols, d] -> [B, down_rows, down_cols, d]
    """
    if rows % down_rows or cols % down_cols:
        raise ValueError(
            f"grid {rows}x{cols} does not split into {down_rows}x{down_cols} subregions"
        )
    b, _, d = tokens.shape
    x = tokens.reshape(b, t, down_rows, rows // down_rows, down_cols, cols // down_cols, d)
    return x.mean(dim=(1, 3, 5))


class STPointFormer(nn.Module):
    """Embeds history ST-points, runs K attention layers and groups the final
    tokens per bottleneck subregion into a [B, d_model, I_down, J_down] map."""

    def __init__(
        self,
        t: int,
        rows: int,
        cols: int,
        feature_dim: int,
        cfg: AttentionConfig,
        down_rows: int,
        down_cols: int,
    ):
        super().__init__()
        if (rows * cols) % (down_rows * down_cols) or rows % down_rows or cols % down_cols:
            raise ValueError("indivisible subregion geometry")
        self.t, self.rows, self.cols = t, rows, cols
        self.down = (down_rows, down_cols)
        self.embed = PointEmbedding(t, rows, cols, feature_dim, cfg.d_model)
        self.layers = nn.ModuleList(AttentionLayer(cfg) for _ in range(cfg.layers))
        self.project = nn.Linear(cfg.d_model, cfg.d_model)

    def encode_tokens(self, values, flags, feats):
        x = self.embed(values, flags, feats)
        for layer in self.layers:
            x = layer(x)
        return x

    def aggregate(self, tokens):
        g = subregion_mean(tokens, self.t, self.rows, self.cols, *self.down)
        return self.project(g).permute(0, 3, 1, 2)

    def forward(self, values, flags, feats):
        return self.aggregate(self.encode_tokens(values, flags, feats))
