"""Two-level U-Net noise backbone with a fused inter-map feature at the bottleneck."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = tau.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, tau_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.tau = nn.Linear(tau_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.tau(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class UNetBackbone(nn.Module):
    """Encoder (full -> /2 -> /4 resolution) producing S_intra with ``d_model``
    channels, a 1x1 fusion with S_inter, and a decoder with skip connections.

    With ``inter_channels=0`` the fusion only sees S_intra.
    """

    def __init__(self, in_channels: int, base: int, d_model: int, inter_channels: int, tau_dim: int):
        super().__init__()
        self.tau_dim = tau_dim
        self.tau_mlp = nn.Sequential(
            nn.Linear(tau_dim, tau_dim), nn.SiLU(), nn.Linear(tau_dim, tau_dim)
        )
        self.enc0 = ConvBlock(in_channels, base, tau_dim)
        self.enc1 = ConvBlock(base, 2 * base, tau_dim)
        self.enc2 = ConvBlock(2 * base, d_model, tau_dim)
        self.fuse = nn.Conv2d(d_model + inter_channels, d_model, 1)
        self.mid = ConvBlock(d_model, d_model, tau_dim)
        self.dec1 = ConvBlock(d_model + 2 * base, 2 * base, tau_dim)
        self.dec0 = ConvBlock(2 * base + base, base, tau_dim)
        self.out = nn.Conv2d(base, 1, 1)

    def tau_embedding(self, tau, dtype):
        return self.tau_mlp(sinusoidal_embedding(tau, self.tau_dim).to(dtype))

    def encode(self, x, temb):
        h0 = self.enc0(x, temb)
        h1 = self.enc1(F.avg_pool2d(h0, 2), temb)
        s_intra = self.enc2(F.avg_pool2d(h1, 2), temb)
        return h0, h1, s_intra

    def decode(self, fused, h0, h1, temb):
        h = self.mid(fused, temb)
        h = self.dec1(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), h1], 1), temb)
        h = self.dec0(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), h0], 1), temb)
        return self.out(h)

    def forward(self, x, tau, s_inter=None):
        temb = self.tau_embedding(tau, x.dtype)
        h0, h1, s_intra = self.encode(x, temb)
        if s_inter is not None:
            if s_inter.shape[0] != s_intra.shape[0] or s_inter.shape[2:] != s_intra.shape[2:]:
                raise ValueError(
                    f"S_inter {tuple(s_inter.shape)} does not match bottleneck {tuple(s_intra.shape)}"
                )
            fused = self.fuse(torch.cat([s_intra, s_inter], dim=1))
        else:
            if self.fuse.in_channels != s_intra.shape[1]:
                raise ValueError("backbone expects an inter-map feature")
            fused = self.fuse(s_intra)
        return self.decode(fused, h0, h1, temb)
