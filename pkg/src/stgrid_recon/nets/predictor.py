from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from ..grid import CALENDAR_DIM
from .pointformer import AttentionConfig, STPointFormer
from .tpattern import TPatternNet
from .unet import UNetBackbone


@dataclass
class Condition:
    """Batched conditioning inputs for one stage.

    ``observed`` is the masked current map (stage C) or the nearest-upsampled
    coarse completion (stage F); ``mask`` is only used by stage C.
    History tensors are coarse, [B, t, I, J]; ``external`` is [B, t, F].
    """

    observed: torch.Tensor
    history: torch.Tensor
    external: torch.Tensor
    mask: torch.Tensor | None = None
    history_mask: torch.Tensor | None = None

    def __len__(self):
        return self.observed.shape[0]

    def select(self, idx) -> "Condition":
        pick = lambda x: None if x is None else x[idx]
        return Condition(
            pick(self.observed), pick(self.history), pick(self.external),
            pick(self.mask), pick(self.history_mask),
        )

    def to(self, dtype) -> "Condition":
        cast = lambda x: None if x is None else x.to(dtype)
        return Condition(
            cast(self.observed), cast(self.history), cast(self.external),
            cast(self.mask), cast(self.history_mask),
        )


@dataclass(frozen=True)
class NetConfig:
    stage: str = "C"
    rows: int = 8
    cols: int = 8
    magnification: int = 2
    history: int = 8
    feature_dim: int = CALENDAR_DIM
    base_channels: int = 32
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    times_layers: int = 2
    top_k: int = 3
    kernels: tuple = (1, 3, 5)
    tau_dim: int = 64
    use_inter: bool = True

    def __post_init__(self):
        if self.stage not in ("C", "F"):
            raise ValueError(f"stage must be 'C' or 'F', got {self.stage!r}")
        h, w = self.out_shape
        if h % 4 or w % 4:
            raise ValueError(f"output grid {h}x{w} must be divisible by 4")
        dh, dw = self.bottleneck
        if self.rows % dh or self.cols % dw:
            raise ValueError(f"coarse grid {self.rows}x{self.cols} does not tile the {dh}x{dw} bottleneck")

    @property
    def out_shape(self) -> tuple[int, int]:
        n = 1 if self.stage == "C" else self.magnification
        return self.rows * n, self.cols * n

    @property
    def bottleneck(self) -> tuple[int, int]:
        h, w = self.out_shape
        return h // 4, w // 4

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def cond_channels(self) -> int:
        return 2 if self.stage == "C" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        d["kernels"] = tuple(d["kernels"])
        return cls(**d)

    def without_inter(self) -> "NetConfig":
        return replace(self, use_inter=False)


class NoisePredictor(nn.Module):
    """U-Net backbone fused with the stage's inter-map encoder
    (point attention for stage C, temporal patterns for stage F)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        dh, dw = cfg.bottleneck
        self.inter = None
        if cfg.use_inter:
            if cfg.stage == "C":
                self.inter = STPointFormer(
                    cfg.history, cfg.rows, cfg.cols, cfg.feature_dim, cfg.attention, dh, dw
                )
            else:
                self.inter = TPatternNet(
                    cfg.history, cfg.rows, cfg.cols, cfg.feature_dim, d,
                    cfg.times_layers, cfg.top_k, dh, dw, cfg.kernels,
                )
        self.backbone = UNetBackbone(
            1 + cfg.cond_channels, cfg.base_channels, d, d if cfg.use_inter else 0, cfg.tau_dim
        )

    def inter_features(self, cond: Condition):
        if self.inter is None:
            return None
        if self.cfg.stage == "C":
            return self.inter(cond.history, cond.history_mask, cond.external)
        return self.inter(cond.history, cond.external)

    def forward(self, s_tau: torch.Tensor, tau: torch.Tensor, cond: Condition) -> torch.Tensor:
        if self.cfg.stage == "C":
            maps = [s_tau, cond.observed, cond.mask]
        else:
            maps = [s_tau, cond.observed]
        x = torch.cat(maps, dim=1)
        return self.backbone(x, tau, self.inter_features(cond))
