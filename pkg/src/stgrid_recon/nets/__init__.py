from .pointformer import (
    AttentionConfig,
    AttentionLayer,
    MultiHeadSelfAttention,
    PointEmbedding,
    STPointFormer,
    subregion_mean,
    token_index,
)
from .predictor import Condition, NetConfig, NoisePredictor
from .tpattern import (
    Inception,
    PeriodDecomposition,
    TimesBlock,
    TPatternNet,
    detect_periods,
    fold_2d,
    unfold_trunc,
)
from .unet import UNetBackbone, sinusoidal_embedding

__all__ = [
    "AttentionConfig",
    "AttentionLayer",
    "Condition",
    "Inception",
    "MultiHeadSelfAttention",
    "NetConfig",
    "NoisePredictor",
    "PeriodDecomposition",
    "PointEmbedding",
    "STPointFormer",
    "TPatternNet",
    "TimesBlock",
    "UNetBackbone",
    "detect_periods",
    "fold_2d",
    "sinusoidal_embedding",
    "subregion_mean",
    "token_index",
    "unfold_trunc",
]
