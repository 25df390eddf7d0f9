"""Temporal action localization with a pyramid transformer whose local attention keeps only
the most salient keys of each window, per head. Pure numpy, including autodiff."""

from .attention import AttentionConfig, sparse_local_attention
from .config import ConfigError, RunConfig
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, detect
from .postprocess import NmsConfig, soft_nms
from .structures import Detection, Segment

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ConfigError", "Detection", "EvalReport", "ModelConfig", "NmsConfig",
    "RunConfig", "Segment", "detect", "evaluate", "soft_nms", "sparse_local_attention",
]
