"""Encoder + heads wired together: forward pass, loss on a batch, and clip inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import heads
from . import numerics as nx
from .encoder import EncoderConfig, PyramidFeatures
from .heads import HeadConfig, TimestepTargets
from .numerics import Tensor
from .postprocess import NmsConfig, soft_nms
from .structures import Detection, Segment


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    delta: float = heads.DELTA_BASE
    clip_duration: float = 10.0


@dataclass
class Outputs:
    pyramid: PyramidFeatures
    logits: list[Tensor]
    offsets: list[Tensor]
    scales: list[Tensor]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x1417])
    params = enc.init_params(cfg.encoder, rng)
    params.update(heads.init_params(cfg.head, cfg.encoder.d_model, cfg.encoder.levels, rng))
    return params


def forward(params: dict[str, Tensor], x: Tensor, mask: np.ndarray | None, cfg: ModelConfig) -> Outputs:
    pyr = enc.encode(x, mask, cfg.encoder, params)
    return Outputs(pyr, heads.classify(pyr, params), heads.regress(pyr, params),
                   heads.level_scales(params, cfg.encoder.levels))


def clip_targets(annotations: list[list[Segment]], pyr: PyramidFeatures, cfg: ModelConfig) -> TimestepTargets:
    per_clip = []
    for b, segs in enumerate(annotations):
        masks = [m[b] if m.ndim > 1 else m for m in pyr.masks]
        per_clip.append(heads.assign_targets(segs, masks, pyr.strides, cfg.head, cfg.delta))
    return heads.stack_targets(per_clip)


def batch_loss(params: dict[str, Tensor], feats: np.ndarray, annotations: list[list[Segment]],
               cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Loss over a batch of equal-length clips ``feats[B, T, D]``."""
    x = Tensor(feats)
    out = forward(params, x, np.ones(feats.shape[:-1], dtype=bool), cfg)
    targets = clip_targets(annotations, out.pyramid, cfg)
    logits = nx.concat(out.logits, axis=-2)
    offsets = heads.scaled_offsets(out.offsets, out.scales)
    return heads.detection_loss(logits, offsets, targets, cfg.head)


def detect(params: dict[str, Tensor], feats: np.ndarray, clip_id: str, cfg: ModelConfig,
           nms: NmsConfig = NmsConfig()) -> list[Detection]:
    """Full inference path for one clip ``feats[T, D]``: decode then Soft-NMS."""
    with nx.no_grad():
        out = forward(params, Tensor(feats), None, cfg)
    dets = heads.decode_segments(
        [lg.data for lg in out.logits], [o.data for o in out.offsets], out.pyramid.masks,
        out.pyramid.strides, [float(s.data) for s in out.scales], clip_id=clip_id,
        delta=cfg.delta, duration=cfg.clip_duration, score_floor=nms.score_floor)
    return soft_nms(dets, nms)
