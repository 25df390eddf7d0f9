"""Anchor-free classification / boundary heads, decoding, target assignment and loss.

Every position of every pyramid level is a candidate.  Classification is
multi-label (independent sigmoids).  Regression predicts non-negative
left/right distances in level-local units, i.e. base timesteps divided by
the level stride, which a per-level positive scale turns into time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import PyramidFeatures
from .numerics import Tensor
from .structures import Detection, Segment

DELTA_BASE = 4.0 / 30.0  # seconds per feature row: stride-4 chunks at 30 fps

DEFAULT_RANGES = ((0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, 64.0), (64.0, math.inf))


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 14
    head_conv_layers: int = 2
    regression_ranges: tuple = DEFAULT_RANGES
    prior_prob: float = 0.01
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0

    def __post_init__(self):
        ranges = [tuple(float(v) for v in r) for r in self.regression_ranges]
        object.__setattr__(self, "regression_ranges", tuple(ranges))
        if ranges[0][0] != 0.0 or ranges[-1][1] != math.inf:
            raise ValueError("regression ranges must start at 0 and end at infinity")
        for (lo, hi), (lo2, _) in zip(ranges, ranges[1:]):
            if hi != lo2:
                raise ValueError(f"regression ranges not contiguous: {ranges}")
        for lo, hi in ranges:
            if not lo < hi:
                raise ValueError(f"empty regression range [{lo}, {hi})")


def _ranges_for(cfg: HeadConfig, levels: int) -> list[tuple[float, float]]:
    if len(cfg.regression_ranges) < levels:
        raise ValueError(f"{len(cfg.regression_ranges)} regression ranges for {levels} levels")
    ranges = list(cfg.regression_ranges[:levels])
    # the top level absorbs everything longer
    ranges[-1] = (ranges[-1][0], math.inf)
    return ranges


def init_params(cfg: HeadConfig, d_model: int, levels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    raw = {}
    for head, n_out in (("cls", cfg.num_classes), ("reg", 2)):
        for i in range(cfg.head_conv_layers):
            raw[f"{head}.conv{i}.weight"] = rng.normal(0, 1 / math.sqrt(3 * d_model), (3, d_model, d_model))
            raw[f"{head}.conv{i}.bias"] = np.zeros(d_model)
        raw[f"{head}.out.weight"] = rng.normal(0, 0.01, (1, d_model, n_out))
        raw[f"{head}.out.bias"] = np.zeros(n_out)
    raw["cls.out.bias"][:] = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
    for level in range(levels):
        raw[f"scale.{level}"] = np.zeros(())
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def _trunk(x: Tensor, mask: np.ndarray, params: dict[str, Tensor], head: str) -> Tensor:
    i = 0
    while f"{head}.conv{i}.weight" in params:
        x = nx.conv1d(x, params[f"{head}.conv{i}.weight"], params[f"{head}.conv{i}.bias"])
        x = nx.mask_rows(nx.gelu(x), mask)
        i += 1
    return nx.conv1d(x, params[f"{head}.out.weight"], params[f"{head}.out.bias"])


def classify(pyr: PyramidFeatures, params: dict[str, Tensor]) -> list[Tensor]:
    """Per-level class logits ``[..., T_l, C]``; shared weights across levels."""
    return [_trunk(f, m, params, "cls") for f, m in zip(pyr.features, pyr.masks)]


def regress(pyr: PyramidFeatures, params: dict[str, Tensor]) -> list[Tensor]:
    """Per-level non-negative (left, right) offsets ``[..., T_l, 2]``, before scaling."""
    return [nx.softplus(_trunk(f, m, params, "reg")) for f, m in zip(pyr.features, pyr.masks)]


def level_scales(params: dict[str, Tensor], levels: int) -> list[Tensor]:
    """Positive per-level scale factors (exponential parameterisation)."""
    return [nx.exp(params[f"scale.{level}"]) for level in range(levels)]


# ---------------------------------------------------------------- decoding


def decode_segments(logits: list[np.ndarray], offsets: list[np.ndarray], masks: list[np.ndarray],
                    strides: list[int], scales: list[float], clip_id: str = "",
                    delta: float = DELTA_BASE, duration: float = 10.0,
                    score_floor: float = 0.0) -> list[Detection]:
    """Turn one clip's head outputs into detections.

    One candidate per (valid position, class); zero-length results are dropped.
    Arrays are per level: logits ``[T_l, C]``, offsets ``[T_l, 2]``, masks ``[T_l]``.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    out = []
    for lg, off, m, s, sc in zip(logits, offsets, masks, strides, scales):
        pos = np.flatnonzero(m)
        if pos.size == 0:
            continue
        unit = s * delta
        centre = (pos + 0.5) * unit
        start = np.maximum(centre - sc * off[pos, 0] * unit, 0.0)
        end = np.minimum(centre + sc * off[pos, 1] * unit, duration)
        scores = nx._sigmoid(np.asarray(lg[pos], dtype=np.float64))
        keep = (end > start)[:, None] & (scores >= score_floor) & (scores > 0)
        for j, c in zip(*np.nonzero(keep)):
            out.append(Detection(clip_id, int(c), float(start[j]), float(end[j]), float(scores[j, c])))
    return out


# ---------------------------------------------------------------- target assignment


@dataclass
class TimestepTargets:
    """Targets for every candidate of one clip, levels concatenated in order."""

    cls: np.ndarray          # [P, C] in {0, 1}
    offsets: np.ndarray      # [P, 2] level-local units, zero where not positive
    positive: np.ndarray     # [P] bool: positive for at least one class
    valid: np.ndarray        # [P] bool
    assigned: np.ndarray     # [P] index of the segment providing the offsets, -1 if none
    level_sizes: list[int] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def candidate_geometry(masks: list[np.ndarray], strides: list[int]):
    """Centres (in base timesteps), strides and validity of all candidates, levels concatenated."""
    centres, strides_out, valid = [], [], []
    for m, s in zip(masks, strides):
        n = len(m)
        centres.append((np.arange(n) + 0.5) * s)
        strides_out.append(np.full(n, s, dtype=float))
        valid.append(np.asarray(m, dtype=bool))
    return np.concatenate(centres), np.concatenate(strides_out), np.concatenate(valid)


def assign_targets(gt: list[Segment], masks: list[np.ndarray], strides: list[int], cfg: HeadConfig,
                   delta: float = DELTA_BASE) -> TimestepTargets:
    centres, st, valid = candidate_geometry(masks, strides)
    P, C = centres.size, cfg.num_classes
    ranges = _ranges_for(cfg, len(strides))
    lo = np.concatenate([np.full(len(m), r[0]) for m, r in zip(masks, ranges)])
    hi = np.concatenate([np.full(len(m), r[1]) for m, r in zip(masks, ranges)])

    cls = np.zeros((P, C))
    offsets = np.zeros((P, 2))
    assigned = np.full(P, -1)
    best = np.full(P, np.inf)
    for g, seg in enumerate(gt):
        if not 0 <= seg.label < C:
            raise ValueError(f"label {seg.label} outside [0, {C})")
        left = centres - seg.start_s / delta
        right = seg.end_s / delta - centres
        reach = np.maximum(left, right)
        hit = valid & (left > 0) & (right > 0) & (reach >= lo) & (reach < hi)
        cls[hit, seg.label] = 1.0
        # shortest matching segment provides the regression target
        take = hit & (seg.duration < best)
        best[take] = seg.duration
        assigned[take] = g
        offsets[take, 0] = left[take] / st[take]
        offsets[take, 1] = right[take] / st[take]
    return TimestepTargets(cls, offsets, assigned >= 0, valid, assigned, [len(m) for m in masks])


def stack_targets(targets: list[TimestepTargets]) -> TimestepTargets:
    return TimestepTargets(
        np.stack([t.cls for t in targets]), np.stack([t.offsets for t in targets]),
        np.stack([t.positive for t in targets]), np.stack([t.valid for t in targets]),
        np.stack([t.assigned for t in targets]), targets[0].level_sizes)


# ---------------------------------------------------------------- loss


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, weight: np.ndarray,
                       alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed focal loss; ``weight`` broadcasts over classes ([..., P, 1] or full shape)."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    p = nx.sigmoid(logits)
    one_minus_pt = p * (1.0 - 2.0 * y) + y
    ce = nx.softplus(logits) - logits * y
    alpha_t = (alpha * y + (1 - alpha) * (1 - y)) * np.broadcast_to(weight, y.shape)
    return nx.sum(nx.power(one_minus_pt, gamma) * ce * alpha_t.astype(y.dtype))


def iou_loss_1d(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """Summed ``weight * (1 - IoU)`` of intervals given as (left, right) around a shared centre."""
    target = np.where(weight[..., None] > 0, target, 1.0).astype(pred.data.dtype)
    inter = nx.sum(nx.minimum(pred, Tensor(target, dtype=target.dtype)), axis=-1)
    union = nx.sum(pred, axis=-1) + target.sum(axis=-1) - inter
    iou = inter / union
    return nx.sum((1.0 - iou) * weight.astype(pred.data.dtype))


def scaled_offsets(offsets: list[Tensor], scales: list[Tensor]) -> Tensor:
    return nx.concat([o * s for o, s in zip(offsets, scales)], axis=-2)


def detection_loss(logits: Tensor, offsets: Tensor, targets: TimestepTargets,
                   cfg: HeadConfig = HeadConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(total, classification, regression) for concatenated candidates.

    ``logits`` is ``[..., P, C]``; ``offsets`` is ``[..., P, 2]`` already scaled.
    Both terms are normalised by max(1, number of positive candidates).
    """
    norm = max(1, targets.num_positive)
    valid_w = targets.valid[..., None].astype(float)
    cls = sigmoid_focal_loss(logits, targets.cls, valid_w, cfg.focal_alpha, cfg.focal_gamma) * (1.0 / norm)
    if targets.num_positive:
        reg = iou_loss_1d(offsets, targets.offsets, targets.positive.astype(float)) * (1.0 / norm)
    else:
        reg = Tensor(0.0, dtype=logits.data.dtype)
    return cls + reg * cfg.reg_weight, cls, reg
