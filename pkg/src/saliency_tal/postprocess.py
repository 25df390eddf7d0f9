"""Score filtering and per-class Soft-NMS for one clip's detections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .structures import Detection


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.1
    sigma: float = 0.5
    max_segments: int = 200
    score_floor: float = 0.001
    method: str = "gaussian"

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.max_segments < 1:
            raise ValueError(f"max_segments must be >= 1, got {self.max_segments}")
        if self.score_floor < 0:
            raise ValueError(f"score_floor must be >= 0, got {self.score_floor}")
        if self.method not in ("gaussian", "hard"):
            raise ValueError(f"unknown decay method {self.method!r}")


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    if not (a[1] > a[0] and b[1] > b[0]):
        raise ValueError(f"degenerate interval in tIoU: {a}, {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _iou_one_to_many(s: float, e: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(e, ends) - np.maximum(s, starts), 0.0, None)
    return inter / ((e - s) + (ends - starts) - inter)


def sort_key(d: Detection):
    return (-d.score, d.start_s, d.end_s, d.label)


def _suppress_class(dets: list[Detection], cfg: NmsConfig) -> list[Detection]:
    starts = np.array([d.start_s for d in dets])
    ends = np.array([d.end_s for d in dets])
    scores = np.array([d.score for d in dets])
    alive = scores >= cfg.score_floor
    kept = []
    while alive.any():
        idx = np.flatnonzero(alive)
        # max score; ties to the earlier (start, end)
        best = idx[np.lexsort((ends[idx], starts[idx], -scores[idx]))[0]]
        alive[best] = False
        kept.append(Detection(dets[best].clip_id, dets[best].label, dets[best].start_s,
                              dets[best].end_s, float(scores[best])))
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        u = _iou_one_to_many(starts[best], ends[best], starts[rest], ends[rest])
        hit = u > cfg.iou_threshold
        if cfg.method == "gaussian":
            decay = np.exp(-(u ** 2) / cfg.sigma)
        else:
            decay = 1.0 - u
        scores[rest] = np.where(hit, scores[rest] * decay, scores[rest])
        alive[rest] = scores[rest] >= cfg.score_floor
    return kept


def soft_nms(dets: list[Detection], cfg: NmsConfig = NmsConfig()) -> list[Detection]:
    """Per-class Soft-NMS followed by a global cap of ``max_segments``.

    Output is sorted by score descending, ties by (start, end, label).
    """
    if not dets:
        return []
    clip_ids = {d.clip_id for d in dets}
    if len(clip_ids) > 1:
        raise ValueError(f"soft_nms expects one clip, got {sorted(clip_ids)}")
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.label, []).append(d)
    out = []
    for label in sorted(by_class):
        out.extend(_suppress_class(by_class[label], cfg))
    out.sort(key=sort_key)
    return out[:cfg.max_segments]

