"""Average precision at temporal-IoU thresholds with one-to-one greedy matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .structures import Detection, Segment

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def _ranked(preds: list[Detection]) -> list[Detection]:
    return sorted(preds, key=lambda d: (-d.score, d.start_s, d.end_s, d.clip_id))


def match_predictions(preds: list[Detection], gts: dict[str, list[Segment]], label: int,
                      tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Scores (descending) and TP flags for class ``label`` predictions at threshold ``tau``.

    Each prediction claims the unmatched same-clip ground truth it overlaps
    most, if that overlap reaches ``tau``.
    """
    ranked = _ranked([p for p in preds if p.label == label])
    gt_arrays = {}
    for clip_id, segs in gts.items():
        mine = [s for s in segs if s.label == label]
        if mine:
            gt_arrays[clip_id] = (np.array([s.start_s for s in mine]), np.array([s.end_s for s in mine]),
                                  np.zeros(len(mine), dtype=bool))
    tp = np.zeros(len(ranked), dtype=bool)
    for i, p in enumerate(ranked):
        if p.clip_id not in gt_arrays:
            continue
        starts, ends, used = gt_arrays[p.clip_id]
        inter = np.clip(np.minimum(p.end_s, ends) - np.maximum(p.start_s, starts), 0.0, None)
        iou = inter / ((p.end_s - p.start_s) + (ends - starts) - inter)
        iou[used] = -1.0
        j = int(np.argmax(iou))
        if iou[j] >= tau:
            used[j] = True
            tp[i] = True
    return np.array([p.score for p in ranked]), tp


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    if num_gt < 1:
        raise ValueError("average precision undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass
class EvalReport:
    thresholds: list[float]
    class_names: list[str]
    ap: np.ndarray                       # [C, K]; NaN for classes without ground truth
    num_gt: list[int]
    num_pred: list[int]
    map_per_threshold: list[float]
    mean_ap: float
    seizure_map_per_threshold: list[float] = field(default_factory=list)
    seizure_mean_ap: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "class_names": list(self.class_names),
            "ap": [[None if np.isnan(v) else float(v) for v in row] for row in self.ap],
            "num_gt": self.num_gt,
            "num_pred": self.num_pred,
            "map_per_threshold": self.map_per_threshold,
            "mAP": self.mean_ap,
            "seizure_map_per_threshold": self.seizure_map_per_threshold,
            "seizure_mAP": None if np.isnan(self.seizure_mean_ap) else self.seizure_mean_ap,
        }

    def table(self, title: str = "") -> str:
        name_w = max(12, *(len(n) for n in self.class_names))
        head = f"{'class':<{name_w}} {'#gt':>5} " + " ".join(f"{t:>6.2f}" for t in self.thresholds) + "    avg"
        lines = [title] if title else []
        lines += [head, "-" * len(head)]
        for c, name in enumerate(self.class_names):
            if self.num_gt[c] == 0:
                cells = " ".join(f"{'-':>6}" for _ in self.thresholds) + f" {'-':>6}"
            else:
                row = self.ap[c]
                cells = " ".join(f"{v * 100:6.2f}" for v in row) + f" {row.mean() * 100:6.2f}"
            lines.append(f"{name:<{name_w}} {self.num_gt[c]:>5} {cells}")
        lines.append("-" * len(head))
        cells = " ".join(f"{v * 100:6.2f}" for v in self.map_per_threshold)
        lines.append(f"{'mAP':<{name_w}} {sum(self.num_gt):>5} {cells} {self.mean_ap * 100:6.2f}")
        if self.seizure_map_per_threshold:
            cells = " ".join(f"{v * 100:6.2f}" for v in self.seizure_map_per_threshold)
            lines.append(f"{'mAP (seizure)':<{name_w}} {'':>5} {cells} {self.seizure_mean_ap * 100:6.2f}")
        return "\n".join(lines)


def _mean_over(ap: np.ndarray, classes: list[int]) -> list[float]:
    if not classes:
        return []
    return [float(v) for v in ap[classes].mean(axis=0)]


def evaluate(preds: list[Detection], gts: dict[str, list[Segment]], num_classes: int,
             thresholds=DEFAULT_THRESHOLDS, class_names: list[str] | None = None,
             background_label: int | None = 0) -> EvalReport:
    """Per-class AP at each threshold, averaged over classes with ground truth, then thresholds.

    ``background_label`` names the no-seizure class, left out of the secondary
    seizure-only average.
    """
    thresholds = [float(t) for t in thresholds]
    num_gt = [0] * num_classes
    for segs in gts.values():
        for s in segs:
            num_gt[s.label] += 1
    if sum(num_gt) == 0:
        raise ValueError("no ground truth to evaluate against")
    gts = {k: v for k, v in gts.items()}
    # predictions on clips outside the ground-truth set are ignored
    preds = [p for p in preds if p.clip_id in gts]
    num_pred = [0] * num_classes
    for p in preds:
        num_pred[p.label] += 1
    ap = np.full((num_classes, len(thresholds)), np.nan)
    for c in range(num_classes):
        if num_gt[c] == 0:
            continue
        for k, tau in enumerate(thresholds):
            _, tp = match_predictions(preds, gts, c, tau)
            ap[c, k] = average_precision(tp, num_gt[c])
    scored = [c for c in range(num_classes) if num_gt[c] > 0]
    per_tau = _mean_over(ap, scored)
    seizure = [c for c in scored if c != background_label]
    seizure_tau = _mean_over(ap, seizure)
    names = class_names or [str(c) for c in range(num_classes)]
    return EvalReport(thresholds, list(names), ap, num_gt, num_pred, per_tau, float(np.mean(per_tau)),
                      seizure_tau, float(np.mean(seizure_tau)) if seizure_tau else float("nan"))
