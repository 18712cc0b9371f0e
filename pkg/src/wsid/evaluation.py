"""Class-agnostic instance mask evaluation: IoU, greedy matching, AP."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np


@dataclass
class Detection:
    mask: np.ndarray
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("Detection mask is empty")
        if not np.isfinite(self.score):
            raise ValueError(f"Detection score must be finite, got {self.score}")


@dataclass
class EvalResult:
    ap_per_threshold: dict[float, float]
    pr_curves: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        return float(np.mean(list(self.ap_per_threshold.values())))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: mask shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_matrix(masks_a: Sequence[np.ndarray], masks_b: Sequence[np.ndarray]) -> np.ndarray:
    if not len(masks_a) or not len(masks_b):
        return np.zeros((len(masks_a), len(masks_b)))
    A = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks_a]).astype(np.int64)
    B = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks_b]).astype(np.int64)
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


def average_precision(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """All-points interpolated AP from a score-ordered TP/FP sequence.

    Every recall step has height 1/n_gt, so AP is the envelope precision
    summed over the TP ranks. The sum is taken in exact rationals so the
    result is the correctly rounded value, independent of summation order.
    """
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    precision = ctp / ranks
    # precision envelope, swept from the last rank backwards
    best = Fraction(0)
    total = Fraction(0)
    hits = ctp.astype(np.int64)
    for k in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(hits[k]), int(ranks[k])))
        if tp[k]:
            total += best
    return float(total / n_gt), recall, precision


def match_detections(dets_by_image: Mapping, gts_by_image: Mapping, tau: float) -> tuple[np.ndarray, int]:
    """Greedy matching in global score order -> (TP flags in that order, #GT)."""
    if set(dets_by_image) != set(gts_by_image):
        extra = sorted(map(str, set(dets_by_image) ^ set(gts_by_image)))
        raise KeyError(f"image ids differ between detections and ground truth: {', '.join(extra[:5])}")
    entries = []
    ious = {}
    for key in sorted(dets_by_image, key=str):
        dets, gts = dets_by_image[key], gts_by_image[key]
        ious[key] = iou_matrix([d.mask for d in dets], gts)
        entries += [(-float(d.score), str(key), i, key) for i, d in enumerate(dets)]
    entries.sort(key=lambda e: e[:3])
    used = {k: np.zeros(len(gts_by_image[k]), dtype=bool) for k in gts_by_image}
    tp = np.zeros(len(entries))
    for n, (_, _, i, key) in enumerate(entries):
        row = ious[key][i] if ious[key].size else np.zeros(0)
        cand = np.where(used[key], -1.0, row)
        if cand.size and cand.max() >= tau:
            j = int(np.argmax(cand))
            used[key][j] = True
            tp[n] = 1.0
    return tp, sum(len(g) for g in gts_by_image.values())


def evaluate(dets_by_image: Mapping, gts_by_image: Mapping, thresholds: Sequence[float] = (0.5, 0.7)) -> EvalResult:
    """AP at each IoU threshold; detections ranked across the whole dataset.

    Ties in score are broken by image id then detection index, so the
    result is deterministic.
    """
    aps, curves = {}, {}
    for t in thresholds:
        if not 0 < t <= 1:
            raise ValueError(f"IoU threshold must be in (0, 1], got {t}")
        tp, n_gt = match_detections(dets_by_image, gts_by_image, t)
        ap, rec, prec = average_precision(tp, n_gt)
        aps[float(t)] = ap
        curves[float(t)] = (rec, prec)
    return EvalResult(aps, curves)


def labels_to_masks(labels: np.ndarray) -> list[np.ndarray]:
    lab = np.asarray(labels)
    return [lab == k for k in np.unique(lab) if k != 0]


def count_accuracy(pred_counts: Sequence[int], true_counts: Sequence[int]) -> float:
    p, t = np.asarray(pred_counts), np.asarray(true_counts)
    return float(np.mean(p == t)) if len(t) else 0.0
