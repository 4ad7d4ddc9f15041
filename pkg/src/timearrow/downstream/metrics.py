"""Instance extraction and scoring: connected components, IoU matching, F1, AP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import average_precision_score

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: np.ndarray, connectivity: int | None = None) -> np.ndarray:
    """Label a binary mask; ids are contiguous from 1, background is 0.

    2D masks default to 8-connectivity, 2D+time (3D) masks to 6-connectivity.
    """
    mask = np.asarray(mask)
    if mask.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 2D+time mask, got shape {mask.shape}")
    if connectivity is None:
        connectivity = 8 if mask.ndim == 2 else 6
    if connectivity not in _STRUCTURES or _STRUCTURES[connectivity].ndim != mask.ndim:
        raise ValueError(f"connectivity {connectivity} is not valid for a {mask.ndim}D mask")
    labels, _ = ndimage.label(mask.astype(bool), structure=_STRUCTURES[connectivity])
    return labels.astype(np.int32)


def remove_small_objects(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Drop instances with fewer than ``min_size`` pixels and relabel contiguously."""
    labels = np.asarray(labels)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    remap = np.zeros(len(sizes), dtype=np.int32)
    remap[keep] = np.arange(1, keep.sum() + 1)
    return remap[labels]


def instances_from_probability(prob: np.ndarray, threshold: float = 0.5, min_size: int = 0,
                               connectivity: int | None = None) -> np.ndarray:
    labels = connected_components(np.asarray(prob) > threshold, connectivity)
    return remove_small_objects(labels, min_size) if min_size > 0 else labels


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """``(n_pred, n_gt)`` IoU between all instance pairs of two label images."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    n_p, n_g = int(pred.max(initial=0)), int(gt.max(initial=0))
    inter = np.bincount(pred.ravel() * (n_g + 1) + gt.ravel(),
                        minlength=(n_p + 1) * (n_g + 1)).reshape(n_p + 1, n_g + 1)
    area_p = inter.sum(1, keepdims=True)
    area_g = inter.sum(0, keepdims=True)
    union = area_p + area_g - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou[1:, 1:]


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred id, gt id, iou)
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)
    n_pred: int = 0
    n_gt: int = 0

    @property
    def n_matched(self) -> int:
        return len(self.pairs)

    @property
    def precision(self) -> float:
        if self.n_pred == 0:
            return 1.0 if self.n_gt == 0 else 0.0
        return self.n_matched / self.n_pred

    @property
    def recall(self) -> float:
        if self.n_gt == 0:
            return 1.0 if self.n_pred == 0 else 0.0
        return self.n_matched / self.n_gt

    @property
    def f1(self) -> float:
        if self.n_pred + self.n_gt == 0:
            return 1.0
        return 2 * self.n_matched / (self.n_pred + self.n_gt)

    @property
    def total_iou(self) -> float:
        return float(sum(p[2] for p in self.pairs))


def match_and_score(pred: np.ndarray, gt: np.ndarray, iou_threshold: float = 0.5) -> MatchResult:
    """One-to-one matching that maximizes total IoU over pairs with IoU >= threshold."""
    iou = iou_matrix(pred, gt)
    n_p, n_g = iou.shape
    res = MatchResult(n_pred=n_p, n_gt=n_g)
    if n_p and n_g:
        eligible = iou >= iou_threshold
        weights = np.where(eligible, iou, 0.0)
        rows, cols = linear_sum_assignment(weights, maximize=True)
        for r, c in zip(rows, cols):
            if eligible[r, c]:
                res.pairs.append((int(r) + 1, int(c) + 1, float(iou[r, c])))
    matched_p = {p for p, _, _ in res.pairs}
    matched_g = {g for _, g, _ in res.pairs}
    res.unmatched_pred = [i for i in range(1, n_p + 1) if i not in matched_p]
    res.unmatched_gt = [i for i in range(1, n_g + 1) if i not in matched_g]
    return res


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve, summing ``(R_k - R_{k-1}) P_k`` over distinct scores."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not labels.any():
        raise ValueError("average precision needs at least one positive label")
    return float(average_precision_score(labels, scores))
