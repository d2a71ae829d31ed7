"""
Detection metrics: F1, point-adjusted F1 and the PA%K protocol.

PA%K fills a ground-truth anomaly segment with positive predictions when the
fraction of its points already detected is strictly greater than K. K = 0 is
classic point adjustment; K = 1 leaves predictions untouched (plain F1).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from .workspace import write_csv


logger = logging.getLogger(__name__)

K_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 1))

Segment = Tuple[int, int]


class Objective(Enum):
    """Quantity maximized by the threshold sweep."""
    F1_PA = "f1_pa"
    AUC = "auc"


@dataclass
class EvalResult:
    """F1 over the K grid and its trapezoidal AUC."""
    k_values: np.ndarray
    f1_values: np.ndarray
    auc: float
    threshold: Optional[float] = None

    @property
    def f1_pa(self) -> float:
        return float(self.f1_values[0])

    @property
    def f1(self) -> float:
        return float(self.f1_values[-1])

    def objective(self, objective: Objective) -> float:
        return self.f1_pa if Objective(objective) == Objective.F1_PA else self.auc

    def summary(self) -> Dict[str, float]:
        return {
            "f1": self.f1,
            "f1_pa": self.f1_pa,
            "auc": self.auc,
            "threshold": float("nan") if self.threshold is None else self.threshold,
        }

    def to_rows(self) -> List[List[float]]:
        return [[float(k), float(f)] for k, f in zip(self.k_values, self.f1_values)]


def _binary(values, name: str) -> np.ndarray:
    array = np.asarray(values).astype(np.int64)
    if array.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.isin(array, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return array


def find_segments(labels: Sequence[int]) -> List[Segment]:
    """Maximal runs of 1s as inclusive (start, end) index pairs."""
    labels = _binary(labels, "labels")
    padded = np.concatenate([[0], labels, [0]])
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1) - 1
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def pa_k_adjust(raw_preds: Sequence[int], segments: Sequence[Segment], k: float) -> np.ndarray:
    """
    Apply the PA%K adjustment.

    Within each segment, if detected / length > k the whole segment becomes 1.
    Predictions outside segments are unchanged and no 1 is ever cleared.
    """
    if not 0 <= k <= 1:
        raise ValueError(f"K must lie in [0, 1], got {k}")
    adjusted = _binary(raw_preds, "predictions").copy()
    for start, end in segments:
        if end >= len(adjusted) or start < 0:
            raise ValueError(f"segment ({start}, {end}) exceeds prediction length {len(adjusted)}")
        hits = adjusted[start:end + 1].sum()
        if hits / (end - start + 1) > k:
            adjusted[start:end + 1] = 1
    return adjusted


def precision_recall_f1(preds: Sequence[int], labels: Sequence[int]) -> Tuple[float, float, float]:
    """Point-wise precision, recall and F1 (0 when undefined)."""
    preds = _binary(preds, "predictions")
    labels = _binary(labels, "labels")
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def f1_pa_k_curve(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float,
    k_grid: Sequence[float] = K_GRID,
) -> EvalResult:
    """
    Threshold scores (score > threshold is positive), adjust per K, and integrate.

    Args:
        scores: Anomaly scores aligned with labels (evaluable steps only)
        labels: Ground-truth 0/1 labels
        threshold: Decision threshold
        k_grid: Increasing K values in [0, 1]

    Returns:
        EvalResult with the F1 curve and its trapezoidal AUC over K
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(labels, "labels")
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    raw = (scores > threshold).astype(np.int64)
    segments = find_segments(labels)
    k_values = np.asarray(k_grid, dtype=np.float64)
    f1_values = np.array(
        [precision_recall_f1(pa_k_adjust(raw, segments, k), labels)[2] for k in k_values]
    )
    if len(k_values) > 1:
        span = k_values[-1] - k_values[0]
        auc = float(trapezoid(f1_values, k_values) / span)
        # AUC stays within [min, max] of the curve.
        auc = min(max(auc, float(f1_values.min())), float(f1_values.max()))
    else:
        auc = float(f1_values[0])
    return EvalResult(k_values, f1_values, auc, float(threshold))


def quantile_grid(scores: Sequence[float], n: int = 100) -> np.ndarray:
    """n quantiles of the scores, the default sweep grid."""
    return np.unique(np.quantile(np.asarray(scores, dtype=np.float64), np.linspace(0, 1, n)))


def best_threshold_sweep(
    scores: Sequence[float],
    labels: Sequence[int],
    objective: Objective = Objective.F1_PA,
    grid: Optional[Sequence[float]] = None,
    k_grid: Sequence[float] = K_GRID,
) -> Tuple[float, EvalResult]:
    """
    Pick the threshold maximizing the objective; ties go to the larger threshold.

    Returns:
        (best threshold, its EvalResult)
    """
    objective = Objective(objective)
    grid = quantile_grid(scores) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("threshold grid is empty")

    best: Optional[Tuple[float, EvalResult]] = None
    for threshold in np.sort(grid):
        result = f1_pa_k_curve(scores, labels, float(threshold), k_grid)
        if best is None or result.objective(objective) >= best[1].objective(objective):
            best = (float(threshold), result)
    logger.debug(
        f"Best threshold {best[0]:.6g}: {objective.value}={best[1].objective(objective):.4f}"
    )
    return best


EVAL_COLUMNS = ["k", "f1"]


def write_eval_csv(path, result: EvalResult, header_comments=()):
    """Write the F1 curve over K; summary values go into the header."""
    summary = [f"{key}={value:.10g}" for key, value in result.summary().items()]
    write_csv(path, EVAL_COLUMNS, result.to_rows(), list(header_comments) + summary)
