"""Evaluation suite: task metrics, uncertainty-quality metrics, and
query-composition analysis.

Calibration follows the confidence-binning construction: predictions are
binned by the probability of their argmax class, and the calibration
error is the mean absolute gap between per-bin accuracy and per-bin mean
confidence (unweighted over non-empty bins; a count-weighted variant is
reported alongside). Sparsification removes the most-uncertain samples in
equal fraction steps and compares against the loss-ordered oracle curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsRecord:
    step: int
    labeled_count: int
    accuracy: float
    loc_mse: float
    calibration_error: float
    error_sum: float
    queried_class_counts: np.ndarray  # per-class counts queried at this step
    wall_time: float = 0.0  # informational only; never written to contract files


@dataclass
class CalibrationCurve:
    edges: np.ndarray  # (bins + 1,)
    mean_confidence: np.ndarray  # (bins,), nan for empty bins
    empirical_accuracy: np.ndarray  # (bins,), nan for empty bins
    counts: np.ndarray  # (bins,)


@dataclass
class ErrorCurve:
    fractions: np.ndarray  # retained fraction, 1.0 down to 0.0
    mean_loss: np.ndarray
    ordered_by: str  # "method" or "oracle"


def accuracy(pred_classes, true_classes) -> float:
    pred = np.asarray(pred_classes)
    true = np.asarray(true_classes)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("inputs must be equal-length and non-empty")
    return float(np.mean(pred == true))


def predicted_classes(mean_probs) -> np.ndarray:
    """Argmax per row; ties go to the lower class index."""
    return np.argmax(np.asarray(mean_probs), axis=1)


def loc_mse(pred_loc, true_loc, loc_mask) -> float:
    """Mean over masked-in samples and over the 4 components of squared error."""
    mask = np.asarray(loc_mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("no masked-in samples for localization MSE")
    diff = np.asarray(pred_loc)[mask] - np.asarray(true_loc)[mask]
    return float(np.mean(diff**2))


def calibration(mean_probs, true_classes, bins: int = 10, per_class: bool = False):
    """Returns (CalibrationCurve, error, count_weighted_error).

    Default collapses to argmax confidence vs correctness; per_class=True
    instead pools (p(y=c|x), 1[y==c]) pairs over every class c.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    probs = np.asarray(mean_probs, dtype=np.float64)
    true = np.asarray(true_classes)
    if per_class:
        n, c = probs.shape
        conf = probs.reshape(-1)
        correct = (true[:, None] == np.arange(c)[None, :]).reshape(-1).astype(np.float64)
    else:
        pred = predicted_classes(probs)
        conf = probs[np.arange(probs.shape[0]), pred]
        correct = (pred == true).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # right-closed last bin so confidence 1.0 lands in the top bin
    which = np.minimum((conf * bins).astype(np.int64), bins - 1)
    counts = np.bincount(which, minlength=bins)
    sum_conf = np.bincount(which, weights=conf, minlength=bins)
    sum_corr = np.bincount(which, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, sum_conf / np.maximum(counts, 1), np.nan)
        emp_acc = np.where(counts > 0, sum_corr / np.maximum(counts, 1), np.nan)
    nonempty = counts > 0
    dev = np.abs(emp_acc[nonempty] - mean_conf[nonempty])
    error = float(dev.mean())
    weighted = float((dev * counts[nonempty]).sum() / counts[nonempty].sum())
    return CalibrationCurve(edges, mean_conf, emp_acc, counts), error, weighted


def _retained_counts(n: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    fractions = 1.0 - np.arange(steps + 1) / steps
    kept = np.maximum(1, np.rint(fractions * n).astype(np.int64))
    return fractions, kept


def sparsification(losses, uncertainties, steps: int = 20):
    """Returns (method ErrorCurve, oracle ErrorCurve, error_sum).

    The method curve drops the highest-uncertainty samples first; the
    oracle curve drops the highest-loss samples on the same retained-
    fraction grid. Ties break toward the lower sample index in both
    orderings. error_sum is the mean absolute gap between the curves.
    """
    losses = np.asarray(losses, dtype=np.float64)
    unc = np.asarray(uncertainties, dtype=np.float64)
    if losses.shape != unc.shape or losses.ndim != 1:
        raise ValueError("losses and uncertainties must be equal-length vectors")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    n = losses.size
    fractions, kept = _retained_counts(n, steps)
    curves = {}
    for name, key in (("method", unc), ("oracle", losses)):
        # ascending by key, ties by lower index; prefix sums give retained means
        order = np.lexsort((np.arange(n), key))
        sorted_losses = losses[order]
        csum = np.concatenate([[0.0], np.cumsum(sorted_losses)])
        curves[name] = ErrorCurve(fractions, csum[kept] / kept, name)
    error_sum = float(np.mean(np.abs(curves["method"].mean_loss - curves["oracle"].mean_loss)))
    return curves["method"], curves["oracle"], error_sum


def class_distribution_delta(al_step_counts, baseline_step_counts, pool_class_counts) -> np.ndarray:
    """Per-step, per-class cumulative query delta, normalized by pool counts.

    Inputs are (steps, classes) matrices of per-step queried class counts
    and the class counts of the unlabeled pool at loop start.
    """
    al = np.asarray(al_step_counts, dtype=np.float64)
    base = np.asarray(baseline_step_counts, dtype=np.float64)
    pool = np.asarray(pool_class_counts, dtype=np.float64)
    if al.shape != base.shape:
        raise ValueError(f"step-count shapes differ: {al.shape} vs {base.shape}")
    if (pool <= 0).any():
        raise ValueError("pool class counts must be positive")
    return (np.cumsum(al, axis=0) - np.cumsum(base, axis=0)) / pool[None, :]


def labels_to_reach(labeled_counts, metric_values, reference: float, threshold: float,
                    kind: str):
    """Smallest labeled count whose metric first meets the relative-error
    threshold against the full-pool reference; None if never reached.

    kind "accuracy": |acc_full - acc| <= threshold.
    kind "mse": |mse - mse_full| / mse_full <= threshold.
    """
    labeled = np.asarray(labeled_counts)
    vals = np.asarray(metric_values, dtype=np.float64)
    if kind == "accuracy":
        rel = np.abs(reference - vals)
    elif kind == "mse":
        if reference <= 0:
            raise ValueError("mse reference must be positive")
        rel = np.abs(vals - reference) / reference
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    hit = np.nonzero(rel <= threshold)[0]
    if hit.size == 0:
        return None
    return int(labeled[hit[0]])


def labeling_savings(labels_al, labels_baseline) -> float | None:
    """Fraction of labeling effort saved vs the baseline; None if either
    side never reached the threshold."""
    if labels_al is None or labels_baseline is None:
        return None
    return 1.0 - labels_al / labels_baseline
