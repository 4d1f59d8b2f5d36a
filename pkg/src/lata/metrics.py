"""Evaluation metrics: coverage, set size, class-balance, balanced accuracy.

Coverage and mean size are reported raw; the class-conditioned coverage gap
(ccv) and balanced class accuracy (aca) are reported x100 to match the usual
table scale. Classes with no test examples are excluded from the per-class
averages (their per-class terms are undefined); reports carry the excluded
count. All metrics are order-invariant over the records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conformal import PredictionSet


@dataclass(frozen=True)
class EvaluationRecord:
    """One test item's truth, prediction set, and argmax point prediction."""

    true_label: int
    prediction_set: PredictionSet
    point_prediction: int

    def __post_init__(self):
        if self.true_label < 0 or self.point_prediction < 0:
            raise ValueError("labels must be nonnegative class indices")


@dataclass(frozen=True)
class ConformalReport:
    """Per-run metric bundle.

    wall_time_s is measured wall-clock and peak_mem_estimate is a
    deterministic estimate of the largest transient array footprint (bytes),
    not an OS measurement; both are documented as approximate.
    """

    coverage: float
    mean_size: float
    ccv: float
    aca: float
    n_test: int
    alpha: float
    wall_time_s: float
    peak_mem_estimate: int
    n_excluded_classes: int = 0

    def metrics_dict(self) -> dict:
        """Deterministic fields only (timing excluded)."""
        return {
            "coverage": self.coverage,
            "mean_size": self.mean_size,
            "ccv": self.ccv,
            "aca": self.aca,
            "n_test": self.n_test,
            "alpha": self.alpha,
            "peak_mem_estimate": self.peak_mem_estimate,
            "n_excluded_classes": self.n_excluded_classes,
        }


def _check_nonempty(records):
    records = list(records)
    if not records:
        raise ValueError("need at least one evaluation record")
    return records


def coverage(records) -> float:
    """Fraction of records whose set contains the true label."""
    records = _check_nonempty(records)
    hits = sum(1 for r in records if r.true_label in r.prediction_set)
    return hits / len(records)


def mean_size(records) -> float:
    """Average number of labels per prediction set."""
    records = _check_nonempty(records)
    return sum(len(r.prediction_set) for r in records) / len(records)


def _classes_present(records) -> list[int]:
    return sorted({r.true_label for r in records})


def ccv(records, alpha: float) -> float:
    """Mean absolute per-class deviation from target coverage, x100.

    Only classes present among the records enter the average.
    """
    records = _check_nonempty(records)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    target = 1.0 - alpha
    gaps = []
    for c in _classes_present(records):
        cls = [r for r in records if r.true_label == c]
        cov_c = sum(1 for r in cls if r.true_label in r.prediction_set) / len(cls)
        gaps.append(abs(cov_c - target))
    return 100.0 * float(np.mean(gaps))


def aca(records) -> float:
    """Macro-averaged per-class top-1 accuracy of the point predictions, x100."""
    records = _check_nonempty(records)
    accs = []
    for c in _classes_present(records):
        cls = [r for r in records if r.true_label == c]
        accs.append(sum(1 for r in cls if r.point_prediction == c) / len(cls))
    return 100.0 * float(np.mean(accs))


def build_report(records, alpha: float, n_classes: int,
                 wall_time_s: float = 0.0, peak_mem_estimate: int = 0) -> ConformalReport:
    records = _check_nonempty(records)
    present = _classes_present(records)
    if present and (present[0] < 0 or present[-1] >= n_classes):
        raise ValueError("record label outside the class range")
    return ConformalReport(
        coverage=coverage(records),
        mean_size=mean_size(records),
        ccv=ccv(records, alpha),
        aca=aca(records),
        n_test=len(records),
        alpha=alpha,
        wall_time_s=wall_time_s,
        peak_mem_estimate=int(peak_mem_estimate),
        n_excluded_classes=n_classes - len(present),
    )
