"""Nonconformity scores, split-conformal calibration, and prediction sets.

Three base scores over a probability row z with candidate label y:

* lac:   1 - z_y
* aps:   mass of classes ranked above y, plus U * z_y
* raps:  aps plus gamma_raps * max(0, rank(y) - k_reg)

Ranks order probabilities descending with ties broken by ascending class
index. U is a tie-randomization weight: fixed (u_value, default 1) for
deterministic behavior, or one uniform draw per sample shared across that
sample's candidate labels when randomized.

The failure-aware wrapper inflates scores on predicted-hard inputs and
discounts labels the attention deems plausible:

    S* = S_base * (1 + lambda * u) - eta * attention_y

Calibration takes the ceil((n+1)(1-alpha))-th smallest calibration score,
computed with exact rational arithmetic so boundary cases like n = 19,
alpha = 0.1 do not fall to float rounding. When that rank exceeds n the
threshold is "all labels" (serialized as an explicit sentinel, held as +inf
in memory). All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import validate_prob_vector

SCORE_KINDS = ("lac", "aps", "raps")


@dataclass(frozen=True)
class ScoreRule:
    """Base score selection plus its parameters."""

    kind: str = "lac"
    k_reg: int = 1
    gamma_raps: float = 1e-3
    randomize: bool = False
    u_value: float = 1.0

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"score kind must be one of {SCORE_KINDS}")
        if self.k_reg < 0:
            raise ValueError("k_reg must be nonnegative")
        if self.gamma_raps < 0:
            raise ValueError("gamma_raps must be nonnegative")
        if not 0.0 <= self.u_value <= 1.0:
            raise ValueError("u_value must lie in [0, 1]")


@dataclass(frozen=True)
class FailureAwareParams:
    """Weights of the failure-aware wrapper; (0, 0) is the identity."""

    lam: float = 0.5
    eta: float = 0.25

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be nonnegative")


@dataclass(frozen=True)
class ConformalThreshold:
    """Calibrated score threshold; s_hat = +inf means every label is included."""

    s_hat: float
    n_cal: int
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_cal < 1:
            raise ValueError("n_cal must be at least 1")
        if math.isnan(self.s_hat):
            raise ValueError("threshold cannot be NaN")

    @property
    def all_labels(self) -> bool:
        return math.isinf(self.s_hat) and self.s_hat > 0

    def to_json_dict(self) -> dict:
        if self.all_labels:
            return {"all_labels": True, "n_cal": self.n_cal, "alpha": self.alpha}
        return {"s_hat": self.s_hat, "n_cal": self.n_cal, "alpha": self.alpha}


@dataclass(frozen=True)
class PredictionSet:
    """Sorted, possibly empty set of candidate class indices."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        if any(m < 0 for m in members):
            raise ValueError("class indices must be nonnegative")
        if any(a >= b for a, b in zip(members, members[1:])):
            raise ValueError("members must be sorted ascending without duplicates")
        object.__setattr__(self, "members", members)

    def __contains__(self, label) -> bool:
        return int(label) in self.members

    def __len__(self) -> int:
        return len(self.members)


def _rank_order(z: np.ndarray) -> np.ndarray:
    """Descending-probability order; ties resolved by ascending class index."""
    return np.argsort(-z, kind="stable")


def score_lac(z, y: int) -> float:
    """1 - z_y."""
    z = validate_prob_vector(z)
    if not 0 <= y < z.shape[0]:
        raise ValueError("label out of range")
    return float(1.0 - z[y])


def score_aps(z, y: int, rule: ScoreRule, u: float | None = None) -> float:
    """Cumulative mass of classes ranked strictly above y, plus U * z_y."""
    z = validate_prob_vector(z)
    if not 0 <= y < z.shape[0]:
        raise ValueError("label out of range")
    uval = rule.u_value if u is None else float(u)
    order = _rank_order(z)
    pos = int(np.flatnonzero(order == y)[0])
    prefix = float(np.cumsum(z[order])[pos] - z[y])
    return prefix + uval * float(z[y])


def score_raps(z, y: int, rule: ScoreRule, u: float | None = None) -> float:
    """APS plus the rank penalty gamma_raps * max(0, rank(y) - k_reg)."""
    z = validate_prob_vector(z)
    if not 0 <= y < z.shape[0]:
        raise ValueError("label out of range")
    order = _rank_order(z)
    rank = int(np.flatnonzero(order == y)[0]) + 1  # ranks are 1-based
    penalty = rule.gamma_raps * max(0, rank - rule.k_reg)
    return score_aps(z, y, rule, u) + penalty


def base_score(z, y: int, rule: ScoreRule, u: float | None = None) -> float:
    if rule.kind == "lac":
        return score_lac(z, y)
    if rule.kind == "aps":
        return score_aps(z, y, rule, u)
    return score_raps(z, y, rule, u)


def base_score_matrix(Z, rule: ScoreRule, u=None) -> np.ndarray:
    """Base scores for every (row, candidate label) pair; shape (N, C).

    `u` supplies per-row randomization weights (shared across the row's
    labels); None uses the rule's fixed u_value.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError("Z must be (N, C)")
    n, c = Z.shape
    if rule.kind == "lac":
        return 1.0 - Z
    if u is None:
        uvec = np.full(n, rule.u_value)
    else:
        uvec = np.asarray(u, dtype=np.float64)
        if uvec.shape != (n,):
            raise ValueError("u must be a length-N vector")
    order = np.argsort(-Z, axis=1, kind="stable")
    sorted_z = np.take_along_axis(Z, order, axis=1)
    prefix_sorted = np.cumsum(sorted_z, axis=1) - sorted_z
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(c)[None, :].repeat(n, axis=0), axis=1)
    prefix = np.take_along_axis(prefix_sorted, ranks, axis=1)
    scores = prefix + uvec[:, None] * Z
    if rule.kind == "raps":
        scores = scores + rule.gamma_raps * np.maximum(ranks + 1 - rule.k_reg, 0)
    return scores


def score_failure_aware(base, u, attention_y, params: FailureAwareParams):
    """S* = base * (1 + lambda * u) - eta * attention_y (may be negative)."""
    return base * (1.0 + params.lam * np.asarray(u, dtype=np.float64)) \
        - params.eta * np.asarray(attention_y, dtype=np.float64)


def conformal_rank(n: int, alpha: float) -> int:
    """ceil((n+1)(1-alpha)) in exact rational arithmetic.

    Floats are read at their shortest decimal representation, so alpha = 0.1
    with n = 19 gives exactly 18 rather than the float artifact 19.
    """
    a = Fraction(str(float(alpha)))
    return math.ceil((n + 1) * (1 - a))


def calibrate(scores, alpha: float) -> ConformalThreshold:
    """Threshold = the conformal_rank(n, alpha)-th smallest calibration score.

    When the rank exceeds n the guarantee is vacuous and the threshold covers
    all labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("need at least one calibration score")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = scores.size
    rank = conformal_rank(n, alpha)
    if rank > n:
        return ConformalThreshold(float("inf"), n, alpha)
    s_hat = float(np.sort(scores)[rank - 1])
    return ConformalThreshold(s_hat, n, alpha)


def prediction_set_from_mask(mask) -> PredictionSet:
    return PredictionSet(tuple(int(i) for i in np.flatnonzero(mask)))


def predict_set(z, signals, rule: ScoreRule, params: FailureAwareParams,
                threshold: ConformalThreshold, u_rand: float | None = None) -> PredictionSet:
    """All labels whose failure-aware score is <= the threshold.

    Scores are always taken over the full label set. `u_rand` is this sample's
    shared randomization draw when the rule is randomized.
    """
    z = validate_prob_vector(z)
    u_row = None if u_rand is None else np.array([float(u_rand)])
    base = base_score_matrix(z[None, :], rule, u=u_row)[0]
    starred = score_failure_aware(base, signals.u, signals.attention, params)
    return prediction_set_from_mask(starred <= threshold.s_hat)
