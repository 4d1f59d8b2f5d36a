"""Label-free transductive refinement over the affinity graph.

Starting from the pool's zero-shot probability rows Q, the refinement runs a
fixed number of synchronous multiplicative updates

    z[i, c]  <-  q[i, c] * exp(gamma * sum_j W_ij z[j, c]),   rows renormalized,

initialized at z = Q. The transform never reads labels (they are not a
parameter), always runs exactly `t_iter` iterations so calibration and test
rows receive the identical map, and is bitwise equivariant to node
permutations.

Two scalar functionals are tracked per iteration:

* `objective`  - fidelity + graph smoothness:
  sum_i KL(z_i || q_i) + (gamma/2) sum_ij W_ij ||z_i - z_j||^2.
* `cccp_surrogate` - fidelity minus the attractive pairwise interaction:
  sum_i KL(z_i || q_i) - (gamma/2) sum_ij W_ij z_i . z_j.

The update is the exact concave-convex (linearize-then-minimize) step for the
surrogate, which therefore decreases monotonically. The smoothness form does
NOT decrease in general: the update sharpens rows toward neighbor consensus,
which the surrogate rewards but the pure smoothness objective can penalize.
Both traces are recorded so callers can monitor either quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import validate_prob_rows, validate_prob_vector
from .errors import NumericalError
from .graph import SparseAffinityGraph, laplacian_quadratic, neighbor_aggregate, pairwise_interaction

# Probabilities this small are treated as zero mass in KL denominators; keeps
# f32-loaded inputs from producing spurious infinities through underflow.
_KL_FLOOR = 1e-300


@dataclass(frozen=True)
class RefineConfig:
    """Knobs for one refinement pass.

    gamma: graph-smoothing weight (0 disables coupling).
    t_iter: number of synchronous updates (always run in full; no early stop).
    beta: prior strength in [0, 1] (0 = label-free).
    kappa: optional top-k truncation applied to the refinement inputs.
    gate_threshold: optional tau_u; rows with failure probability u < tau_u
        keep z = q but still contribute to their neighbors' aggregates.
    """

    gamma: float = 0.35
    t_iter: int = 8
    beta: float = 0.0
    kappa: int | None = None
    gate_threshold: float | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.t_iter < 0:
            raise ValueError("t_iter must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.kappa is not None and self.kappa < 1:
            raise ValueError("kappa must be at least 1")
        if self.gate_threshold is not None and not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class ClassPrior:
    """Class-frequency prior on the simplex (optionally Dirichlet-smoothed).

    Entries may be zero when built with smoothing = 0 from a degenerate label
    sample; `apply_prior` rejects such priors, so callers needing beta > 0
    must smooth.
    """

    probs: np.ndarray
    smoothing: float = 0.0

    def __post_init__(self):
        p = validate_prob_vector(self.probs)
        if self.smoothing < 0:
            raise ValueError("smoothing pseudo-count must be nonnegative")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def has_zeros(self) -> bool:
        return bool(np.any(self.probs <= 0.0))


@dataclass
class RefineTrace:
    """Per-run diagnostics.

    objective_values: fidelity + smoothness, recorded at initialization and
        after every iteration (empty when recording is disabled).
    surrogate_values: the monotone concave-convex surrogate, same schedule.
    """

    objective_values: list[float] = field(default_factory=list)
    surrogate_values: list[float] = field(default_factory=list)
    iterations_run: int = 0
    gated_fraction: float = 0.0


def estimate_prior(cal_labels, n_classes: int, pseudo_count: float = 0.0) -> ClassPrior:
    """Dirichlet-smoothed label marginals from the calibration split only.

    m_k = (count_k + pseudo_count) / (n + C * pseudo_count).
    """
    labels = np.asarray(cal_labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("need at least one calibration label")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    if pseudo_count < 0:
        raise ValueError("pseudo_count must be nonnegative")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    m = (counts + pseudo_count) / (labels.size + n_classes * pseudo_count)
    return ClassPrior(m, pseudo_count)


def apply_prior(Q, prior: ClassPrior, beta: float) -> np.ndarray:
    """Reweight every row as q_k * m_k**beta, renormalized.

    Applied identically to the whole joint pool. beta = 0 returns the input
    unchanged.
    """
    Q = validate_prob_rows(Q)
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 0.0:
        return Q
    m = prior.probs
    if m.shape[0] != Q.shape[1]:
        raise ValueError("prior dimension does not match the class count")
    if prior.has_zeros:
        raise ValueError("prior has non-positive entries; rebuild with pseudo_count > 0")
    biased = Q * np.power(m, beta)[None, :]
    return biased / biased.sum(axis=1, keepdims=True)


def kl_fidelity(Z, Q) -> float:
    """sum_i KL(z_i || q_i) with the 0 * log 0 = 0 convention.

    Positive z mass on exactly-zero q entries yields +inf (reported, not
    raised).
    """
    Z = np.asarray(Z, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if Z.shape != Q.shape:
        raise ValueError("Z and Q shapes differ")
    if np.any((Q <= 0.0) & (Z > 0.0)):
        return float("inf")
    logq = np.log(np.maximum(Q, _KL_FLOOR))
    logz = np.log(np.maximum(Z, _KL_FLOOR))
    terms = np.where(Z > 0.0, Z * (logz - logq), 0.0)
    return float(terms.sum())


def objective(Z, Q, graph: SparseAffinityGraph, gamma: float) -> float:
    """Fidelity + smoothness: sum KL(z_i||q_i) + (gamma/2) sum_ij W_ij ||z_i - z_j||^2."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return kl_fidelity(Z, Q) + gamma * laplacian_quadratic(graph, Z)


def cccp_surrogate(Z, Q, graph: SparseAffinityGraph, gamma: float) -> float:
    """Fidelity minus attraction: sum KL(z_i||q_i) - (gamma/2) sum_ij W_ij z_i . z_j.

    This is the functional the multiplicative update monotonically decreases.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return kl_fidelity(Z, Q) - gamma * pairwise_interaction(graph, Z)


def truncate_topk(Q, kappa: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep each row's kappa largest entries (ties -> lower index), renormalized.

    Returns (Q_truncated, kept_mask). kappa = C is the identity (input
    returned unchanged with a full mask).
    """
    Q = validate_prob_rows(Q)
    n_classes = Q.shape[1]
    if kappa < 1:
        raise ValueError("kappa must be at least 1")
    if kappa > n_classes:
        raise ValueError("kappa cannot exceed the class count")
    if kappa == n_classes:
        return Q, np.ones(Q.shape, dtype=bool)
    top = np.argsort(-Q, axis=1, kind="stable")[:, :kappa]
    mask = np.zeros(Q.shape, dtype=bool)
    np.put_along_axis(mask, top, True, axis=1)
    kept = np.where(mask, Q, 0.0)
    return kept / kept.sum(axis=1, keepdims=True), mask


def restore_topk(Z_trunc, mask, Q_original) -> np.ndarray:
    """Expand truncated refined rows back to all C classes.

    On-support entries are rescaled to the original kept mass, off-support
    entries keep their original q values, then the row is renormalized. With a
    full mask this is the identity.
    """
    mask = np.asarray(mask, dtype=bool)
    Z = np.asarray(Z_trunc, dtype=np.float64)
    Q = np.asarray(Q_original, dtype=np.float64)
    if not (mask.shape == Z.shape == Q.shape):
        raise ValueError("shape mismatch between refined rows, mask, and originals")
    if mask.all():
        return Z
    kept_mass = np.sum(np.where(mask, Q, 0.0), axis=1, keepdims=True)
    out = np.where(mask, Z * kept_mass, Q)
    return out / out.sum(axis=1, keepdims=True)


def refine(Q, graph: SparseAffinityGraph, config: RefineConfig,
           u=None, record_objective: bool = True) -> tuple[np.ndarray, RefineTrace]:
    """Run `config.t_iter` synchronous multiplicative updates from z = Q.

    When gating is enabled (config.gate_threshold set), rows with
    u < gate_threshold are pinned to their q values after every iteration
    while still feeding their neighbors' aggregates. Recording the objective
    costs one extra pass over the edges per iteration and can be disabled for
    production runs.

    Returns the refined row-stochastic matrix and a RefineTrace.
    """
    Q = validate_prob_rows(Q)
    n, _ = Q.shape
    if graph.n_nodes != n:
        raise ValueError("graph size does not match the probability matrix")
    frozen = None
    if config.gate_threshold is not None:
        if u is None:
            raise ValueError("gating enabled but no failure probabilities supplied")
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (n,):
            raise ValueError("failure probabilities must be a length-N vector")
        frozen = u < config.gate_threshold
    gamma = config.gamma
    Z = Q.copy()
    trace = RefineTrace(
        iterations_run=config.t_iter,
        gated_fraction=float(frozen.mean()) if frozen is not None else 0.0,
    )
    if record_objective:
        trace.objective_values.append(objective(Z, Q, graph, gamma))
        trace.surrogate_values.append(cccp_surrogate(Z, Q, graph, gamma))
    for t in range(1, config.t_iter + 1):
        logits = gamma * neighbor_aggregate(graph, Z)
        logits -= logits.max(axis=1, keepdims=True)  # cancels under renormalization
        Znew = Q * np.exp(logits)
        Znew /= Znew.sum(axis=1, keepdims=True)
        if frozen is not None and frozen.any():
            Znew[frozen] = Q[frozen]
        if not np.all(np.isfinite(Znew)):
            raise NumericalError(f"non-finite refined probabilities at iteration {t}")
        Z = Znew
        if record_objective:
            trace.objective_values.append(objective(Z, Q, graph, gamma))
            trace.surrogate_values.append(cccp_surrogate(Z, Q, graph, gamma))
    return Z, trace
