"""Exchangeable synthetic datasets for desk-scale verification.

Class means are orthonormal directions on the unit sphere (QR of a Gaussian
matrix, so dim >= n_classes is required). A sample with label c is
normalize(separation * mean_c + noise * eps) with eps standard normal, the
prototype bank is the class means, and the calibration/test partition is a
uniform shuffle of the pool, which makes the two splits exchangeable by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PrototypeBank, normalize_rows
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters; mixture_weights None means uniform classes.

    prototype_shift > 0 perturbs the prototype bank away from the true class
    means (prototype_c = normalize(mean_c + shift * gaussian)), emulating the
    gap between the scoring model's label representations and the embedding
    clusters; with the default 0 the prototypes are exactly the class means.
    """

    n_classes: int = 5
    dim: int = 32
    separation: float = 1.0
    noise: float = 0.35
    prototype_shift: float = 0.0
    mixture_weights: tuple[float, ...] | None = None
    n_cal: int = 80
    n_test: int = 920
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.dim < self.n_classes:
            raise ConfigError("dim must be >= n_classes for orthonormal class means")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.prototype_shift < 0:
            raise ConfigError("prototype_shift must be nonnegative")
        if self.n_cal < 1 or self.n_test < 1:
            raise ConfigError("n_cal and n_test must be positive")
        if self.mixture_weights is not None:
            w = tuple(float(x) for x in self.mixture_weights)
            if len(w) != self.n_classes or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError("mixture_weights must be a length-C simplex point")
            object.__setattr__(self, "mixture_weights", w)


@dataclass
class SyntheticDataset:
    """Generated pool split into calibration and test halves."""

    cal_embeddings: np.ndarray
    cal_labels: np.ndarray
    test_embeddings: np.ndarray
    test_labels: np.ndarray
    bank: PrototypeBank

    @property
    def n_classes(self) -> int:
        return self.bank.n_classes


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> SyntheticDataset:
    """Draw a dataset; `rng` overrides spec.seed (used for per-trial streams)."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    c, d = spec.n_classes, spec.dim
    means_q, _ = np.linalg.qr(rng.normal(size=(d, c)))
    means = means_q.T  # (C, D) orthonormal rows
    if spec.prototype_shift > 0:
        protos = normalize_rows(means + spec.prototype_shift * rng.normal(size=(c, d)))
    else:
        protos = means
    total = spec.n_cal + spec.n_test
    weights = spec.mixture_weights
    p = np.full(c, 1.0 / c) if weights is None else np.asarray(weights, dtype=np.float64)
    labels = rng.choice(c, size=total, p=p)
    raw = spec.separation * means[labels] + spec.noise * rng.normal(size=(total, d))
    emb = normalize_rows(raw)
    perm = rng.permutation(total)
    cal_idx, test_idx = perm[:spec.n_cal], perm[spec.n_cal:]
    bank = PrototypeBank(protos, tuple(f"class_{i}" for i in range(c)))
    return SyntheticDataset(
        cal_embeddings=emb[cal_idx],
        cal_labels=labels[cal_idx].astype(np.int64),
        test_embeddings=emb[test_idx],
        test_labels=labels[test_idx].astype(np.int64),
        bank=bank,
    )
