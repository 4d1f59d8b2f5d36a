"""Domain primitives: unit-norm embeddings, prototype banks, zero-shot probabilities.

Embeddings and probability vectors are plain float64 numpy arrays; the
functions below act as validating constructors. Class probabilities come from
a temperature-scaled softmax over embedding/prototype inner products and live
on the C-class simplex. Everything here is pure and safe to call from
concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_NORM_ATOL = 1e-6
SIMPLEX_ATOL = 1e-6


def normalize(v) -> np.ndarray:
    """Project a raw feature vector onto the unit sphere, preserving direction.

    Raises ValueError for empty, non-finite, or zero vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def normalize_rows(mat) -> np.ndarray:
    """Row-wise `normalize` for an (N, D) matrix."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] == 0:
        raise ValueError("expected a 2-D matrix with at least one column")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix has non-finite entries")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("matrix contains a zero row")
    return mat / norms


def is_unit(v, atol: float = UNIT_NORM_ATOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= atol


def validate_prob_vector(p, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Check that `p` is a point on the simplex; returns it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty 1-D probability vector")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector has non-finite entries")
    if np.any(p < -atol) or np.any(p > 1.0 + atol):
        raise ValueError("probability entries outside [0, 1]")
    if abs(float(p.sum()) - 1.0) > atol:
        raise ValueError("probabilities do not sum to 1")
    return p


def validate_prob_rows(P, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Row-wise simplex check for an (N, C) matrix."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] == 0:
        raise ValueError("expected a 2-D probability matrix")
    if not np.all(np.isfinite(P)):
        raise ValueError("probability matrix has non-finite entries")
    if np.any(P < -atol) or np.any(P > 1.0 + atol):
        raise ValueError("probability entries outside [0, 1]")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > atol):
        raise ValueError("some rows do not sum to 1")
    return P


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PrototypeBank:
    """C unit-norm class prototypes with their class names.

    Immutable after construction; the prototype matrix is (C, D) row-major.
    """

    prototypes: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2:
            raise ValueError("prototypes must be a (C, D) matrix")
        if protos.shape[0] < 2:
            raise ValueError("need at least two classes")
        if not np.all(np.isfinite(protos)):
            raise ValueError("prototypes have non-finite entries")
        norms = np.linalg.norm(protos, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_ATOL):
            raise ValueError("every prototype must be unit-norm within 1e-6")
        names = tuple(str(n) for n in self.class_names)
        if len(names) != protos.shape[0]:
            raise ValueError("class_names length must equal the prototype count")
        object.__setattr__(self, "prototypes", _readonly(protos))
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class LabeledExample:
    """A unit-norm embedding with an optional class label (None = unlabeled)."""

    embedding: np.ndarray
    label: int | None

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if self.label is not None and int(self.label) < 0:
            raise ValueError("label must be a nonnegative class index")
        object.__setattr__(self, "embedding", _readonly(emb))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))


def average_prototype(templates) -> np.ndarray:
    """Arithmetic mean of same-dimension template vectors (no re-normalization).

    Callers building a bank re-normalize the mean before use; see
    `build_prototype_bank`.
    """
    templates = list(templates)
    if not templates:
        raise ValueError("cannot average an empty template list")
    arrs = [np.asarray(t, dtype=np.float64) for t in templates]
    dim = arrs[0].shape
    if any(a.shape != dim for a in arrs):
        raise ValueError("template dimensions do not match")
    return np.mean(arrs, axis=0)


def build_prototype_bank(template_sets, class_names) -> PrototypeBank:
    """Average each class's templates, re-normalize the means, assemble a bank.

    Re-normalization keeps similarity scales comparable across classes even
    when template sets disagree internally.
    """
    protos = [normalize(average_prototype(ts)) for ts in template_sets]
    return PrototypeBank(np.stack(protos), tuple(class_names))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-logit subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def zero_shot_probs(v, bank: PrototypeBank, tau: float = 1.0) -> np.ndarray:
    """Class probabilities proportional to exp(v . w_c / tau)."""
    v = np.asarray(v, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if v.ndim != 1 or v.shape[0] != bank.dim:
        raise ValueError("embedding dimension does not match the bank")
    return softmax(bank.prototypes @ v / tau)


def zero_shot_prob_matrix(embeddings, bank: PrototypeBank, tau: float = 1.0) -> np.ndarray:
    """Vectorized `zero_shot_probs` for an (N, D) embedding matrix."""
    E = np.asarray(embeddings, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if E.ndim != 2 or E.shape[1] != bank.dim:
        raise ValueError("embedding dimension does not match the bank")
    return softmax(E @ bank.prototypes.T / tau, axis=1)
