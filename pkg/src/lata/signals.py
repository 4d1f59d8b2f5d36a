"""Per-sample failure probability u(x) and label-attention alpha(x).

Three interchangeable providers produce the signals that feed failure-aware
scoring:

* `ViluProvider` - a frozen cross-attention + MLP head loaded from a weight
  bundle: attention from the image embedding over the class prototypes, then
  a small MLP on [v, t_best, attention-weighted summary] through a logistic
  sigmoid.
* `HeuristicProvider` - normalized entropy of the class probabilities as u,
  the probabilities themselves as attention. Default when no weights exist.
* `OracleProvider` - u = 1 iff the argmax misses the true label; one-hot
  attention at the truth. Only meaningful on synthetic data with known labels.

Whatever the provider, the same instance is applied to the whole joint pool
(calibration and test alike) in one call; every output u lies in [0, 1] and
every attention row is a simplex point. Providers are deterministic and
immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import PrototypeBank, softmax, validate_prob_vector

_ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "none": lambda x: x,
}


@dataclass(frozen=True)
class FailureSignals:
    """One sample's difficulty u in [0, 1] and attention over the C classes."""

    u: float
    attention: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise ValueError("u must lie in [0, 1]")
        att = validate_prob_vector(self.attention).copy()
        att.setflags(write=False)
        object.__setattr__(self, "attention", att)


@dataclass(frozen=True)
class ViluWeights:
    """Parameters of the frozen failure head.

    query/key/value projections are (D, D); mlp_layers chain from the 3D
    concatenation [v, t_best, summary] down to a single scalar, with the named
    activation applied after each layer ("none" on the last so the sigmoid
    sees a raw affine output).
    """

    query_proj: np.ndarray
    key_proj: np.ndarray
    value_proj: np.ndarray
    mlp_layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activations: tuple[str, ...]
    attention_scale: float

    def __post_init__(self):
        q = np.asarray(self.query_proj, dtype=np.float64)
        k = np.asarray(self.key_proj, dtype=np.float64)
        v = np.asarray(self.value_proj, dtype=np.float64)
        if not (q.ndim == k.ndim == v.ndim == 2):
            raise ValueError("projections must be matrices")
        if not (q.shape == k.shape == v.shape) or q.shape[0] != q.shape[1]:
            raise ValueError("projections must be equal square (D, D) matrices")
        if self.attention_scale <= 0:
            raise ValueError("attention_scale must be positive")
        layers = tuple((np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.mlp_layers)
        if not layers:
            raise ValueError("the MLP needs at least one layer")
        if len(self.activations) != len(layers):
            raise ValueError("need one activation name per MLP layer")
        for name in self.activations:
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        dim = q.shape[0]
        in_dim = 3 * dim
        for w, b in layers:
            if w.ndim != 2 or b.ndim != 1 or w.shape != (b.shape[0], in_dim):
                raise ValueError("MLP layer shapes do not chain")
            in_dim = w.shape[0]
        if in_dim != 1:
            raise ValueError("the final MLP layer must output a single scalar")
        object.__setattr__(self, "query_proj", q)
        object.__setattr__(self, "key_proj", k)
        object.__setattr__(self, "value_proj", v)
        object.__setattr__(self, "mlp_layers", layers)
        object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def dim(self) -> int:
        return self.query_proj.shape[0]


def attention_forward(v, bank: PrototypeBank, weights: ViluWeights) -> tuple[np.ndarray, np.ndarray]:
    """Single-head cross-attention from one embedding to the prototype bank.

    attention_j = softmax_j((Qv) . (K t_j) / scale); the summary is the
    attention-weighted mix of value-projected prototypes.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (weights.dim,) or bank.dim != weights.dim:
        raise ValueError("dimension mismatch between embedding, bank, and weights")
    query = weights.query_proj @ v
    keys = bank.prototypes @ weights.key_proj.T
    attention = softmax(keys @ query / weights.attention_scale)
    summary = attention @ (bank.prototypes @ weights.value_proj.T)
    return attention, summary


def vilu_u(v, bank: PrototypeBank, q, weights: ViluWeights) -> float:
    """Failure probability sigmoid(MLP([v, t_best, summary])).

    t_best is the prototype of the argmax class of q (ties -> lowest index).
    """
    q = validate_prob_vector(q)
    if q.shape[0] != bank.n_classes:
        raise ValueError("probability vector does not match the bank")
    _, summary = attention_forward(v, bank, weights)
    best = int(np.argmax(q))
    h = np.concatenate([np.asarray(v, dtype=np.float64), bank.prototypes[best], summary])
    for (w, b), act in zip(weights.mlp_layers, weights.activations):
        h = w @ h + b
        h = _ACTIVATIONS[act](h)
    return float(expit(h[0]))


def heuristic_signals(q) -> FailureSignals:
    """Normalized-entropy difficulty with the probabilities as attention."""
    q = validate_prob_vector(q)
    u = _normalized_entropy(q[None, :])[0]
    return FailureSignals(u=float(u), attention=q)


def oracle_signals(q, true_label: int) -> FailureSignals:
    """Difficulty 1 iff argmax misses the truth; one-hot attention at the truth."""
    q = validate_prob_vector(q)
    if not 0 <= true_label < q.shape[0]:
        raise ValueError("true label out of range")
    miss = float(int(np.argmax(q)) != int(true_label))
    attention = np.zeros_like(q)
    attention[int(true_label)] = 1.0
    return FailureSignals(u=miss, attention=attention)


def _normalized_entropy(P: np.ndarray) -> np.ndarray:
    terms = np.where(P > 0.0, P * np.log(np.maximum(P, 1e-300)), 0.0)
    h = -terms.sum(axis=1) / np.log(P.shape[1])
    return np.clip(h, 0.0, 1.0)


class HeuristicProvider:
    """Pool-level `heuristic_signals`; ignores embeddings, bank, and labels."""

    def compute(self, embeddings, probs, bank: PrototypeBank, labels=None):
        P = np.asarray(probs, dtype=np.float64)
        return _normalized_entropy(P), P.copy()


class OracleProvider:
    """Pool-level `oracle_signals`; requires true labels for every pool item."""

    def compute(self, embeddings, probs, bank: PrototypeBank, labels=None):
        if labels is None:
            raise ValueError("the oracle provider needs true labels for the whole pool")
        P = np.asarray(probs, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (P.shape[0],):
            raise ValueError("labels must cover every pool item")
        u = (np.argmax(P, axis=1) != y).astype(np.float64)
        attention = np.zeros_like(P)
        attention[np.arange(P.shape[0]), y] = 1.0
        return u, attention


class ViluProvider:
    """Vectorized forward pass of a loaded weight bundle over the pool."""

    def __init__(self, weights: ViluWeights):
        self.weights = weights

    def compute(self, embeddings, probs, bank: PrototypeBank, labels=None):
        w = self.weights
        E = np.asarray(embeddings, dtype=np.float64)
        P = np.asarray(probs, dtype=np.float64)
        if E.ndim != 2 or E.shape[1] != w.dim or bank.dim != w.dim:
            raise ValueError("dimension mismatch between pool, bank, and weights")
        keys = bank.prototypes @ w.key_proj.T
        attention = softmax((E @ w.query_proj.T) @ keys.T / w.attention_scale, axis=1)
        summary = attention @ (bank.prototypes @ w.value_proj.T)
        best = np.argmax(P, axis=1)
        h = np.concatenate([E, bank.prototypes[best], summary], axis=1)
        for (wl, bl), act in zip(w.mlp_layers, w.activations):
            h = h @ wl.T + bl
            h = _ACTIVATIONS[act](h)
        return expit(h[:, 0]), attention
