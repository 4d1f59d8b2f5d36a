"""Symmetric-union kNN affinity graph with Gaussian weights.

The graph is built over the joint pool of unit-norm embeddings. An edge (i, j)
exists when i is among j's k nearest neighbors or vice versa (union rule), and
carries weight exp(-||v_i - v_j||^2 / sigma^2) with sigma the median directed
neighbor distance. Edges are stored once per unordered pair and expanded
symmetrically on access.

Neighbor aggregation sums each row's weighted contributions in ascending value
order. That canonical order makes the sums independent of node labeling, so
rebuilding after a node permutation yields bitwise-identical results, and the
output never depends on how work is split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import UNIT_NORM_ATOL


def _pairwise_sq_dists(E: np.ndarray) -> np.ndarray:
    """Exact-symmetric squared Euclidean distances with +inf diagonal."""
    gram = E @ E.T
    gram = (gram + gram.T) / 2.0  # force bitwise symmetry of the BLAS product
    sq = np.sum(E * E, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    return d2


def _validate_embeddings(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("need an (N, D) embedding matrix with N >= 2")
    if not np.all(np.isfinite(E)):
        raise ValueError("embeddings have non-finite entries")
    norms = np.linalg.norm(E, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_ATOL):
        raise ValueError("embeddings must be unit-norm within 1e-6")
    return E


def knn_indices(embeddings, k: int) -> np.ndarray:
    """Indices of each node's k nearest neighbors (ties -> lower index).

    Returns an (N, k) int array; requires 1 <= k < N.
    """
    E = _validate_embeddings(embeddings)
    n = E.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the pool size N={n}")
    d2 = _pairwise_sq_dists(E)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _directed_distances(E: np.ndarray, knn: np.ndarray) -> np.ndarray:
    """||v_i - v_j|| for every directed pair (i, j in kNN(i)), shape (N, k)."""
    diffs = E[:, None, :] - E[knn]
    return np.sqrt(np.sum(diffs * diffs, axis=2))


def median_bandwidth(embeddings, knn: np.ndarray) -> tuple[float, bool]:
    """Median of all N*k directed neighbor distances.

    Returns (sigma, degenerate). Fully duplicated pools give sigma = 0; those
    fall back to sigma = 1 with degenerate = True so the pipeline still runs.
    """
    E = _validate_embeddings(embeddings)
    knn = np.asarray(knn)
    if knn.ndim != 2 or knn.shape[0] != E.shape[0] or knn.shape[1] == 0:
        raise ValueError("neighbor lists must be a non-empty (N, k) array")
    sigma = float(np.median(_directed_distances(E, knn)))
    if sigma == 0.0:
        return 1.0, True
    return sigma, False


@dataclass(frozen=True)
class SparseAffinityGraph:
    """Symmetric nonnegative affinity graph over N nodes.

    `edge_i < edge_j` index each unordered pair exactly once; `edge_w` holds
    the Gaussian weights in (0, 1]. `nbr_idx`/`nbr_w` are the padded directed
    expansion used for aggregation (pad entries have weight 0). All arrays are
    read-only after construction.
    """

    n_nodes: int
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_w: np.ndarray
    bandwidth: float
    degenerate_bandwidth: bool = False
    degrees: np.ndarray = field(init=False)
    nbr_idx: np.ndarray = field(init=False)
    nbr_w: np.ndarray = field(init=False)

    def __post_init__(self):
        ei = np.asarray(self.edge_i, dtype=np.int64)
        ej = np.asarray(self.edge_j, dtype=np.int64)
        ew = np.asarray(self.edge_w, dtype=np.float64)
        if not (ei.shape == ej.shape == ew.shape) or ei.ndim != 1:
            raise ValueError("edge arrays must be 1-D and equally long")
        if ei.size and (ei.min() < 0 or max(ei.max(), ej.max()) >= self.n_nodes):
            raise ValueError("edge endpoint out of range")
        if np.any(ei >= ej):
            raise ValueError("edges must be stored once per pair with i < j")
        if np.any(ew <= 0.0) or np.any(ew > 1.0):
            raise ValueError("weights must lie in (0, 1]")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        nbr_idx, nbr_w = _pad_neighbors(self.n_nodes, ei, ej, ew)
        # Ascending-value summation: canonical under node relabeling.
        degrees = np.sort(nbr_w, axis=1).sum(axis=1) if nbr_w.size else np.zeros(self.n_nodes)
        for name, arr in [("edge_i", ei), ("edge_j", ej), ("edge_w", ew),
                          ("degrees", degrees), ("nbr_idx", nbr_idx), ("nbr_w", nbr_w)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_edge_list(cls, n_nodes: int, edges, bandwidth: float = 1.0,
                       degenerate_bandwidth: bool = False) -> "SparseAffinityGraph":
        """Build from (i, j, w) triples; pairs are canonicalized and must be unique."""
        tri = [(min(i, j), max(i, j), w) for i, j, w in edges]
        if any(i == j for i, j, _ in tri):
            raise ValueError("self-loops are not allowed")
        pairs = [(i, j) for i, j, _ in tri]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate edge for an unordered pair")
        tri.sort()
        ei = np.array([t[0] for t in tri], dtype=np.int64)
        ej = np.array([t[1] for t in tri], dtype=np.int64)
        ew = np.array([t[2] for t in tri], dtype=np.float64)
        return cls(n_nodes, ei, ej, ew, bandwidth, degenerate_bandwidth)

    @property
    def n_edges(self) -> int:
        return int(self.edge_i.size)

    def weight(self, i: int, j: int) -> float:
        """Weight of the unordered pair (i, j); 0.0 when absent."""
        a, b = (i, j) if i < j else (j, i)
        hit = (self.edge_i == a) & (self.edge_j == b)
        idx = np.flatnonzero(hit)
        return float(self.edge_w[idx[0]]) if idx.size else 0.0

    def to_dense(self) -> np.ndarray:
        W = np.zeros((self.n_nodes, self.n_nodes))
        W[self.edge_i, self.edge_j] = self.edge_w
        W[self.edge_j, self.edge_i] = self.edge_w
        return W


def _pad_neighbors(n_nodes: int, ei, ej, ew) -> tuple[np.ndarray, np.ndarray]:
    src = np.concatenate([ei, ej])
    dst = np.concatenate([ej, ei])
    w = np.concatenate([ew, ew])
    order = np.argsort(src, kind="stable")
    src, dst, w = src[order], dst[order], w[order]
    counts = np.bincount(src, minlength=n_nodes)
    max_deg = int(counts.max()) if counts.size and src.size else 0
    nbr_idx = np.zeros((n_nodes, max_deg), dtype=np.int64)
    nbr_w = np.zeros((n_nodes, max_deg), dtype=np.float64)
    if src.size:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.arange(src.size) - np.repeat(starts, counts)
        nbr_idx[src, pos] = dst
        nbr_w[src, pos] = w
    return nbr_idx, nbr_w


def build_graph(embeddings, k: int, sigma_override: float | None = None) -> SparseAffinityGraph:
    """Union-kNN graph with Gaussian weights exp(-d^2 / sigma^2).

    An edge exists iff i is in kNN(j) or j is in kNN(i). sigma defaults to the
    median directed neighbor distance (see `median_bandwidth`).
    """
    E = _validate_embeddings(embeddings)
    knn = knn_indices(E, k)
    if sigma_override is not None:
        if sigma_override <= 0:
            raise ValueError("sigma override must be positive")
        sigma, degenerate = float(sigma_override), False
    else:
        sigma, degenerate = median_bandwidth(E, knn)
    n = E.shape[0]
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = knn.reshape(-1)
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    keys = np.unique(lo * np.int64(n) + hi)
    ei = (keys // n).astype(np.int64)
    ej = (keys % n).astype(np.int64)
    diffs = E[ei] - E[ej]
    d2 = np.sum(diffs * diffs, axis=1)
    ew = np.exp(-d2 / (sigma * sigma))
    return SparseAffinityGraph(n, ei, ej, ew, sigma, degenerate)


def neighbor_aggregate(graph: SparseAffinityGraph, Z) -> np.ndarray:
    """M[i, c] = sum_j W_ij Z[j, c] via per-row ascending-value summation."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != graph.n_nodes:
        raise ValueError("Z must be (N, C) with N matching the graph")
    n, c = Z.shape
    if graph.nbr_idx.shape[1] == 0:
        return np.zeros((n, c))
    addends = Z[graph.nbr_idx] * graph.nbr_w[:, :, None]        # (N, deg, C)
    addends = np.ascontiguousarray(addends.swapaxes(1, 2))      # (N, C, deg)
    addends.sort(axis=2)
    return addends.sum(axis=2)


def laplacian_quadratic(graph: SparseAffinityGraph, Z) -> float:
    """(1/2) sum_ij W_ij ||z_i - z_j||^2, computed once per stored pair."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != graph.n_nodes:
        raise ValueError("Z must be (N, C) with N matching the graph")
    if graph.n_edges == 0:
        return 0.0
    diffs = Z[graph.edge_i] - Z[graph.edge_j]
    return float(np.sum(graph.edge_w * np.sum(diffs * diffs, axis=1)))


def pairwise_interaction(graph: SparseAffinityGraph, Z) -> float:
    """(1/2) sum_ij W_ij z_i . z_j, computed once per stored pair."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != graph.n_nodes:
        raise ValueError("Z must be (N, C) with N matching the graph")
    if graph.n_edges == 0:
        return 0.0
    prods = np.sum(Z[graph.edge_i] * Z[graph.edge_j], axis=1)
    return float(np.sum(graph.edge_w * prods))
