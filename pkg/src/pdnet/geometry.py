"""Deterministic point-cloud primitives: sampling, grouping, interpolation, normals.

Every function here is a pure function of its inputs. Distances are exact
Euclidean distances computed from coordinate differences; ties are broken by
the smallest index so that results can be compared bit-for-bit against
exhaustive oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "NeighborIndex",
    "Covariance3",
    "NormalDiagnostics",
    "farthest_point_sample",
    "knn",
    "ball_query",
    "inverse_distance_interpolate",
    "covariance_matrix",
    "estimate_normals",
    "canonicalize_sign",
]

_QUERY_CHUNK = 1024


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    """Positions plus optional per-point features, unit normals and labels."""

    positions: np.ndarray
    features: np.ndarray | None = None
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise GeometryError(f"positions must be (N, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("positions contain non-finite values")
        n = len(self.positions)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or len(self.features) != n:
                raise GeometryError("features must be (N, C)")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise GeometryError("normals must be (N, 3)")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise GeometryError("normals must be unit vectors")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise GeometryError("labels must be (N,)")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.features is None else self.features[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )


@dataclass
class NeighborIndex:
    """Per-query support indices and matching distances, nearest first.

    For kNN both fields are (Q, k) arrays. Ball queries produce ragged
    results, stored as lists of 1-D arrays.
    """

    indices: np.ndarray | list
    distances: np.ndarray | list
    support_count: int = field(default=0)

    @property
    def queries(self) -> int:
        return len(self.indices)

    @property
    def ragged(self) -> bool:
        return isinstance(self.indices, list)

    def validate(self) -> None:
        for idx, dist in zip(self.indices, self.distances):
            idx = np.asarray(idx)
            dist = np.asarray(dist)
            if idx.size and (idx.min() < 0 or idx.max() >= self.support_count):
                raise GeometryError("neighbor index out of range")
            if np.any(np.diff(dist) < 0):
                raise GeometryError("neighbor distances not sorted")


@dataclass
class Covariance3:
    m: np.ndarray

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.m)


@dataclass
class NormalDiagnostics:
    ambiguous: np.ndarray  # bool per point: two smallest singular values coincide
    singular_values: np.ndarray


def _as_points(x, name="positions") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"{name} must be an (N, 3) array, got shape {arr.shape}")
    return arr


def _pairwise_distance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - s[None, :, :]
    return np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))


def farthest_point_sample(positions, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsampling beginning at ``start``.

    Each new index maximizes the minimum distance to the points already
    chosen; ties go to the smallest index.
    """
    pts = _as_points(positions)
    n = len(pts)
    if n == 0:
        raise GeometryError("empty input")
    if count > n:
        raise GeometryError("sample count exceeds population")
    if count < 1:
        raise GeometryError("count must be positive")
    if not 0 <= start < n:
        raise GeometryError("start index out of range")

    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    diff = pts - pts[start]
    min_d2 = np.einsum("nd,nd->n", diff, diff)
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d2, np.einsum("nd,nd->n", diff, diff), out=min_d2)
    return selected


def _knn_brute(q: np.ndarray, s: np.ndarray, k: int):
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k), dtype=np.float64)
    for lo in range(0, len(q), _QUERY_CHUNK):
        d = _pairwise_distance(q[lo:lo + _QUERY_CHUNK], s)
        idx[lo:lo + _QUERY_CHUNK] = _smallest_k(d, k)
        dist[lo:lo + _QUERY_CHUNK] = np.take_along_axis(d, idx[lo:lo + _QUERY_CHUNK], axis=1)
    return idx, dist


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    if k == d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, part, axis=1)
    kth = vals.max(axis=1, keepdims=True)
    # rows where the k-th value is tied with an excluded entry need a full sort
    tied = (d <= kth).sum(axis=1) > k
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if tied.any():
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def _knn_tree(q: np.ndarray, s: np.ndarray, k: int):
    # The tree only bounds the k-th distance; candidates inside that bound
    # are re-ranked exactly so tie-breaking matches the brute-force path.
    tree = cKDTree(s)
    kth, _ = tree.query(q, k=k)
    kth = np.asarray(kth).reshape(len(q), -1)[:, -1]
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k), dtype=np.float64)
    for i, cand in enumerate(tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12)):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        diff = q[i] - s[cand]
        d = np.sqrt(np.einsum("nd,nd->n", diff, diff))
        order = np.argsort(d, kind="stable")[:k]
        idx[i] = cand[order]
        dist[i] = d[order]
    return idx, dist


def knn(query_positions, support_positions, k: int, method: str = "brute") -> NeighborIndex:
    """k nearest supports per query, sorted by distance then index.

    ``method="tree"`` uses a KD-tree to bound the search; both methods return
    identical indices.
    """
    q = _as_points(query_positions, "query_positions")
    s = _as_points(support_positions, "support_positions")
    if len(q) == 0 or len(s) == 0:
        raise GeometryError("query and support sets must be non-empty")
    if k < 1:
        raise GeometryError("k must be positive")
    if k > len(s):
        raise GeometryError(f"k={k} exceeds support count {len(s)}")
    if method == "brute":
        idx, dist = _knn_brute(q, s, k)
    elif method == "tree":
        idx, dist = _knn_tree(q, s, k)
    else:
        raise GeometryError(f"unknown knn method {method!r}")
    return NeighborIndex(idx, dist, len(s))


def ball_query(query_positions, support_positions, radius: float, max_k: int) -> NeighborIndex:
    """Up to ``max_k`` supports within ``radius`` per query, nearest first.

    An empty ball falls back to the single nearest support point.
    """
    if radius <= 0:
        raise GeometryError("radius must be positive")
    if max_k < 1:
        raise GeometryError("max_k must be positive")
    q = _as_points(query_positions, "query_positions")
    s = _as_points(support_positions, "support_positions")
    if len(s) == 0:
        raise GeometryError("empty support set")
    indices, distances = [], []
    for lo in range(0, len(q), _QUERY_CHUNK):
        d = _pairwise_distance(q[lo:lo + _QUERY_CHUNK], s)
        order = np.argsort(d, axis=1, kind="stable")
        for row, o in zip(d, order):
            ds = row[o]
            m = min(int(np.count_nonzero(ds <= radius)), max_k)
            m = max(m, 1)
            indices.append(o[:m].copy())
            distances.append(ds[:m].copy())
    return NeighborIndex(indices, distances, len(s))


def inverse_distance_interpolate(query_positions, support_positions, support_features,
                                 k: int = 3, epsilon: float = 1e-8) -> np.ndarray:
    """Weighted average of the k nearest support features with w = 1/(d + epsilon)."""
    feats = np.asarray(support_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if not np.all(np.isfinite(feats)):
        raise GeometryError("support features contain non-finite values")
    if epsilon <= 0:
        raise GeometryError("epsilon must be positive")
    s = _as_points(support_positions, "support_positions")
    if len(feats) != len(s):
        raise GeometryError("support_features must have one row per support point")
    nb = knn(query_positions, s, k)
    w = 1.0 / (nb.distances + epsilon)
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qkc->qc", w, feats[nb.indices])


def covariance_matrix(points) -> Covariance3:
    """Population covariance (1/k normalization) of a neighborhood."""
    pts = _as_points(points, "points")
    if len(pts) < 3:
        raise GeometryError("degenerate neighborhood")
    centered = pts - pts.mean(axis=0)
    m = centered.T @ centered / len(pts)
    return Covariance3(0.5 * (m + m.T))


def canonicalize_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude component is positive."""
    v = np.asarray(vectors, dtype=np.float64)
    lead = np.argmax(np.abs(v), axis=-1)
    sign = np.sign(np.take_along_axis(v, lead[..., None], axis=-1))
    sign[sign == 0] = 1.0
    return v * sign


def estimate_normals(positions, k: int = 16, return_diagnostics: bool = False,
                     ambiguity_tol: float = 1e-9):
    """Least-squares plane normals from each point and its k-1 nearest neighbors.

    The normal is the right singular vector of the centered neighborhood
    with the smallest singular value, which is the minimum-eigenvalue
    eigenvector of the neighborhood covariance.
    """
    pts = _as_points(positions)
    if k < 3:
        raise GeometryError("k must be at least 3")
    if len(pts) < k:
        raise GeometryError(f"need at least k={k} points, got {len(pts)}")
    nb = knn(pts, pts, k)
    hood = pts[nb.indices]
    centered = hood - hood.mean(axis=1, keepdims=True)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    normals = canonicalize_sign(vt[:, -1, :])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if not return_diagnostics:
        return normals
    scale = np.maximum(sv[:, 0], 1e-300)
    ambiguous = (sv[:, -2] - sv[:, -1]) <= ambiguity_tol * scale
    return normals, NormalDiagnostics(ambiguous, sv)
