"""Local aggregation blocks over batched point sets.

Shape conventions used throughout:

* ``positions``: (B, N, 3) float array (geometry is never differentiated here)
* ``normals``:   (B, N, 3) float array of unit vectors
* ``features``:  Tensor (B, N, C)
* ``group``:     (B, M, k) int array of neighbor indices into the support set
"""

from __future__ import annotations

import numpy as np

from . import geometry
from .numerics import MLP, Module, Tensor, as_tensor, gather, matmul, max_pool_set, relu, reshape, tsum

UNIT_TOLERANCE = 1e-6
# Init scale of residual-branch output layers; keeps activations bounded
# through deep stacks without normalization layers.
RESIDUAL_GAIN = 0.1


def _const(x, like: Module) -> Tensor:
    """Wrap a numpy array as a constant tensor in the module's parameter dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.parameters()[0].dtype
    return Tensor(np.asarray(x, dtype=dtype))


def relative_positions(support_positions, center_positions, group) -> np.ndarray:
    """``p_j - p_i`` for every neighbor j of every center i: (B, M, k, 3)."""
    b = np.arange(len(group))[:, None, None]
    return support_positions[b, group] - center_positions[:, :, None, :]


def grouped_linear(layer, features, group, rel) -> Tensor:
    """``layer([f_j, rel_ij])`` evaluated as a per-point projection followed by a gather.

    A linear map of a concatenation splits into a sum of linear maps, so the
    feature part is projected once per point instead of once per member.
    """
    features = as_tensor(features)
    c = features.shape[-1]
    w = layer.weight
    if w.shape[0] != c + 3:
        raise ValueError(f"layer expects {w.shape[0] - 3} feature channels, got {c}")
    projected = gather(matmul(features, w[:c]), group)
    return projected + matmul(_const(rel, layer), w[c:]) + layer.bias


def batched_knn(query_positions, support_positions, k: int) -> np.ndarray:
    return np.stack([geometry.knn(q, s, k).indices
                     for q, s in zip(query_positions, support_positions)])


class PositionEncoding(Module):
    """Two-layer MLP lifting relative coordinates (3 -> C -> C)."""

    def __init__(self, width: int):
        self.mlp = MLP(3, [(width, "relu"), (width, "none")])

    def __call__(self, rel) -> Tensor:
        rel = _const(rel, self)
        if rel.shape[-1] != 3:
            raise ValueError(f"relative coordinates must end in 3, got {rel.shape}")
        return self.mlp(rel)


class NormalEmbedding(Module):
    """Two-layer MLP lifting unit normals to feature width (3 -> C -> C)."""

    def __init__(self, width: int):
        self.mlp = MLP(3, [(width, "relu"), (width, "none")])

    def __call__(self, normals) -> Tensor:
        n = _const(normals, self)
        if n.shape[-1] != 3:
            raise ValueError(f"normals must end in 3, got {n.shape}")
        if np.any(np.abs(np.linalg.norm(n.data, axis=-1) - 1.0) > UNIT_TOLERANCE):
            raise ValueError("normal embedding received non-unit normals")
        return self.mlp(n)


def position_encoding(rel, params: PositionEncoding) -> Tensor:
    return params(rel)


def normal_embedding(normals, params: NormalEmbedding) -> Tensor:
    return params(normals)


class SetAbstraction(Module):
    """Max-pooled shared MLP over ``[f_j, p_j - p_i]`` for each center i."""

    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.encoder = MLP(in_channels + 3, [(out_channels, "relu")])

    def members(self, support_positions, support_features, centers, group) -> tuple[Tensor, np.ndarray]:
        support_features = as_tensor(support_features)
        if support_features.shape[:2] != support_positions.shape[:2]:
            raise ValueError("features and positions disagree on point count")
        if group.shape[:2] != centers.shape:
            raise ValueError("grouping does not match the center list")
        b = np.arange(len(centers))[:, None]
        rel = relative_positions(support_positions, support_positions[b, centers], group)
        return relu(grouped_linear(self.encoder.layers[0], support_features, group, rel)), rel

    def __call__(self, support_positions, support_features, centers, group) -> Tensor:
        encoded, _ = self.members(support_positions, support_features, centers, group)
        return max_pool_set(encoded)


def set_abstraction(positions, features, centers, group, params: SetAbstraction) -> Tensor:
    return params(positions, features, centers, group)


class PDSA(Module):
    """Set abstraction whose members also receive ``delta(p_j - p_i) + gamma(n_j)``."""

    def __init__(self, in_channels: int, out_channels: int, use_position: bool = True, use_normals: bool = True):
        self.sa = SetAbstraction(in_channels, out_channels)
        self.pe = PositionEncoding(out_channels) if use_position else None
        self.ne = NormalEmbedding(out_channels) if use_normals else None

    @property
    def out_channels(self) -> int:
        return self.sa.out_channels

    def __call__(self, support_positions, support_normals, support_features, centers, group) -> Tensor:
        x, rel = self.sa.members(support_positions, support_features, centers, group)
        if self.pe is not None:
            x = x + self.pe(rel)
        if self.ne is not None:
            if support_normals is None:
                raise ValueError("PDSA with normal embedding requires normals")
            x = x + gather(self.ne(support_normals), group)
        return max_pool_set(x)


def pdsa(positions, normals, features, stride: int, params: PDSA, k: int = 32, start: int = 0):
    """Downsample one batch by ``stride`` and aggregate with a PDSA block.

    Returns ``(center_positions, center_normals, features, centers)``.
    """
    b, n, _ = positions.shape
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if stride > n:
        raise ValueError("stride exceeds point count")
    m = n // stride
    centers = np.stack([geometry.farthest_point_sample(p, m, start) for p in positions])
    bi = np.arange(b)[:, None]
    center_pos = positions[bi, centers]
    group = batched_knn(center_pos, positions, min(k, n))
    out = params(positions, normals, features, centers, group)
    center_normals = None if normals is None else normals[bi, centers]
    return center_pos, center_normals, out, centers


class InvResMLP(Module):
    """``f + M2(max_j M1([f_j, p_j - p_i]))`` with one-layer M1 and two-layer M2."""

    def __init__(self, channels: int, expansion: int = 4):
        self.m1 = MLP(channels + 3, [(channels, "relu")])
        self.m2 = MLP(channels, [(channels * expansion, "relu"), (channels, "none")], last_gain=RESIDUAL_GAIN)

    def delta(self, positions, features, group) -> Tensor:
        rel = relative_positions(positions, positions, group)
        pooled = max_pool_set(relu(grouped_linear(self.m1.layers[0], features, group, rel)))
        return self.m2(pooled)

    def __call__(self, positions, features, group) -> Tensor:
        features = as_tensor(features)
        if features.shape[-1] != self.m2.out_features:
            raise ValueError("residual width mismatch")
        return features + self.delta(positions, features, group)


class PointMetaBlock(Module):
    """Pointwise M3 before grouping, ``max_j(f'_j + delta(p_j - p_i) [+ gamma(n_j)])``, M2, residual.

    With ``use_normals`` the aggregand carries the normal embedding and the
    block is a PLAM block.
    """

    def __init__(self, channels: int, expansion: int = 4, use_normals: bool = False):
        self.channels = channels
        self.m3 = MLP(channels, [(channels, "relu")])
        self.pe = PositionEncoding(channels)
        self.ne = NormalEmbedding(channels) if use_normals else None
        self.m2 = MLP(channels, [(channels * expansion, "relu"), (channels, "none")], last_gain=RESIDUAL_GAIN)

    def aggregate(self, positions, normals, features, group) -> Tensor:
        features = as_tensor(features)
        if features.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {features.shape[-1]}")
        fj = gather(self.m3(features), group)
        x = fj + self.pe(relative_positions(positions, positions, group))
        if self.ne is not None:
            if normals is None:
                raise ValueError("PLAM requires normals")
            x = x + gather(self.ne(normals), group)
        return max_pool_set(x)

    def delta(self, positions, normals, features, group) -> Tensor:
        return self.m2(self.aggregate(positions, normals, features, group))

    def __call__(self, positions, normals, features, group) -> Tensor:
        features = as_tensor(features)
        return features + self.delta(positions, normals, features, group)


class PLAM(PointMetaBlock):
    def __init__(self, channels: int, expansion: int = 4):
        super().__init__(channels, expansion, use_normals=True)


def inv_res_mlp(positions, features, group, params: InvResMLP) -> Tensor:
    return params(positions, features, group)


def pointmeta_block(positions, features, group, params: PointMetaBlock) -> Tensor:
    return params(positions, None, features, group)


def plam(positions, normals, features, group, params: PointMetaBlock) -> Tensor:
    if normals is None:
        raise ValueError("PLAM requires normals")
    return params(positions, normals, features, group)


def idw_weights(query_positions, support_positions, k: int, epsilon: float = 1e-8):
    """Constant inverse-distance weights and indices for fixed geometry: (B, Q, k) each."""
    idx = batched_knn(query_positions, support_positions, k)
    b = np.arange(len(idx))[:, None, None]
    d = np.linalg.norm(support_positions[b, idx] - query_positions[:, :, None, :], axis=-1)
    w = 1.0 / (d + epsilon)
    return idx, w / w.sum(axis=-1, keepdims=True)


def interpolate_fixed(features, idx, weights) -> Tensor:
    """Differentiable (in features) weighted gather with precomputed weights."""
    features = as_tensor(features)
    w = Tensor(np.asarray(weights, dtype=features.dtype)[..., None])
    return tsum(gather(features, idx) * w, axis=2)


def interpolate_at(query: Tensor, support_positions, support_features, k: int, epsilon: float = 1e-8) -> Tensor:
    """Inverse-distance interpolation differentiable in both the query positions and features."""
    from .numerics import div, norm

    query = as_tensor(query)
    b, q, _ = query.shape
    idx = batched_knn(query.data, support_positions, k)
    bi = np.arange(b)[:, None, None]
    pk = Tensor(np.asarray(support_positions[bi, idx], dtype=query.dtype))
    d = norm(reshape(query, (b, q, 1, 3)) - pk, axis=-1)
    w = div(1.0, d + epsilon)
    w = w / tsum(w, axis=-1, keepdims=True)
    return tsum(gather(as_tensor(support_features), idx) * reshape(w, (b, q, k, 1)), axis=2)
