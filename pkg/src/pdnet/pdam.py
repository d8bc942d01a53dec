"""Point deformable aggregation.

A stage-global set of R reference points is initialized by farthest point
sampling, shifted by offsets predicted from all point features, and
described by features interpolated at the shifted positions. Every query
point then max-pools over the R modulated reference features plus relative
position (and optionally normal) embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .blocks import RESIDUAL_GAIN, NormalEmbedding, PositionEncoding, interpolate_at
from .numerics import (
    MLP,
    Linear,
    Module,
    Tensor,
    as_tensor,
    max_pool_set,
    mean,
    norm,
    relu,
    reshape,
    sigmoid,
)

REF_INITS = ("fps", "random", "center")


@dataclass
class ReferenceSet:
    initial_positions: np.ndarray  # (B, R, 3)
    offsets: Tensor  # (B, R, 3)
    deformed_positions: Tensor  # (B, R, 3)
    modulation: Tensor  # (B, R)
    features: Tensor  # (B, R, C)
    normals: Tensor | None = None  # (B, R, 3)


def init_reference_points(positions, count: int, start: int = 0) -> np.ndarray:
    """FPS-selected reference positions for one cloud (N, 3) -> (R, 3)."""
    positions = np.asarray(positions, dtype=np.float64)
    if count > len(positions):
        raise ValueError("reference count exceeds point count")
    return positions[geometry.farthest_point_sample(positions, count, start)]


def reference_points(positions, count: int, method: str = "fps", seed: int = 0) -> np.ndarray:
    """Batched reference initialization: (B, N, 3) -> (B, R, 3)."""
    b, n, _ = positions.shape
    if count > n:
        raise ValueError("reference count exceeds point count")
    if method == "fps":
        return np.stack([init_reference_points(p, count) for p in positions])
    if method == "random":
        idx = np.random.default_rng(seed).choice(n, count, replace=False)
        return positions[:, idx]
    if method == "center":
        return np.repeat(positions.mean(axis=1, keepdims=True), count, axis=1)
    raise ValueError(f"unknown reference init {method!r}")


class OffsetNetwork(Module):
    """Two linear layers over the channel-averaged point vector (N -> N -> out)."""

    def __init__(self, n_points: int, out: int, zero_last: bool = False):
        self.n_points = n_points
        self.fc1 = Linear(n_points, n_points)
        self.fc2 = Linear(n_points, out, init="zeros" if zero_last else "he")

    def __call__(self, features) -> Tensor:
        features = as_tensor(features)
        if features.shape[-2] != self.n_points:
            raise ValueError(
                f"stage point count mismatch: expected {self.n_points}, got {features.shape[-2]}")
        pooled = mean(features, axis=-1)
        return self.fc2(relu(self.fc1(pooled)))


def offset_generation(features, params: OffsetNetwork) -> Tensor:
    """Features (B, N, C) -> offsets (B, R, 3)."""
    out = params(features)
    return reshape(out, out.shape[:-1] + (out.shape[-1] // 3, 3))


def modulation_scalars(features, params: OffsetNetwork) -> Tensor:
    """Features (B, N, C) -> per-reference gates (B, R) in (0, 1)."""
    return sigmoid(params(features))


def deform_and_sample(positions, features, reference, offsets, interp_k: int = 3,
                      epsilon: float = 1e-8, normals=None) -> ReferenceSet:
    """Shift references by ``offsets`` and interpolate features (and normals) there."""
    offsets = as_tensor(offsets)
    reference = np.asarray(reference, dtype=offsets.dtype)
    if interp_k > positions.shape[1]:
        raise ValueError("interp_k exceeds point count")
    deformed = offsets + Tensor(reference)
    feats = interpolate_at(deformed, positions, features, interp_k, epsilon)
    nr = None
    if normals is not None:
        raw = interpolate_at(deformed, positions, Tensor(np.asarray(normals, dtype=offsets.dtype)),
                             interp_k, epsilon)
        nr = raw / norm(raw, axis=-1, keepdims=True)
    return ReferenceSet(reference, offsets, deformed, None, feats, nr)


class PDAM(Module):
    """Deformable aggregation over R stage-global references.

    ``use_normals`` adds the normal embedding of each deformed reference to
    the aggregand; without it the block is the plain offset/modulation form.
    """

    def __init__(self, channels: int, n_points: int, references: int = 32, interp_k: int = 3,
                 use_normals: bool = True, ref_init: str = "fps", expansion: int = 4,
                 epsilon: float = 1e-8, ref_seed: int = 0):
        if references > n_points:
            raise ValueError("reference count exceeds stage point count")
        if ref_init not in REF_INITS:
            raise ValueError(f"unknown reference init {ref_init!r}")
        self.channels = channels
        self.n_points = n_points
        self.references = references
        self.interp_k = min(interp_k, n_points)
        self.ref_init = ref_init
        self.ref_seed = ref_seed
        self.epsilon = epsilon
        self.ogn = OffsetNetwork(n_points, 3 * references, zero_last=True)
        self.modulation = OffsetNetwork(n_points, references)
        self.pe = PositionEncoding(channels)
        self.ne = NormalEmbedding(channels) if use_normals else None
        self.m = MLP(channels, [(channels * expansion, "relu"), (channels, "none")], last_gain=RESIDUAL_GAIN)
        self.interpolations = 0

    def sample_references(self, positions, normals, features) -> ReferenceSet:
        ref0 = reference_points(positions, self.references, self.ref_init, self.ref_seed)
        refs = deform_and_sample(positions, features, ref0, offset_generation(features, self.ogn),
                                 self.interp_k, self.epsilon,
                                 normals if self.ne is not None else None)
        refs.modulation = modulation_scalars(features, self.modulation)
        self.interpolations += refs.features.shape[0] * refs.features.shape[1]
        return refs

    def delta(self, positions, normals, features, refs: ReferenceSet | None = None) -> Tensor:
        features = as_tensor(features)
        if self.ne is not None and normals is None:
            raise ValueError("PDAM with normal embedding requires normals")
        if refs is None:
            refs = self.sample_references(positions, normals, features)
        b, n, _ = positions.shape
        r, c = self.references, self.channels
        member = refs.features * reshape(refs.modulation, (b, r, 1))
        rel = reshape(refs.deformed_positions, (b, 1, r, 3)) - Tensor(
            np.asarray(positions[:, :, None, :], dtype=features.dtype))
        x = reshape(member, (b, 1, r, c)) + self.pe(rel)
        if self.ne is not None:
            x = x + reshape(self.ne(refs.normals), (b, 1, r, c))
        return self.m(max_pool_set(x))

    def __call__(self, positions, normals, features) -> Tensor:
        features = as_tensor(features)
        return features + self.delta(positions, normals, features)


def pdam_forward(positions, normals, features, params: PDAM) -> Tensor:
    return params(positions, normals, features)
