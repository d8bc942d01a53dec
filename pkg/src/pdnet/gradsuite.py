"""Finite-difference gradient checks for every block on tiny random instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry
from .blocks import PDSA, InvResMLP, PointMetaBlock, SetAbstraction, batched_knn, idw_weights
from .network import FeaturePropagation, NetworkConfig, build, plan_cloud, stack_plans
from .numerics import (
    MLP,
    GradCheckReport,
    Tensor,
    grad_check,
    max_pool_set,
    reset_parameters,
    tsum,
)
from .pdam import PDAM


@dataclass
class Instance:
    positions: np.ndarray  # (B, N, 3)
    normals: np.ndarray  # (B, N, 3)
    features: Tensor  # (B, N, C)
    group: np.ndarray  # (B, N, k) self-grouping


def tiny_instance(seed: int, b: int = 2, n: int = 16, c: int = 6, k: int = 4) -> Instance:
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, (b, n, 3))
    nrm = rng.standard_normal((b, n, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    feats = Tensor(rng.standard_normal((b, n, c)), requires_grad=True)
    return Instance(pos, nrm, feats, batched_knn(pos, pos, k))


def _readout(out: Tensor, seed: int) -> Tensor:
    """Random weights turning a block output into a scalar loss."""
    return Tensor(np.random.default_rng(seed + 99).standard_normal(out.shape))


def _perturb_zero_init(module, seed: int, scale: float = 0.3) -> None:
    """Give zero-initialized weights random values so every path carries gradient."""
    rng = np.random.default_rng(seed + 7)
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data = rng.standard_normal(p.shape) * scale


def _check(module, forward, extra: dict, seed: int, tolerance: float, max_coords: int = 64) -> GradCheckReport:
    out = forward()
    w = _readout(out, seed)
    inputs = dict(extra)
    inputs.update(module.named_parameters())
    return grad_check(lambda: tsum(forward() * w), inputs, tolerance=tolerance, seed=seed,
                      max_coords=max_coords)


def _prepare(module, seed: int) -> None:
    reset_parameters(module, seed)
    _perturb_zero_init(module, seed)


def case_sa(seed, tol):
    inst = tiny_instance(seed)
    m = SetAbstraction(6, 5)
    _prepare(m, seed)
    centers = np.stack([geometry.farthest_point_sample(p, 8) for p in inst.positions])
    group = batched_knn(inst.positions[np.arange(2)[:, None], centers], inst.positions, 4)
    return _check(m, lambda: m(inst.positions, inst.features, centers, group),
                  {"features": inst.features}, seed, tol)


def case_pdsa(seed, tol):
    inst = tiny_instance(seed)
    m = PDSA(6, 5)
    _prepare(m, seed)
    centers = np.stack([geometry.farthest_point_sample(p, 8) for p in inst.positions])
    group = batched_knn(inst.positions[np.arange(2)[:, None], centers], inst.positions, 4)
    return _check(m, lambda: m(inst.positions, inst.normals, inst.features, centers, group),
                  {"features": inst.features}, seed, tol)


def case_invres(seed, tol):
    inst = tiny_instance(seed)
    m = InvResMLP(6, expansion=2)
    _prepare(m, seed)
    return _check(m, lambda: m(inst.positions, inst.features, inst.group), {"features": inst.features}, seed, tol)


def case_pointmeta(seed, tol):
    inst = tiny_instance(seed)
    m = PointMetaBlock(6, expansion=2)
    _prepare(m, seed)
    return _check(m, lambda: m(inst.positions, None, inst.features, inst.group),
                  {"features": inst.features}, seed, tol)


def case_plam(seed, tol):
    inst = tiny_instance(seed)
    m = PointMetaBlock(6, expansion=2, use_normals=True)
    _prepare(m, seed)
    return _check(m, lambda: m(inst.positions, inst.normals, inst.features, inst.group),
                  {"features": inst.features}, seed, tol)


def _pdam_case(seed, tol, use_normals):
    inst = tiny_instance(seed)
    m = PDAM(6, 16, references=4, interp_k=3, use_normals=use_normals, expansion=2)
    _prepare(m, seed)
    return _check(m, lambda: m(inst.positions, inst.normals if use_normals else None, inst.features),
                  {"features": inst.features}, seed, tol)


def case_pdam_offsets(seed, tol):
    """Deformable aggregation with offsets/modulation only (no normal embedding)."""
    return _pdam_case(seed, tol, False)


def case_pdam_normals(seed, tol):
    """Deformable aggregation with the normal embedding of each reference."""
    return _pdam_case(seed, tol, True)


def case_fp(seed, tol):
    rng = np.random.default_rng(seed)
    fine = rng.uniform(-1, 1, (2, 16, 3))
    coarse = fine[:, :6]
    cf = Tensor(rng.standard_normal((2, 6, 5)), requires_grad=True)
    sf = Tensor(rng.standard_normal((2, 16, 4)), requires_grad=True)
    idx, w = idw_weights(fine, coarse, 3)
    m = FeaturePropagation(5, 4, 6)
    _prepare(m, seed)
    return _check(m, lambda: m(cf, sf, idx, w), {"coarse": cf, "skip": sf}, seed, tol)


def case_cls_head(seed, tol):
    inst = tiny_instance(seed)
    m = MLP(6, [(8, "relu"), (7, "relu"), (4, "none")])
    _prepare(m, seed)
    return _check(m, lambda: m(max_pool_set(inst.features)), {"features": inst.features}, seed, tol)


def case_seg_head(seed, tol):
    inst = tiny_instance(seed)
    m = MLP(6, [(6, "relu"), (4, "none")])
    _prepare(m, seed)
    return _check(m, lambda: m(inst.features), {"features": inst.features}, seed, tol)


def tiny_network(task: str, seed: int, n_points: int = 64, width: int = 8, batch: int = 2):
    """A one-block-per-stage PDNet-L with every zero-initialized weight perturbed."""
    cfg = NetworkConfig(variant="pdnet-l", stem_width=width, blocks=(1, 1, 1, 1), reference_count=4,
                        neighbor_k=8, strides=(1, 2, 2, 2), n_points=n_points, task=task, num_classes=3,
                        normal_k=8, expansion=2, head_widths=(16, 16))
    model = build(cfg, seed)
    _perturb_zero_init(model, seed)
    rng = np.random.default_rng(seed)
    plans = [plan_cloud(rng.uniform(-1, 1, (n_points, 3)), None, cfg) for _ in range(batch)]
    return model, stack_plans(plans)


def network_grad_check(task: str, seed: int = 0, tolerance: float = 1e-4, count: int = 256,
                       n_points: int = 64, width: int = 8) -> GradCheckReport:
    """End-to-end check on ``count`` parameter coordinates drawn uniformly from the whole model."""
    model, batch = tiny_network(task, seed, n_points, width)
    named = dict(model.named_parameters())
    sizes = np.array([p.data.size for p in named.values()])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(seed + 1).choice(offsets[-1], count, replace=False)
    owner = np.searchsorted(offsets, picks, side="right") - 1
    coords = {name: picks[owner == i] - offsets[i] for i, name in enumerate(named)}
    w = _readout(model(batch), seed)
    return grad_check(lambda: tsum(model(batch) * w), named, tolerance=tolerance, coords=coords)


def case_network_cls(seed, tol):
    return network_grad_check("cls", seed, tol)


def case_network_seg(seed, tol):
    return network_grad_check("seg", seed, tol)


CASES: dict[str, Callable[[int, float], GradCheckReport]] = {
    "sa": case_sa,
    "invresmlp": case_invres,
    "pointmeta": case_pointmeta,
    "plam": case_plam,
    "pdsa": case_pdsa,
    "pdam": case_pdam_offsets,
    "pdam+ene": case_pdam_normals,
    "fp": case_fp,
    "cls-head": case_cls_head,
    "seg-head": case_seg_head,
}

# Whole-network checks (N=64, C=8, 256 sampled coordinates). Slower than
# the block table, so opt-in. With many ReLU and max-pool switches a 1e-5
# step can straddle a kink on some instances; one-sided differences at a
# smaller step then confirm the analytic value.
NETWORK_CASES: dict[str, Callable[[int, float], GradCheckReport]] = {
    "network-cls": case_network_cls,
    "network-seg": case_network_seg,
}


def run_suite(tolerance: float = 1e-4, seed: int = 0, names=None) -> dict[str, GradCheckReport]:
    table = {**CASES, **NETWORK_CASES}
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - set(table)
    if unknown:
        raise ValueError(f"unknown gradcheck cases: {sorted(unknown)}")
    return {name: table[name](seed, tolerance) for name in names}


def format_table(reports: dict[str, GradCheckReport]) -> str:
    lines = [f"{'block':<12} {'max_rel_err':>12} {'coords':>7}  result"]
    for name, rep in reports.items():
        lines.append(f"{name:<12} {rep.worst:>12.3e} {sum(rep.coords_checked.values()):>7}  "
                     f"{'PASS' if rep.passed else 'FAIL'}")
    return "\n".join(lines)


def ogn_gradient_flow(seed: int = 0) -> dict[str, float]:
    """Max |grad| reaching the offset network through interpolation, for a zero-initialized last layer."""
    inst = tiny_instance(seed)
    m = PDAM(6, 16, references=4, interp_k=3, use_normals=True, expansion=2)
    reset_parameters(m, seed)
    out = m(inst.positions, inst.normals, inst.features)
    w = _readout(out, seed)
    tsum(out * w).backward()
    return {name: float(np.abs(p.grad).max()) if p.grad is not None else 0.0
            for name, p in m.ogn.named_parameters()}

