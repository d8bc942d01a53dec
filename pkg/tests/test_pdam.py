import math

import numpy as np
import pytest

from oracles import fps_oracle, idw_oracle, idw_point, linear_oracle, mlp_oracle, randomize, vadd, vmax
from pdnet import geometry, pdam as pd
from pdnet.gradsuite import ogn_gradient_flow
from pdnet.numerics import Tensor, tsum


def scene(seed, b=1, n=16, c=8):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, (b, n, 3))
    nrm = rng.standard_normal((b, n, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    return pos, nrm, rng.standard_normal((b, n, c))


def ogn_oracle(feats, net):
    """Channel mean, fc1 + ReLU, fc2 on one cloud (N, C)."""
    v = [sum(row) / len(row) for row in feats]
    h = [max(x, 0.0) for x in linear_oracle(v, net.fc1)]
    return linear_oracle(h, net.fc2)


def pdam_oracle(blk, pos, nrm, feats):
    """Straight-line scalar evaluation of the full deformable aggregation on one cloud."""
    n, r = len(pos), blk.references
    ref0 = [pos[j] for j in fps_oracle(pos, r, 0)]
    off = ogn_oracle(feats, blk.ogn)
    mod = [1.0 / (1.0 + math.exp(-x)) for x in ogn_oracle(feats, blk.modulation)]
    deformed = [[ref0[q][a] + off[3 * q + a] for a in range(3)] for q in range(r)]
    fr = [idw_point(p, pos, feats, blk.interp_k) for p in deformed]
    nr = []
    if blk.ne is not None:
        for p in deformed:
            raw = idw_point(p, pos, nrm, blk.interp_k)
            length = math.sqrt(sum(x * x for x in raw))
            nr.append([x / length for x in raw])
    out = np.zeros_like(feats)
    for i in range(n):
        members = []
        for q in range(r):
            m = vadd([mod[q] * x for x in fr[q]],
                     mlp_oracle([deformed[q][a] - pos[i][a] for a in range(3)], blk.pe.mlp))
            if blk.ne is not None:
                m = vadd(m, mlp_oracle(nr[q], blk.ne.mlp))
            members.append(m)
        out[i] = vadd(feats[i], mlp_oracle(vmax(members), blk.m))
    return out


# -- reference initialization --------------------------------------------

def test_reference_init_examples():
    pts = np.random.default_rng(0).uniform(-1, 1, (12, 3))
    full = pd.init_reference_points(pts, 12)
    assert sorted(map(tuple, full)) == sorted(map(tuple, pts))
    line = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert np.array_equal(pd.init_reference_points(line, 2), line[[0, 2]])
    with pytest.raises(ValueError):
        pd.init_reference_points(line, 4)


@pytest.mark.parametrize("seed", range(5))
def test_reference_init_is_fps_composition(seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (40, 3))
    assert np.array_equal(pd.init_reference_points(pts, 9), pts[fps_oracle(pts, 9, 0)])
    batch = np.stack([pts, pts[::-1]])
    refs = pd.reference_points(batch, 9)
    assert np.array_equal(refs[1], batch[1][geometry.farthest_point_sample(batch[1], 9)])


def test_reference_init_alternatives():
    pos, _, _ = scene(1, b=2)
    rand = pd.reference_points(pos, 4, "random", seed=3)
    assert rand.shape == (2, 4, 3) and np.array_equal(rand, pd.reference_points(pos, 4, "random", seed=3))
    center = pd.reference_points(pos, 4, "center")
    assert np.allclose(center, pos.mean(axis=1, keepdims=True))
    with pytest.raises(ValueError):
        pd.reference_points(pos, 4, "grid")


# -- offsets and modulation -----------------------------------------------

def test_offsets_zero_with_zero_last_layer_and_zero_features():
    _, _, feats = scene(2)
    net = pd.OffsetNetwork(16, 12, zero_last=True)
    randomize(net.fc1, 2)
    assert np.array_equal(pd.offset_generation(feats, net).data, np.zeros((1, 4, 3)))
    randomize(net, 2)
    for layer in (net.fc1, net.fc2):
        layer.bias.data[...] = 0
    assert np.array_equal(pd.offset_generation(np.zeros_like(feats), net).data, np.zeros((1, 4, 3)))


def test_offsets_and_modulation_match_scalar_oracle():
    _, _, feats = scene(3)
    ogn = randomize(pd.OffsetNetwork(16, 12), 3)
    off = pd.offset_generation(feats, ogn).data
    assert off.shape == (1, 4, 3)
    assert np.max(np.abs(off.reshape(-1) - np.array(ogn_oracle(feats[0], ogn)))) < 1e-10
    modnet = randomize(pd.OffsetNetwork(16, 4), 4)
    mod = pd.modulation_scalars(feats, modnet).data
    ref = [1.0 / (1.0 + math.exp(-x)) for x in ogn_oracle(feats[0], modnet)]
    assert np.max(np.abs(mod[0] - ref)) < 1e-10


def test_modulation_range_examples():
    _, _, feats = scene(4)
    net = pd.OffsetNetwork(16, 4)
    assert np.array_equal(pd.modulation_scalars(feats, net).data, np.full((1, 4), 0.5))
    randomize(net, 4)
    net.fc2.bias.data[...] = 40.0
    assert np.all(pd.modulation_scalars(feats, net).data > 1 - 1e-12)
    randomize(net, 5, scale=3.0)
    m = pd.modulation_scalars(feats * 10, net).data
    assert np.all((m > 0) & (m <= 1))


def test_offset_network_point_count_mismatch():
    with pytest.raises(ValueError, match="stage point count mismatch"):
        pd.OffsetNetwork(16, 6)(np.zeros((1, 15, 4)))


# -- deformation and sampling ---------------------------------------------

def test_deform_sample_on_input_point_and_midpoint():
    pos, _, feats = scene(5)
    feats = np.abs(feats) + 1
    refs = pd.deform_and_sample(pos, feats, pos[:, [6]], np.zeros((1, 1, 3)), 3)
    assert np.allclose(refs.features.data[0, 0], feats[0, 6], rtol=1e-4)
    two = np.array([[[1.0, 0, 0], [-1.0, 0, 0]]])
    mid = pd.deform_and_sample(two, np.array([[[0.0], [1.0]]]), np.array([[[0.0, 0.5, 0]]]),
                               np.array([[[0.0, -0.5, 0]]]), 2)
    assert mid.features.data[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert np.array_equal(mid.deformed_positions.data, np.zeros((1, 1, 3)))


@pytest.mark.parametrize("seed", range(4))
def test_deform_sample_matches_idw_oracle(seed):
    pos, _, feats = scene(seed, n=30, c=5)
    rng = np.random.default_rng(seed)
    ref, off = rng.uniform(-1, 1, (1, 6, 3)), rng.normal(0, 0.2, (1, 6, 3))
    refs = pd.deform_and_sample(pos, feats, ref, off, 3)
    assert np.array_equal(refs.deformed_positions.data, ref + off)
    assert np.max(np.abs(refs.features.data[0] - idw_oracle(ref[0] + off[0], pos[0], feats[0], 3))) < 1e-12


def test_deform_sample_differentiable_in_offsets():
    pos, _, feats = scene(6)
    off = Tensor(np.random.default_rng(6).normal(0, 0.2, (1, 3, 3)), requires_grad=True)
    ref = pos[:, :3] + 0.05
    tsum(pd.deform_and_sample(pos, feats, ref, off, 3).features).backward()
    assert np.abs(off.grad).max() > 0
    with pytest.raises(ValueError):
        pd.deform_and_sample(pos, feats, ref, off, 17)


# -- full module ----------------------------------------------------------

@pytest.mark.parametrize("use_normals", [True, False])
def test_pdam_forward_matches_scalar_oracle(use_normals):
    pos, nrm, feats = scene(7)
    blk = randomize(pd.PDAM(8, 16, references=4, use_normals=use_normals), 7)
    out = pd.pdam_forward(pos, nrm, feats, blk).data
    assert np.max(np.abs(out[0] - pdam_oracle(blk, pos[0], nrm[0], feats[0]))) < 1e-10


def test_pdam_fixed_reference_regime():
    """Zero offsets and unit modulation aggregate over the plain FPS references."""
    pos, nrm, feats = scene(8)
    blk = randomize(pd.PDAM(8, 16, references=4), 8)
    blk.ogn.fc2.weight.data[...] = 0
    blk.ogn.fc2.bias.data[...] = 0
    blk.modulation.fc2.weight.data[...] = 0
    blk.modulation.fc2.bias.data[...] = 50.0  # sigmoid rounds to exactly 1.0
    refs = blk.sample_references(pos, nrm, Tensor(feats))
    assert np.array_equal(refs.deformed_positions.data, refs.initial_positions)
    assert np.array_equal(refs.initial_positions[0], pos[0][fps_oracle(pos[0], 4, 0)])
    assert np.all(refs.modulation.data == 1.0)
    assert np.max(np.abs(blk(pos, nrm, feats).data[0] - pdam_oracle(blk, pos[0], nrm[0], feats[0]))) < 1e-10


def test_pdam_residual_identity_and_single_reference():
    pos, nrm, feats = scene(9)
    blk = randomize(pd.PDAM(8, 16, references=4), 9)
    blk.m.layers[-1].weight.data[...] = 0
    blk.m.layers[-1].bias.data[...] = 0
    assert np.array_equal(blk(pos, nrm, feats).data, feats)
    one = randomize(pd.PDAM(8, 16, references=1), 10)
    assert np.max(np.abs(one(pos, nrm, feats).data[0] - pdam_oracle(one, pos[0], nrm[0], feats[0]))) < 1e-10


def test_pdam_reference_order_invariance():
    pos, nrm, feats = scene(11)
    blk = randomize(pd.PDAM(8, 16, references=5), 11)
    refs = blk.sample_references(pos, nrm, Tensor(feats))
    perm = [3, 0, 4, 1, 2]
    shuffled = pd.ReferenceSet(refs.initial_positions[:, perm], refs.offsets, refs.deformed_positions[:, perm],
                               refs.modulation[:, perm], refs.features[:, perm], refs.normals[:, perm])
    a = blk.delta(pos, nrm, feats, refs).data
    b = blk.delta(pos, nrm, feats, shuffled).data
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_pdam_interpolates_once_per_reference():
    pos, nrm, feats = scene(12, b=3)
    blk = randomize(pd.PDAM(8, 16, references=4), 12)
    blk.interpolations = 0
    blk(pos, nrm, feats)
    assert blk.interpolations == 3 * 4


def test_pdam_modulation_in_unit_interval():
    pos, nrm, feats = scene(13)
    blk = randomize(pd.PDAM(8, 16, references=6), 13, scale=2.0)
    m = blk.sample_references(pos, nrm, Tensor(feats * 5)).modulation.data
    assert np.all((m > 0) & (m <= 1))


def test_pdam_offset_network_receives_gradient():
    flow = ogn_gradient_flow(0)
    assert any(v > 0 for k, v in flow.items() if "fc2.weight" in k)


def test_pdam_errors():
    pos, nrm, feats = scene(14)
    with pytest.raises(ValueError):
        pd.PDAM(8, 16, references=17)
    with pytest.raises(ValueError):
        pd.PDAM(8, 16, ref_init="grid")
    with pytest.raises(ValueError, match="requires normals"):
        pd.PDAM(8, 16, references=4)(pos, None, feats)
    with pytest.raises(ValueError, match="stage point count mismatch"):
        pd.PDAM(8, 12, references=4)(pos, nrm, feats)
