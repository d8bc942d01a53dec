import numpy as np
import pytest

from oracles import idw_oracle, mlp_oracle, randomize
from pdnet import network as nw
from pdnet.gradsuite import network_grad_check
from pdnet.numerics import AdamW, cross_entropy_label_smoothing


def small_cfg(**kw):
    base = dict(stem_width=8, blocks=(1, 1, 1, 1), reference_count=8, neighbor_k=8, n_points=128,
                num_classes=3, normal_k=8, expansion=2, head_widths=(16, 16))
    base.update(kw)
    return nw.NetworkConfig.from_variant("pdnet-l", **base)


def clouds(seed, count, n=128):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (n, 3)) for _ in range(count)]


def batch_for(cfg, pts, normals=None):
    normals = normals or [None] * len(pts)
    return nw.stack_plans([nw.plan_cloud(p, q, cfg) for p, q in zip(pts, normals)])


def pdnet_s_parameter_formula(c=32, classes=4, head=(512, 256)):
    """Closed-form parameter count of PDNet-S built from layer shapes."""
    def lin(i, o):
        return i * o + o

    total = lin(3, c)
    widths = [c * 2 ** i for i in range(4)]
    prev = c
    for w in widths:
        total += lin(prev + 3, w) + 2 * (lin(3, w) + lin(w, w))
        prev = w
    dims = [widths[-1], *head, classes]
    return total + sum(lin(a, b) for a, b in zip(dims, dims[1:]))


# -- configuration --------------------------------------------------------

def test_variant_defaults():
    s, l, x = (nw.NetworkConfig.from_variant(v) for v in ("pdnet-s", "pdnet-l", "pdnet-xxl"))
    assert (s.stem_width, s.blocks) == (32, (0, 0, 0, 0))
    assert (l.stem_width, l.blocks) == (32, (2, 4, 2, 2))
    assert (x.stem_width, x.blocks) == (64, (4, 8, 4, 4))
    assert l.reference_count == 32 and l.stage_points == (512, 128, 32, 8)
    assert l.stage_widths == (32, 64, 128, 256)
    with pytest.raises(nw.ConfigError):
        nw.NetworkConfig.from_variant("pdnet-m")


@pytest.mark.parametrize("bad", [
    dict(task="det"), dict(blocks=(1, 1, 1)), dict(strides=(1, 4, 4, 0)), dict(n_points=500),
    dict(combine="stacked"), dict(ref_init="grid"), dict(pdam_stages=(5,)), dict(normalization="bn"),
    dict(normal_k=2), dict(num_classes=0),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(nw.ConfigError):
        nw.NetworkConfig.from_variant("pdnet-l", **bad).validate()


def test_manifest_round_trip():
    cfg = small_cfg(task="seg", combine="successive", use_ene=False, epsilon=1e-7)
    mapping = dict(line.split("=", 1) for line in cfg.to_manifest().splitlines())
    back = nw.NetworkConfig.from_mapping({k.removeprefix("network."): v for k, v in mapping.items()})
    assert back == cfg
    with pytest.raises(nw.ConfigError):
        nw.NetworkConfig.from_mapping({"widths": "3"})
    with pytest.raises(nw.ConfigError):
        nw.NetworkConfig.from_mapping({"stem_width": "wide"})


def test_ablation_mapping():
    cfg = nw.NetworkConfig.from_variant("pdnet-l")
    assert nw.apply_ablation(cfg, "plam-only").pdam_stages == ()
    assert nw.apply_ablation(cfg, "no-ene").use_ene is False
    assert nw.apply_ablation(cfg, "random-init").ref_init == "random"
    assert nw.apply_ablation(cfg, None) is cfg
    with pytest.raises(nw.ConfigError):
        nw.apply_ablation(cfg, "no-offsets")


# -- structure ------------------------------------------------------------

def test_block_census_per_variant():
    s = nw.build(nw.NetworkConfig.from_variant("pdnet-s"))
    assert nw.block_census(s) == [dict(pdsa=1, plam=0, pdam=0)] * 4
    l = nw.build(nw.NetworkConfig.from_variant("pdnet-l"))
    assert [(r["plam"], r["pdam"]) for r in nw.block_census(l)] == [(2, 0), (4, 0), (2, 2), (2, 2)]
    po = nw.build(nw.apply_ablation(nw.NetworkConfig.from_variant("pdnet-l"), "pdam-only"))
    assert [(r["plam"], r["pdam"]) for r in nw.block_census(po)] == [(2, 0), (4, 0), (0, 2), (0, 2)]


def test_parameter_counts():
    assert nw.build(nw.NetworkConfig.from_variant("pdnet-s")).num_parameters() == pdnet_s_parameter_formula()
    # Frozen at first build by summing the parameter registry.
    assert nw.build(nw.NetworkConfig.from_variant("pdnet-l")).num_parameters() == 4_174_756
    assert nw.build(nw.NetworkConfig.from_variant("pdnet-l", task="seg")).num_parameters() == 3_998_468


def test_initialization_is_seeded():
    cfg = small_cfg()
    a, b, c = nw.build(cfg, 3), nw.build(cfg, 3), nw.build(cfg, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert any(sa[k].tobytes() != sc[k].tobytes() for k in sa if np.any(sa[k]))


def test_stage_point_counts_and_output_shapes():
    cfg = small_cfg(task="seg")
    batch = batch_for(cfg, clouds(0, 2))
    assert [p.shape[1] for p in batch.positions] == [128, 128, 32, 8, 2]
    assert [len(c[0]) for c in batch.centers] == list(cfg.stage_points)
    model = nw.build(cfg, 0)
    feats = model.encode(batch)
    assert [f.shape for f in feats] == [(2, n, w) for n, w in zip(cfg.stage_points, cfg.stage_widths)]
    assert nw.forward_segmentation(batch, model).shape == (2, 128, 3)
    cls = nw.build(small_cfg(), 0)
    assert nw.forward_classification(batch_for(small_cfg(), clouds(0, 2)), cls).shape == (2, 3)
    with pytest.raises(nw.ConfigError):
        nw.forward_classification(batch, model)
    with pytest.raises(nw.ConfigError):
        nw.forward_segmentation(batch, cls)


def test_segmentation_with_strided_first_stage():
    cfg = small_cfg(task="seg", strides=(2, 2, 2, 2), reference_count=4)
    out = nw.build(cfg, 0)(batch_for(cfg, clouds(1, 1)))
    assert out.shape == (1, 128, 3)


def test_wrong_point_count_rejected():
    with pytest.raises(nw.ConfigError, match="config expects 128"):
        nw.plan_cloud(np.zeros((100, 3)), None, small_cfg())


# -- combination and ablation identities ---------------------------------

def test_parallel_combine_oracle_and_errors():
    rng = np.random.default_rng(0)
    a, b, f = rng.standard_normal((3, 2, 5, 4))
    assert np.array_equal(nw.parallel_combine(a, b, f).data, (f + a) + b)
    z = np.zeros_like(f)
    assert np.array_equal(nw.parallel_combine(z, z, f).data, f)
    with pytest.raises(ValueError):
        nw.parallel_combine(a[:, :4], b, f)


def zero_pdam_outputs(model):
    for stage in model.stages:
        for block in stage.blocks:
            if block.pdam is not None:
                block.pdam.m.layers[-1].weight.data[...] = 0
                block.pdam.m.layers[-1].bias.data[...] = 0


@pytest.mark.parametrize("task", ["cls", "seg"])
def test_zero_pdam_branch_equals_plam_only_network(task):
    cfg = small_cfg(task=task)
    full = nw.build(cfg, 1)
    zero_pdam_outputs(full)
    plam_only = nw.build(nw.apply_ablation(cfg, "plam-only"), 1)
    batch = batch_for(cfg, clouds(2, 2))
    assert full(batch).data.tobytes() == plam_only(batch).data.tobytes()


def test_successive_wiring_runs_and_differs():
    cfg = small_cfg()
    batch = batch_for(cfg, clouds(3, 1))
    par = nw.build(cfg, 2)(batch).data
    seq = nw.build(nw.apply_ablation(cfg, "successive"), 2)(batch).data
    assert par.shape == seq.shape and not np.array_equal(par, seq)


# -- feature propagation --------------------------------------------------

def test_feature_propagation_matches_oracle():
    rng = np.random.default_rng(4)
    cpos, fpos = rng.uniform(-1, 1, (1, 6, 3)), rng.uniform(-1, 1, (1, 20, 3))
    cf, sf = rng.standard_normal((1, 6, 5)), rng.standard_normal((1, 20, 3))
    fp = randomize(nw.FeaturePropagation(5, 3, 4), 4)
    out = nw.feature_propagation(cpos, cf, fpos, sf, fp).data
    up = idw_oracle(fpos[0], cpos[0], cf[0], 3)
    ref = [mlp_oracle(list(up[i]) + list(sf[0, i]), fp.mlp) for i in range(20)]
    assert np.max(np.abs(out[0] - np.array(ref))) < 1e-10


def test_feature_propagation_trivial_cases():
    rng = np.random.default_rng(5)
    fpos = rng.uniform(-1, 1, (1, 10, 3))
    feats = rng.standard_normal((1, 10, 4))
    fp = nw.FeaturePropagation(4, 4, 4)
    idx, w = nw.idw_weights(fpos, fpos, 3)
    up = nw.interpolate_fixed(feats, idx, w).data
    assert np.allclose(up, feats, rtol=1e-4)
    idx1, w1 = nw.idw_weights(fpos, fpos[:, :1], 1)
    assert np.array_equal(nw.interpolate_fixed(feats[:, :1], idx1, w1).data, np.repeat(feats[:, :1], 10, axis=1))
    with pytest.raises(ValueError, match="skip"):
        fp(feats, None, idx, w)


# -- symmetry and determinism --------------------------------------------

def test_classification_duplicate_and_permutation_invariance():
    cfg = small_cfg()
    model = nw.build(cfg, 6)
    pts = clouds(6, 1)[0]
    nrm = nw.geometry.estimate_normals(pts, cfg.normal_k)
    dup = model(batch_for(cfg, [pts, pts], [nrm, nrm])).data
    assert dup[0].tobytes() == dup[1].tobytes()
    perm = np.random.default_rng(6).permutation(128)
    start = int(np.argmin(perm))  # the permuted position of original point 0
    moved = nw.stack_plans([nw.plan_cloud(pts[perm], nrm[perm], cfg, start=start)])
    assert np.allclose(model(moved).data[0], dup[0], rtol=0, atol=1e-10)


def test_training_steps_are_deterministic():
    cfg = small_cfg(n_points=64, reference_count=4)
    pts = clouds(7, 4, n=64)
    labels = np.array([0, 1, 2, 1])

    def run():
        model = nw.build(cfg, 9)
        opt = AdamW(model.named_parameters(), lr=1e-3)
        batch = batch_for(cfg, pts)
        losses = []
        for _ in range(10):
            model.zero_grad()
            loss = cross_entropy_label_smoothing(model(batch), labels)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        return losses

    a, b = run(), run()
    assert a == b and a[-1] < a[0]


@pytest.mark.parametrize("task", ["cls", "seg"])
def test_network_end_to_end_gradcheck(task):
    report = network_grad_check(task, seed=0)
    assert sum(report.coords_checked.values()) == 256
    assert report.worst < 1e-4, report.max_rel_error
