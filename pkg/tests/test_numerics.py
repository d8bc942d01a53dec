import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdnet.numerics import (
    MLP,
    AdamW,
    CheckpointError,
    OptimizerState,
    Tensor,
    adamw_step,
    concat,
    cosine_lr,
    cross_entropy_label_smoothing,
    div,
    gather,
    grad_check,
    inject_backward_fault,
    linear,
    log_softmax,
    matmul,
    max_pool_set,
    mean,
    mlp,
    no_grad,
    norm,
    relu,
    reset_parameters,
    reshape,
    sigmoid,
    tsum,
)
from pdnet.numerics.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint


def rnd(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# -- linear / mlp ---------------------------------------------------------

def test_linear_identity_and_bias():
    x = rnd(0, 5, 3)
    assert np.array_equal(linear(x, np.eye(3), np.zeros(3)).data, x)
    b = np.array([1.0, -2.0])
    assert np.array_equal(linear(x, np.zeros((3, 2)), b).data, np.tile(b, (5, 1)))


def test_linear_matches_triple_loop():
    x, w, b = rnd(1, 4, 3), rnd(2, 3, 2), rnd(3, 2)
    out = linear(x, w, b).data
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            ref[i, j] = b[j] + sum(x[i, t] * w[t, j] for t in range(3))
    assert np.max(np.abs(out - ref)) < 1e-12


def test_linear_shape_errors():
    with pytest.raises(ValueError):
        linear(rnd(0, 2, 3), rnd(0, 4, 2), np.zeros(2))
    with pytest.raises(ValueError):
        linear(rnd(0, 2, 3), rnd(0, 3, 2), np.zeros(3))


def test_mlp_scalar_oracle_and_relu_zeros():
    x = rnd(4, 6, 3)
    p = [(rnd(5, 3, 4), rnd(6, 4)), (rnd(7, 4, 2), rnd(8, 2))]
    out = mlp(x, [(4, "relu"), (2, "none")], p).data
    ref = np.zeros((6, 2))
    for n in range(6):
        h = [max(0.0, p[0][1][j] + sum(x[n, i] * p[0][0][i, j] for i in range(3))) for j in range(4)]
        for j in range(2):
            ref[n, j] = p[1][1][j] + sum(h[i] * p[1][0][i, j] for i in range(4))
    assert np.max(np.abs(out - ref)) < 1e-10
    neg = mlp(-np.abs(x), [(3, "relu")], [(np.eye(3), np.zeros(3))]).data
    assert np.array_equal(neg, np.zeros_like(neg))
    with pytest.raises(ValueError):
        mlp(x, [], [])


def test_mlp_module_weights_shared_across_points():
    m = MLP(3, [(5, "relu"), (2, "sigmoid")])
    reset_parameters(m, 0)
    x = rnd(9, 2, 7, 3)
    full = m(x).data
    single = m(x[1, 4]).data
    assert np.array_equal(full[1, 4], single)


# -- max pool / sigmoid ---------------------------------------------------

def test_max_pool_examples_and_oracle():
    x = rnd(10, 3, 1, 4)
    assert np.array_equal(max_pool_set(x).data, x[:, 0])
    y = rnd(11, 2, 5, 3)
    out = max_pool_set(y).data
    for g in range(2):
        for c in range(3):
            assert out[g, c] == max(y[g, m, c] for m in range(5))
    with pytest.raises(ValueError):
        max_pool_set(np.zeros((2, 0, 3)))


@given(st.integers(0, 10_000))
def test_max_pool_permutation_invariant_and_routing(seed):
    y = np.round(rnd(seed, 3, 6, 4), 1)  # rounding creates ties
    perm = np.random.default_rng(seed).permutation(6)
    assert np.array_equal(max_pool_set(y).data, max_pool_set(y[:, perm]).data)
    t = Tensor(y, requires_grad=True)
    tsum(max_pool_set(t)).backward()
    assert np.array_equal(t.grad.sum(axis=1), np.ones((3, 4)))
    assert set(np.unique(t.grad)) <= {0.0, 1.0}
    first = np.argmax(y, axis=1)
    assert np.array_equal(np.argmax(t.grad, axis=1), first)


def test_sigmoid_examples():
    assert sigmoid(np.array(0.0)).data == 0.5
    assert abs(sigmoid(np.array(40.0)).data - 1.0) < 1e-12
    x = rnd(12, 50) * 5
    ref = np.array([1.0 / (1.0 + math.exp(-v)) for v in x])
    assert np.max(np.abs(sigmoid(x).data - ref)) <= 1e-15
    ext = sigmoid(np.array([-30.0, 30.0])).data
    assert np.all(ext > 0) and np.all(ext < 1)


# -- loss -----------------------------------------------------------------

def test_cross_entropy_uniform_and_confident():
    logits = np.zeros((3, 5))
    assert cross_entropy_label_smoothing(logits, [0, 1, 4], 0.0).data == pytest.approx(math.log(5), abs=1e-15)
    conf = np.array([[60.0, 0.0, 0.0]])
    assert cross_entropy_label_smoothing(conf, [0], 0.0).data < 1e-20


def test_cross_entropy_scalar_oracle():
    logits, labels, eps = rnd(13, 4, 3), [2, 0, 1, 1], 0.1
    total = 0.0
    for i in range(4):
        z = logits[i]
        lse = math.log(sum(math.exp(v) for v in z))
        for c in range(3):
            q = 1 - eps if c == labels[i] else eps / 2
            total += -q * (z[c] - lse)
    got = cross_entropy_label_smoothing(logits, labels, eps).data
    assert abs(got - total / 4) < 1e-10


def test_cross_entropy_invalid_label():
    with pytest.raises(ValueError):
        cross_entropy_label_smoothing(np.zeros((2, 3)), [0, 3], 0.1)


@given(st.integers(0, 10_000), st.floats(0.0, 0.9))
def test_cross_entropy_non_negative(seed, eps):
    logits = rnd(seed, 5, 4) * 10
    labels = np.random.default_rng(seed).integers(0, 4, 5)
    assert cross_entropy_label_smoothing(logits, labels, eps).data >= 0


# -- optimizer / schedule -------------------------------------------------

def test_adamw_trivial_cases():
    p = {"w": rnd(14, 3)}
    out, _ = adamw_step(p, {"w": np.zeros(3)}, OptimizerState(weight_decay=0.0), lr=1e-3)
    assert np.array_equal(out["w"], p["w"])
    out, _ = adamw_step(p, {"w": np.zeros(3)}, OptimizerState(weight_decay=0.1), lr=1.0)
    assert np.allclose(out["w"], 0.9 * p["w"], rtol=1e-15)


def test_adamw_matches_scalar_state_machine():
    b1, b2, eps, wd, lr, g = 0.9, 0.999, 1e-8, 1e-2, 0.05, 0.3
    p, m, v = 1.5, 0.0, 0.0
    params, state = {"w": np.array([1.5])}, OptimizerState(lr, (b1, b2), eps, wd)
    for t in range(1, 4):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params, state = adamw_step(params, {"w": np.array([g])}, state, lr)
    assert abs(params["w"][0] - p) < 1e-12
    assert state.step == 3


def test_adamw_shape_error_and_determinism():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptimizerState(), 1e-3)
    a, _ = adamw_step({"w": np.ones(4)}, {"w": np.arange(4.0)}, OptimizerState(), 1e-3)
    b, _ = adamw_step({"w": np.ones(4)}, {"w": np.arange(4.0)}, OptimizerState(), 1e-3)
    assert a["w"].tobytes() == b["w"].tobytes()


def test_adamw_module_wrapper_moves_against_gradient():
    m = MLP(2, [(1, "none")])
    reset_parameters(m, 0)
    opt = AdamW(m.named_parameters(), lr=0.1, weight_decay=0.0)
    before = m.layers[0].bias.data.copy()
    tsum(m(np.ones((4, 2)))).backward()
    opt.step()
    assert m.layers[0].bias.data[0] < before[0]


def test_cosine_lr_examples():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-14)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-3)
    lrs = [cosine_lr(s, 50, 1.0) for s in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# -- autodiff -------------------------------------------------------------

def test_grad_check_quadratic_and_constant():
    x = Tensor(rnd(15, 10), requires_grad=True)
    rep = grad_check(lambda: tsum(x * x), {"x": x})
    assert rep.worst < 1e-7
    y = Tensor(rnd(16, 4), requires_grad=True)
    rep = grad_check(lambda: tsum(Tensor(np.ones(4))), {"y": y})
    assert rep.worst == 0.0 and rep.max_abs_grad["y"] == 0.0


def test_grad_check_rejects_non_scalar():
    x = Tensor(rnd(0, 3), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x * 2, {"x": x})


def test_grad_check_samples_at_least_64_coords():
    x = Tensor(rnd(17, 20, 20), requires_grad=True)
    rep = grad_check(lambda: tsum(sigmoid(x)), {"x": x})
    assert rep.coords_checked["x"] >= 64


OPS = {
    "add": lambda a, b: tsum((a + b) * (a - b)),
    "mul_div": lambda a, b: tsum(div(a * b, b * b + 2.0)),
    "matmul": lambda a, b: tsum(matmul(a, reshape(b, (4, 3))) * matmul(a, reshape(b, (4, 3)))),
    "relu_sigmoid": lambda a, b: tsum(relu(a) * sigmoid(b)),
    "norm": lambda a, b: tsum(norm(a + b, axis=-1)),
    "mean_reshape": lambda a, b: tsum(mean(reshape(a * b, (2, 6)), axis=0) * 3.0),
    "concat": lambda a, b: tsum(concat([a, b * 2.0], axis=-1) * concat([b, a], axis=-1)),
    "gather": lambda a, b: tsum(gather(reshape(a, (1, 3, 4)), np.array([[[0, 2], [2, 2], [1, 0]]])) * 1.7),
    "log_softmax": lambda a, b: tsum(log_softmax(a * b, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))),
    "getitem": lambda a, b: tsum(a[:, 1:3] * b[:, :2]),
    "max": lambda a, b: tsum(max_pool_set(reshape(a + b, (3, 4, 1)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_finite_differences(name):
    a = Tensor(rnd(18, 3, 4) + 0.1, requires_grad=True)
    b = Tensor(rnd(19, 3, 4), requires_grad=True)
    rep = grad_check(lambda: OPS[name](a, b), {"a": a, "b": b})
    assert rep.passed, rep.max_rel_error


def test_norm_gradient_at_zero_is_zero():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    tsum(norm(x, axis=-1)).backward()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_backward_fault_is_detected():
    a = Tensor(rnd(20, 3, 4), requires_grad=True)
    with inject_backward_fault("relu", 1.5):
        rep = grad_check(lambda: tsum(relu(a) * a), {"a": a})
    assert not rep.passed


def test_no_grad_builds_no_graph():
    a = Tensor(rnd(21, 3), requires_grad=True)
    with no_grad():
        out = a * 2
    assert not out.requires_grad and out._parents == ()


def test_gradient_shapes_match_parameters():
    m = MLP(3, [(4, "relu"), (2, "none")])
    reset_parameters(m, 3)
    tsum(m(rnd(22, 5, 3))).backward()
    for _, p in m.named_parameters():
        assert p.grad.shape == p.shape


def test_deep_graph_backward_is_iterative():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    tsum(y).backward()
    assert np.array_equal(x.grad, np.ones(3))


# -- checkpoint -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_checkpoint_round_trip_bit_exact(seed):
    rng = np.random.default_rng(seed)
    tensors = {}
    for i in range(rng.integers(0, 5)):
        shape = tuple(rng.integers(0, 5, rng.integers(0, 4)))
        tensors[f"layer{i}.wé"] = rng.standard_normal(shape).astype(np.float32)
    buf = encode_checkpoint(tensors)
    back = decode_checkpoint(buf)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()
    assert encode_checkpoint(back) == buf


def test_checkpoint_layout_and_errors():
    buf = encode_checkpoint({"ab": np.array([1.0, 2.0], dtype=np.float32)})
    assert buf.startswith(MAGIC)
    version, count, name_len = struct.unpack_from("<III", buf, len(MAGIC))
    assert (version, count, name_len) == (1, 1, 2)
    assert buf[-8:] == np.array([1.0, 2.0], dtype="<f4").tobytes()
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-1])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + buf[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf + b"\0")


def test_grad_check_explicit_coordinates():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = Tensor(np.ones(4))
    rep = grad_check(lambda: tsum(x * x) + tsum(y), {"x": x, "y": y}, coords={"x": np.array([1, 4])})
    assert rep.coords_checked == {"x": 2} and rep.passed
