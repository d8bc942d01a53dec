"""Parameter containers and shared pointwise layers."""

from __future__ import annotations

import zlib
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, matmul, relu, sigmoid

ACTIVATIONS = ("relu", "sigmoid", "none")


class Parameter(Tensor):
    """A trainable leaf tensor that knows how to initialize itself.

    ``init`` is ``"zeros"``, ``"ones"``, ``("he", fan_in)`` or ``("he", fan_in, gain)``.
    """

    __slots__ = ("init",)

    def __init__(self, shape, init="zeros", dtype=np.float64):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init


class Module:
    """Minimal module tree: parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def reset_parameters(module: Module, seed: int) -> None:
    """Initialize every parameter from an RNG keyed on (seed, parameter name).

    Keying on the name makes a parameter's initial value independent of which
    other parameters exist, so structurally nested networks built with the
    same seed share values bit-for-bit.
    """
    for name, p in module.named_parameters():
        rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])
        if p.init == "zeros":
            p.data = np.zeros(p.shape, dtype=p.dtype)
        elif p.init == "ones":
            p.data = np.ones(p.shape, dtype=p.dtype)
        elif isinstance(p.init, tuple) and p.init[0] == "he":
            gain = p.init[2] if len(p.init) > 2 else 1.0
            std = gain * np.sqrt(2.0 / p.init[1])
            p.data = (rng.standard_normal(p.shape) * std).astype(p.dtype)
        elif isinstance(p.init, tuple) and p.init[0] == "uniform":
            bound = 1.0 / np.sqrt(p.init[1])
            p.data = rng.uniform(-bound, bound, p.shape).astype(p.dtype)
        else:
            raise ValueError(f"unknown init {p.init!r} for {name}")


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    if activation == "none":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def linear(x, weight, bias) -> Tensor:
    """Affine map over the last axis: ``x[..., in] @ weight[in, out] + bias[out]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    return matmul(x, weight) + bias


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, init="he"):
        self.in_features = in_features
        self.out_features = out_features
        winit = ("he", in_features) if init == "he" else init
        self.weight = Parameter((in_features, out_features), winit)
        self.bias = Parameter((out_features,), "zeros")

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """Pointwise stack of linear layers with per-layer activations.

    ``layer_specs`` is a sequence of ``(width, activation)`` pairs. Weights
    are shared across every leading (set) axis of the input.
    """

    def __init__(self, in_features: int, layer_specs: Sequence[tuple[int, str]], zero_last: bool = False,
                 last_gain: float | None = None):
        if not layer_specs:
            raise ValueError("MLP needs at least one layer")
        self.activations = []
        self.layers = []
        width = in_features
        for out, act in layer_specs:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            self.layers.append(Linear(width, out))
            self.activations.append(act)
            width = out
        self.out_features = width
        last = self.layers[-1]
        if zero_last:
            last.weight.init = "zeros"
        elif last_gain is not None:
            last.weight.init = ("he", last.in_features, last_gain)

    def __call__(self, x) -> Tensor:
        for layer, act in zip(self.layers, self.activations):
            x = activate(layer(x), act)
        return x


def mlp(x, layer_specs, params: Sequence[tuple]) -> Tensor:
    """Functional MLP: ``params`` holds one ``(weight, bias)`` pair per spec entry."""
    if not layer_specs:
        raise ValueError("MLP needs at least one layer")
    if len(params) != len(layer_specs):
        raise ValueError("one (weight, bias) pair per layer spec required")
    for (width, act), (w, b) in zip(layer_specs, params):
        if np.shape(w.data if isinstance(w, Tensor) else w)[1] != width:
            raise ValueError("layer width does not match weight shape")
        x = activate(linear(x, w, b), act)
    return x
