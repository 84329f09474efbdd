"""Parameter bookkeeping and initializers shared by the model components."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, matmul, relu

# parameter kinds; "weight" entries enter the weight-decay regularizer,
# "spline" entries enter the spline smoothness regularizer
KINDS = ("weight", "bias", "spline", "scalar")


class ParamStore:
    """Ordered registry of named learnable tensors with kind tags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._kinds: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, kind: str = "weight") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if kind not in KINDS:
            raise ValueError(f"unknown parameter kind: {kind}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._kinds[name] = kind
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def by_kind(self, kind: str):
        return [(n, t) for n, t in self._params.items() if self._kinds[n] == kind]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, t in self._params.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n}: {a.shape} vs {t.data.shape}")
            t.data = a.copy()


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def add_conv(store: ParamStore, rng, name: str, kh: int, kw: int, cin: int, cout: int,
             zero: bool = False, gain: float = 1.0):
    """Register a conv kernel + bias pair; returns (w, b) tensors."""
    fan = kh * kw * cin
    wdata = np.zeros((kh, kw, cin, cout)) if zero else gain * he_normal(rng, (kh, kw, cin, cout), fan)
    w = store.add(f"{name}.w", wdata, kind="weight")
    b = store.add(f"{name}.b", np.zeros(cout), kind="bias")
    return w, b


def add_linear(store: ParamStore, rng, name: str, din: int, dout: int,
               bias: bool = True, zero: bool = False, gain: float = 1.0):
    wdata = np.zeros((din, dout)) if zero else gain * glorot(rng, (din, dout), din, dout)
    w = store.add(f"{name}.w", wdata, kind="weight")
    b = store.add(f"{name}.b", np.zeros(dout), kind="bias") if bias else None
    return w, b


def conv_layer(x: Tensor, w: Tensor, b: Tensor, pad: int = 1, act: bool = True) -> Tensor:
    y = conv2d(x, w, b, padding=pad)
    return relu(y) if act else y


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y + b if b is not None else y
