"""Minimal reverse-mode autodiff on float64 numpy arrays.

Conventions used across the package:
  * image batches are channels-last ``(B, H, W, C)``
  * graph/node features are ``(B, N, D)``
  * every Tensor holds float64 data; gradients are float64 arrays of the
    same shape, accumulated additively across backward passes
  * only leaf tensors (no parents) retain ``.grad``

Ops record parent links and a backward closure; ``backward()`` walks the
recorded graph once in reverse topological order. The walk order is fully
deterministic, so repeated runs with identical inputs produce bit-identical
gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_EPS = 1e-8

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction of op results ------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._reject_item()

    def _reject_item(self):
        raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff core ----------------------------------------------------

    def topo_order(self) -> list:
        """Nodes of the recorded graph, parents strictly before children."""
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self):
        """Accumulate dSelf/dLeaf into every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = self.topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf():
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# -- arithmetic primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise division; rejects exact zeros in the divisor."""
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains zeros (use div_eps for a guarded divide)")
    inv = 1.0 / b.data
    out = a.data * inv

    def backward(g):
        return (_unbroadcast(g * inv, a.shape), _unbroadcast(-g * out * inv, b.shape))

    return Tensor._result(out, (a, b), backward)


def div_eps(a: Tensor, b: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Guarded divide a / (b + eps), intended for nonnegative denominators."""
    b_shift = add(b, Tensor(eps))
    return div(a, b_shift)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return (_unbroadcast(g @ bt, a.shape), _unbroadcast(at @ g, b.shape))

    return Tensor._result(out, (a, b), backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor, eps: float | None = None) -> Tensor:
    """Natural log. Without eps, nonpositive inputs are rejected."""
    if eps is None:
        if np.any(a.data <= 0.0):
            raise ValueError("log: nonpositive input (pass eps for the guarded variant)")
        x = a.data
    else:
        x = a.data + eps
        if np.any(x <= 0.0):
            raise ValueError("log: input + eps still nonpositive")
    inv = 1.0 / x
    return Tensor._result(np.log(x), (a,), lambda g: (g * inv,))


def sqrt(a: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Exact sqrt forward; backward slope capped via max(sqrt(x), eps)."""
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative input")
    root = np.sqrt(a.data)
    safe = np.maximum(root, eps)
    return Tensor._result(root, (a,), lambda g: (g * 0.5 / safe,))


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out = a.data * s
    return Tensor._result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    return Tensor._result(out, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tabs(a: Tensor) -> Tensor:
    """|x|; subgradient 0 at x == 0."""
    s = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to [lo, hi]; gradient is identity inside the bounds, zero outside."""
    out = a.data
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
        out = np.maximum(out, lo)
    if hi is not None:
        mask &= a.data <= hi
        out = np.minimum(out, hi)
    return Tensor._result(out, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._result(out, (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._result(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return Tensor._result(out, (a,), backward)


def tstd(a: Tensor, eps: float = DEFAULT_EPS, axis=None, keepdims: bool = False) -> Tensor:
    """Standard deviation, composed so a constant input gives exactly 0."""
    m = tmean(a, axis=axis, keepdims=True)
    v = tmean(square(sub(a, m)), axis=axis, keepdims=keepdims)
    return sqrt(v, eps=eps)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routed to the first argmax on ties."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    res = out if keepdims else out.squeeze(axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    return Tensor._result(res, (a,), backward)


def l1_norm(a: Tensor) -> Tensor:
    return tsum(tabs(a))


def l2_norm(a: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    return sqrt(tsum(square(a)), eps=eps)


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] += g
        return (ga,)

    return Tensor._result(np.ascontiguousarray(out), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


def forward_diff(a: Tensor, axis: int) -> Tensor:
    """Forward difference along ``axis``: y_i = x_{i+1} - x_i, last slot 0."""
    n = a.shape[axis]
    if n < 1:
        raise ShapeError(f"forward_diff: axis {axis} is empty")
    out = np.zeros_like(a.data)
    head = [slice(None)] * a.ndim
    tail = [slice(None)] * a.ndim
    head[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    out[tuple(head)] = a.data[tuple(tail)] - a.data[tuple(head)]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[tuple(tail)] += g[tuple(head)]
        ga[tuple(head)] -= g[tuple(head)]
        return (ga,)

    return Tensor._result(out, (a,), backward)


def spatial_gradient(a: Tensor, axes=(1, 2)):
    """Forward-difference gradient along two spatial axes; returns (d_ax0, d_ax1)."""
    return forward_diff(a, axes[0]), forward_diff(a, axes[1])


# -- image-domain primitives (channels-last (B, H, W, C)) -----------------------


def _check_image(a: Tensor, opname: str):
    if a.ndim != 4:
        raise ShapeError(f"{opname}: expected (B, H, W, C) tensor, got shape {a.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding=0) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding.

    x: (B, H, W, Ci); w: (kh, kw, Ci, Co); bias: (Co,) optional.
    """
    _check_image(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, Ci, Co), got {w.shape}")
    B, H, W, Ci = x.shape
    kh, kw, wci, Co = w.shape
    if wci != Ci:
        raise ShapeError(f"conv2d: input has {Ci} channels but kernel expects {wci}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input ({H + 2 * ph}x{W + 2 * pw})")

    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = x.data
    out = np.zeros((B, Ho, Wo, Co))
    flat = out.reshape(-1, Co)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky:ky + Ho, kx:kx + Wo, :].reshape(-1, Ci)
            flat += xs @ w.data[ky, kx]
    if bias is not None:
        out += bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.reshape(-1, Co)
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                xs = xp[:, ky:ky + Ho, kx:kx + Wo, :].reshape(-1, Ci)
                dw[ky, kx] = xs.T @ g2
                dxp[:, ky:ky + Ho, kx:kx + Wo, :] += (g2 @ w.data[ky, kx].T).reshape(B, Ho, Wo, Ci)
        dx = dxp[:, ph:ph + H, pw:pw + W, :] if (ph or pw) else dxp
        if bias is None:
            return (np.ascontiguousarray(dx), dw)
        return (np.ascontiguousarray(dx), dw, g.sum(axis=(0, 1, 2)))

    return Tensor._result(out, parents, backward)


def avg_pool2d(x: Tensor, k) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by k."""
    _check_image(x, "avg_pool2d")
    kh, kw = (k, k) if isinstance(k, int) else k
    B, H, W, C = x.shape
    if H % kh or W % kw:
        raise ShapeError(f"avg_pool2d: spatial dims ({H},{W}) not divisible by kernel ({kh},{kw})")
    out = x.data.reshape(B, H // kh, kh, W // kw, kw, C).mean(axis=(2, 4))

    def backward(g):
        gg = g[:, :, None, :, None, :] / (kh * kw)
        return (np.broadcast_to(gg, (B, H // kh, kh, W // kw, kw, C)).reshape(B, H, W, C).copy(),)

    return Tensor._result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims, keeping (B, 1, 1, C)."""
    _check_image(x, "global_avg_pool")
    return tmean(x, axis=(1, 2), keepdims=True)


def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Average pooling onto an (oh, ow) output grid with near-equal bins."""
    _check_image(x, "adaptive_avg_pool2d")
    oh, ow = out_hw
    B, H, W, C = x.shape
    if oh > H or ow > W:
        raise ShapeError(f"adaptive_avg_pool2d: target ({oh},{ow}) exceeds input ({H},{W})")
    ys = [(i * H // oh, -(-(i + 1) * H // oh)) for i in range(oh)]
    xs = [(j * W // ow, -(-(j + 1) * W // ow)) for j in range(ow)]
    out = np.empty((B, oh, ow, C))
    for i, (y0, y1) in enumerate(ys):
        for j, (x0, x1) in enumerate(xs):
            out[:, i, j, :] = x.data[:, y0:y1, x0:x1, :].mean(axis=(1, 2))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (y0, y1) in enumerate(ys):
            for j, (x0, x1) in enumerate(xs):
                gx[:, y0:y1, x0:x1, :] += g[:, i:i + 1, j:j + 1, :] / ((y1 - y0) * (x1 - x0))
        return (gx,)

    return Tensor._result(out, (x,), backward)


def window_max2d(x: Tensor, win: int) -> Tensor:
    """Max over a centered odd window, truncated at the borders.

    Output has the input's shape. Gradient goes to the first maximal
    element in row-major window order.
    """
    _check_image(x, "window_max2d")
    if win < 1 or win % 2 == 0:
        raise ShapeError(f"window_max2d: window must be odd and >= 1, got {win}")
    B, H, W, C = x.shape
    r = win // 2
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r), (0, 0)), constant_values=-np.inf)
    wview = sliding_window_view(xp, (win, win), axis=(1, 2))          # (B,H,W,C,win,win)
    wflat = wview.reshape(B, H, W, C, win * win)
    idx = np.argmax(wflat, axis=-1)
    out = np.take_along_axis(wflat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gyp = np.zeros((B, H + 2 * r, W + 2 * r, C))
        bi, yi, xi, ci = np.indices((B, H, W, C), sparse=False)
        ty, tx = idx // win, idx % win
        np.add.at(gyp, (bi, yi + ty, xi + tx, ci), g)
        return (np.ascontiguousarray(gyp[:, r:r + H, r:r + W, :]),)

    return Tensor._result(out, (x,), backward)


def window_min2d(x: Tensor, win: int) -> Tensor:
    """Min over a centered window via -max(-x); same tie-breaking rule."""
    return neg(window_max2d(neg(x), win))


def box_sum2d(x: Tensor, radius: int) -> Tensor:
    """Sum over a centered (2r+1)^2 window truncated at the borders.

    Computed with integral images; the operator is self-adjoint, so the
    backward pass is another box_sum2d of the incoming gradient.
    """
    _check_image(x, "box_sum2d")
    if radius < 0:
        raise ShapeError("box_sum2d: radius must be >= 0")
    out = _box_sum_raw(x.data, radius)
    return Tensor._result(out, (x,), lambda g: (_box_sum_raw(g, radius),))


def _box_sum_raw(a: np.ndarray, r: int) -> np.ndarray:
    B, H, W, C = a.shape
    s = np.zeros((B, H + 1, W + 1, C))
    s[:, 1:, 1:, :] = a.cumsum(axis=1).cumsum(axis=2)
    y0 = np.clip(np.arange(H) - r, 0, H)
    y1 = np.clip(np.arange(H) + r + 1, 0, H)
    x0 = np.clip(np.arange(W) - r, 0, W)
    x1 = np.clip(np.arange(W) + r + 1, 0, W)
    out = (
        s[:, y1[:, None], x1[None, :], :]
        - s[:, y0[:, None], x1[None, :], :]
        - s[:, y1[:, None], x0[None, :], :]
        + s[:, y0[:, None], x0[None, :], :]
    )
    return out


def box_count2d(shape_hw, radius: int) -> np.ndarray:
    """Number of in-image pixels in each truncated box window (H, W)."""
    H, W = shape_hw
    ones = np.ones((1, H, W, 1))
    return _box_sum_raw(ones, radius)[0, :, :, 0]


def upsample_nearest2d(x: Tensor, fy: int, fx: int) -> Tensor:
    """Nearest-neighbour upsampling by integer factors."""
    _check_image(x, "upsample_nearest2d")
    if fy < 1 or fx < 1:
        raise ShapeError("upsample_nearest2d: factors must be >= 1")
    out = np.repeat(np.repeat(x.data, fy, axis=1), fx, axis=2)
    B, H, W, C = x.shape

    def backward(g):
        return (g.reshape(B, H, fy, W, fx, C).sum(axis=(2, 4)),)

    return Tensor._result(out, (x,), backward)
