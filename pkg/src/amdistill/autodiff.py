"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are rank<=4 numpy arrays with (N, C, H, W) semantics at rank 4.
Each differentiable op records a node on the active per-thread tape;
:func:`backward` replays that tape in reverse execution order and
accumulates adjoints into ``Tensor.grad``. A whole training step (forward
plus backward) must run on one tape; leaves (parameters, inputs) may come
from anywhere.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

import numpy as np

from .rng import SplitMix64

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "add",
    "mul",
    "scale",
    "sum_all",
    "reshape",
    "relu",
    "sigmoid",
    "linear",
    "conv2d",
    "depthwise_conv2d",
    "avg_pool2x2",
    "global_avg_pool",
    "hadamard",
    "softmax_temp",
    "sum_squared_error",
    "bce_with_logits",
    "glorot_uniform",
    "zeros",
]


class Tensor:
    """Rank<=4 float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values as a constant leaf (shares storage, drops history)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Execution-ordered record of differentiable ops.

    Usable as a context manager to scope one training step; a per-thread
    ambient tape catches everything recorded outside explicit scopes.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tapes.pop()
        return False


class _ThreadState(threading.local):
    def __init__(self):
        self.tapes = [Tape()]
        self.grad_enabled = True


_STATE = _ThreadState()


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.grad_enabled = self._prev
        return False


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _STATE.tapes[-1]
        node = _Node(out, inputs, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad ancestor of a scalar loss.

    Traverses the recording tape in exact reverse execution order,
    accumulating adjoints additively where a tensor feeds several ops.
    Repeated calls without an intervening grad reset keep accumulating.
    """
    if loss.shape != ():
        raise ValueError(f"backward root must be a scalar, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    holders: dict[int, Tensor] = {id(loss): loss}
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, pending[id(loss)])
        return
    for node in reversed(loss._node.tape.nodes):
        adj = pending.pop(id(node.out), None)
        if adj is None:
            continue
        holders.pop(id(node.out), None)
        _accumulate(node.out, adj)
        for t, g in zip(node.inputs, node.backward_fn(adj)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
                holders[key] = t
    for key, g in pending.items():
        _accumulate(holders[key], g)


# ---------------------------------------------------------------------------
# shape checks

def _require_rank(name: str, t: Tensor, rank: int) -> None:
    if t.data.ndim != rank:
        raise ValueError(f"{name}: expected rank {rank}, got shape {t.shape}")


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(adj):
        return adj, adj

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bw(adj):
        return adj * bd, adj * ad

    return _record(out, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiplication by a python constant."""
    f = float(factor)
    out = Tensor(a.data * f)

    def bw(adj):
        return (adj * f,)

    return _record(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = Tensor(a.data.sum())

    def bw(adj):
        return (np.broadcast_to(adj, shape),)

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    out = Tensor(a.data.reshape(shape))

    def bw(adj):
        return (adj.reshape(orig),)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    gate = a.data > 0
    out = Tensor(np.where(gate, a.data, 0.0))

    def bw(adj):
        return (adj * gate,)

    return _record(out, (a,), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(np.asarray(a.data, dtype=np.float64))
    out = Tensor(s)

    def bw(adj):
        return (adj * s * (1.0 - s),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / convolution

def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: rows of ``input`` (N, Cin) times ``weight`` (Cout, Cin)."""
    _require_rank("linear input", input, 2)
    _require_rank("linear weight", weight, 2)
    n, cin = input.shape
    cout, wcin = weight.shape
    if wcin != cin:
        raise ValueError(
            f"linear: input feature dim {cin} != weight in-dim {wcin} (input dim 1 vs weight dim 1)"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({cout},)")
    x, w = input.data, weight.data
    y = x @ w.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def bw(adj):
        d_in = adj @ w if input.requires_grad else None
        d_w = adj.T @ x if weight.requires_grad else None
        if bias is not None:
            d_b = adj.sum(axis=0) if bias.requires_grad else None
            return d_in, d_w, d_b
        return d_in, d_w

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _record(out, inputs, bw)


def _conv_out_extent(name: str, dim: str, extent: int, k: int, padding: int) -> int:
    out = extent + 2 * padding - k + 1
    if out < 1:
        raise ValueError(
            f"{name}: output {dim} extent {out} < 1 (input {extent}, kernel {k}, padding {padding})"
        )
    return out


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, stride 1, odd kernels only.

    ``input`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, kh, kw); output
    extents are H + 2*padding - kh + 1 by the analogous width formula.
    """
    _require_rank("conv2d input", input, 4)
    _require_rank("conv2d weight", weight, 4)
    n, cin, h, w = input.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {wcin} (input dim 1 vs weight dim 1)"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = _conv_out_extent("conv2d", "height", h, kh, padding)
    wo = _conv_out_extent("conv2d", "width", w, kw, padding)

    wd = weight.data
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = input.data
    else:
        xp = input.data

    buf = np.zeros((n, ho, wo, cout))
    for u in range(kh):
        for v in range(kw):
            buf += np.tensordot(xp[:, :, u : u + ho, v : v + wo], wd[:, :, u, v], axes=([1], [1]))
    y = np.ascontiguousarray(buf.transpose(0, 3, 1, 2))
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(y)

    def bw(adj):
        d_in = None
        if input.requires_grad:
            dpad = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    r = np.tensordot(adj, wd[:, :, u, v], axes=([1], [0]))
                    dpad[:, :, u : u + ho, v : v + wo] += r.transpose(0, 3, 1, 2)
            d_in = dpad[:, :, padding : padding + h, padding : padding + w] if padding else dpad
        d_w = None
        if weight.requires_grad:
            d_w = np.empty_like(wd)
            for u in range(kh):
                for v in range(kw):
                    d_w[:, :, u, v] = np.tensordot(
                        adj, xp[:, :, u : u + ho, v : v + wo], axes=([0, 2, 3], [0, 2, 3])
                    )
        if bias is not None:
            d_b = adj.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            return d_in, d_w, d_b
        return d_in, d_w

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _record(out, inputs, bw)


def depthwise_conv2d(input: Tensor, weight: Tensor, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation; weight is (C, 1, kh, kw)."""
    _require_rank("depthwise_conv2d input", input, 4)
    _require_rank("depthwise_conv2d weight", weight, 4)
    n, c, h, w = input.shape
    wc, one, kh, kw = weight.shape
    if one != 1:
        raise ValueError(f"depthwise_conv2d: weight dim 1 must be 1, got {one}")
    if wc != c:
        raise ValueError(
            f"depthwise_conv2d: weight has {wc} channel filters but input has {c} channels"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise_conv2d: kernel extents must be odd, got {kh}x{kw}")
    ho = _conv_out_extent("depthwise_conv2d", "height", h, kh, padding)
    wo = _conv_out_extent("depthwise_conv2d", "width", w, kw, padding)

    wd = weight.data
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = input.data
    else:
        xp = input.data

    y = np.zeros((n, c, ho, wo))
    for u in range(kh):
        for v in range(kw):
            y += xp[:, :, u : u + ho, v : v + wo] * wd[None, :, 0, u, v, None, None]
    out = Tensor(y)

    def bw(adj):
        d_in = None
        if input.requires_grad:
            dpad = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dpad[:, :, u : u + ho, v : v + wo] += adj * wd[None, :, 0, u, v, None, None]
            d_in = dpad[:, :, padding : padding + h, padding : padding + w] if padding else dpad
        d_w = None
        if weight.requires_grad:
            d_w = np.empty_like(wd)
            for u in range(kh):
                for v in range(kw):
                    d_w[:, 0, u, v] = np.einsum(
                        "nchw,nchw->c", adj, xp[:, :, u : u + ho, v : v + wo]
                    )
        return d_in, d_w

    return _record(out, (input, weight), bw)


def avg_pool2x2(a: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial extents must be even."""
    _require_rank("avg_pool2x2", a, 4)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2: extents ({h}, {w}) must be even (dims 2, 3)")
    out = Tensor(a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def bw(adj):
        g = np.broadcast_to(adj[:, :, :, None, :, None] * 0.25, (n, c, h // 2, 2, w // 2, 2))
        return (g.reshape(n, c, h, w),)

    return _record(out, (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""
    _require_rank("global_avg_pool", a, 4)
    n, c, h, w = a.shape
    out = Tensor(a.data.mean(axis=(2, 3)))

    def bw(adj):
        return (np.broadcast_to(adj[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _record(out, (a,), bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with per-channel or per-position broadcast.

    ``a`` is (N, C, H, W); ``b`` is a channel vector given as (N, C) or
    (N, C, 1, 1), or a spatial map given as (N, 1, H, W).
    """
    _require_rank("hadamard", a, 4)
    n, c, h, w = a.shape
    if b.shape == (n, c):
        bview = b.data.reshape(n, c, 1, 1)
        mode = "channel"
    elif b.shape == (n, c, 1, 1):
        bview = b.data
        mode = "channel"
    elif b.shape == (n, 1, h, w):
        bview = b.data
        mode = "spatial"
    else:
        raise ValueError(
            f"hadamard: second factor shape {b.shape} not broadcastable to {a.shape} "
            f"(expected ({n}, {c}), ({n}, {c}, 1, 1) or ({n}, 1, {h}, {w}))"
        )
    ad = a.data
    out = Tensor(ad * bview)

    def bw(adj):
        d_a = adj * bview if a.requires_grad else None
        d_b = None
        if b.requires_grad:
            if mode == "channel":
                d_b = (adj * ad).sum(axis=(2, 3)).reshape(b.shape)
            else:
                d_b = (adj * ad).sum(axis=1, keepdims=True)
        return d_a, d_b

    return _record(out, (a, b), bw)


def softmax_temp(values: Tensor, temperature: float) -> Tensor:
    """Row softmax of ``values``/temperature, stabilized by row-max shift."""
    _require_rank("softmax_temp", values, 2)
    t = float(temperature)
    if t <= 0:
        raise ValueError(f"softmax_temp: temperature must be > 0, got {temperature}")
    v = values.data
    z = np.exp((v - v.max(axis=1, keepdims=True)) / t)
    s = z / z.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def bw(adj):
        g = adj * s
        return ((g - s * g.sum(axis=1, keepdims=True)) / t,)

    return _record(out, (values,), bw)


# ---------------------------------------------------------------------------
# losses

def sum_squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Unnormalized sum of squared differences over all elements."""
    _require_same_shape("sum_squared_error", a, b)
    d = a.data - b.data
    out = Tensor((d * d).sum())

    def bw(adj):
        g = 2.0 * d * adj
        return g, -g

    return _record(out, (a, b), bw)


def bce_with_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy against {0,1} labels, in log-sum-exp form.

    Labels are constants; gradient flows into the logits only.
    """
    _require_same_shape("bce_with_logits", logits, labels)
    y = labels.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_with_logits: labels must be exactly 0 or 1")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(per.mean())
    count = z.size

    def bw(adj):
        return (adj * (_stable_sigmoid(z) - y) / count, None)

    return _record(out, (logits, labels), bw)


# ---------------------------------------------------------------------------
# initialization

def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: SplitMix64) -> Tensor:
    """Trainable tensor drawn uniformly from +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    vals = (rng.uniform_array(n) * 2.0 - 1.0) * limit
    return Tensor(vals.reshape(shape), requires_grad=True)


def zeros(shape: tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
