"""Minimal reverse-mode tensor engine for the segmentation model graph.

Dense numpy-backed tensors plus an explicit tape (:class:`OpGraph`) whose
node list is already in topological order, so the backward sweep is a single
reverse iteration.  The operator set is exactly what the model graph needs:
conv2d, activations, pooling, bilinear upsampling, matmul, group
normalization, elementwise arithmetic, reductions, indexing, SGD with
momentum, and a finite-difference gradient checker.

Runtime default precision is float32; gradient checks run in float64.
Tensors are treated as immutable once produced by an op; only ``sgd_step``
mutates parameter storage in place.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpGraph",
    "ShapeError",
    "ConfigError",
    "GradientError",
    "conv2d",
    "activation",
    "relu",
    "sigmoid",
    "softmax",
    "softplus",
    "pool2d",
    "upsample_bilinear",
    "matmul",
    "group_normalize",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "log",
    "exp",
    "square",
    "reshape",
    "swapaxes",
    "concat",
    "take",
    "backward",
    "sgd_step",
    "uniform_fan_in",
    "finite_difference_gradient",
    "check_gradients",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


class ConfigError(ValueError):
    """Raised when an operator is called with an invalid configuration."""


class GradientError(RuntimeError):
    """Raised when a gradient expected to be populated is missing."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    ``data`` is always a contiguous float32 or float64 ndarray.  ``grad``
    is either ``None`` or an ndarray of identical shape, populated by
    :func:`backward` and cleared by :func:`sgd_step`.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not arr.flags.c_contiguous:
            # note: ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """New tensor sharing this data, severed from any graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Light operator sugar; the functional ops below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class OpNode:
    """One recorded operation: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = list(inputs)
        self.output = output
        self.backward_fn = backward_fn


_GRAPH_STACK: list["OpGraph"] = []


def _active_graph() -> Optional["OpGraph"]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class OpGraph:
    """Recording tape.  Node order equals execution order, which is a valid
    topological order by construction, so no sorting is ever needed.

    Use as a context manager around the forward pass that should be
    differentiated; outside any active graph the ops run forward-only.
    """

    def __init__(self):
        self.nodes: list[OpNode] = []

    def __enter__(self) -> "OpGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "mismatched OpGraph nesting"

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        backward(self, loss, params)


def _record(op: str, inputs: Sequence, output: Tensor,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    graph = _active_graph()
    if graph is not None:
        tensor_inputs = [t for t in inputs if isinstance(t, Tensor)]
        if any(t.requires_grad for t in tensor_inputs):
            output.requires_grad = True
            graph.nodes.append(OpNode(op, tensor_inputs, output, backward_fn))
    return output


def backward(graph: OpGraph, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Reverse sweep over the tape, accumulating into ``.grad`` slots.

    ``loss`` must be scalar.  Every requires_grad tensor touched by the
    sweep receives (accumulated) gradients; tensors listed in ``params``
    that did not participate get explicit zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g_out = flow.get(id(node.output))
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            holders[key] = t
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = g
    for key, t in holders.items():
        if not t.requires_grad:
            continue
        g = flow[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for t in params:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _as_array(x, like: np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op_name: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ref = a_t.data if a_t is not None else b_t.data
    a_d = _as_array(a, ref)
    b_d = _as_array(b, ref)
    out = Tensor(fwd(a_d, b_d))

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(_unbroadcast(bwd_a(g, a_d, b_d), a_d.shape))
        if b_t is not None:
            grads.append(_unbroadcast(bwd_b(g, a_d, b_d), b_d.shape))
        return grads

    inputs = [t for t in (a_t, b_t) if t is not None]
    return _record(op_name, inputs, out, backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return _record("neg", [x], out, lambda g: [-g])


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    data = x.data
    return _record("log", [x], out, lambda g: [g / data])


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    out = Tensor(out_data)
    return _record("exp", [x], out, lambda g: [g * out_data])


def square(x: Tensor) -> Tensor:
    data = x.data
    out = Tensor(data * data)
    return _record("square", [x], out, lambda g: [2.0 * g * data])


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward_fn(g):
        if axis is None:
            return [np.broadcast_to(g, shape).astype(g.dtype, copy=True)]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).astype(g.dtype, copy=True)]

    return _record("sum", [x], out, backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a]
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward_fn(g):
        if axis is None:
            expanded = np.broadcast_to(g, shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            expanded = np.broadcast_to(g, shape)
        return [expanded / count]

    return _record("mean", [x], out, backward_fn)


# ---------------------------------------------------------------------------
# activations

def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return _record("relu", [x], out, lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_stable(x.data)
    out = Tensor(out_data)
    return _record("sigmoid", [x], out, lambda g: [g * out_data * (1.0 - out_data)])


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    data = x.data
    out = Tensor(np.maximum(data, 0) + np.log1p(np.exp(-np.abs(data))))
    return _record("softplus", [x], out, lambda g: [g * _sigmoid_stable(data)])


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(out_data)

    def backward_fn(g):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        return [(g - inner) * out_data]

    return _record("softmax", [x], out, backward_fn)


def activation(kind: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Dispatch over the supported nonlinearities.

    ``axis`` is required for (and only used by) softmax.
    """
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_over_axis":
        if axis is None:
            raise ConfigError("softmax activation requires an axis")
        return softmax(x, axis)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    old_shape = x.shape
    out = Tensor(np.reshape(x.data, shape))
    return _record("reshape", [x], out, lambda g: [np.reshape(g, old_shape)])


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    return _record("swapaxes", [x], out,
                   lambda g: [np.ascontiguousarray(np.swapaxes(g, a, b))])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.shape[axis] for t in tensors]

    def backward_fn(g):
        grads = []
        offset = 0
        for extent in extents:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + extent)
            grads.append(np.ascontiguousarray(g[tuple(index)]))
            offset += extent
        return grads

    return _record("concat", list(tensors), out, backward_fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by integer indices; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(x.data, idx, axis=axis))
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return [gx]

    return _record("take", [x], out, backward_fn)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes broadcast; inner extents must agree.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    a_d, b_d = a.data, b.data
    out = Tensor(np.matmul(a_d, b_d))

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b_d, -1, -2))
        gb = np.matmul(np.swapaxes(a_d, -1, -2), g)
        return [_unbroadcast(ga, a_d.shape), _unbroadcast(gb, b_d.shape)]

    return _record("matmul", [a, b], out, backward_fn)


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (B, H'*W', C*kh*kw) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int):
    k = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2d = w.reshape(k, -1)
    out = np.matmul(cols, w2d.T)                     # (B, H'W', K)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(xp.shape[0], k, ho, wo)
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is (N,C,H,W), ``weight`` (K,C,kh,kw) with odd kh/kw, ``bias`` (K,).
    Output spatial extents follow floor((H + 2*pad - kh) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w_in = x.shape
    k, wc, kh, kw = weight.shape
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {k} output channels")
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ConfigError(f"conv2d pad must be non-negative, got {pad}")
    if h + 2 * pad < kh or w_in + 2 * pad < kw:
        raise ShapeError(
            f"conv2d input {h}x{w_in} with pad {pad} is smaller than kernel {kh}x{kw}")

    if pad > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    out_data, cols = _conv_forward(xp, weight.data, stride)
    out_data = out_data + bias.data.reshape(1, k, 1, 1)
    out = Tensor(out_data)

    w_d = weight.data
    ho, wo = out_data.shape[2], out_data.shape[3]

    def backward_fn(g):
        g_flat = g.reshape(n, k, ho * wo)
        # weight gradient from the saved patch matrix
        gw = np.matmul(g_flat, cols).sum(axis=0).reshape(w_d.shape)
        gb = g.sum(axis=(0, 2, 3))
        # input gradient as a stride-1 correlation of the dilated output
        # gradient with the flipped, channel-swapped kernel
        hp, wp = h + 2 * pad, w_in + 2 * pad
        rh = (hp - kh) % stride
        rw = (wp - kw) % stride
        dil_h = (ho - 1) * stride + 1
        dil_w = (wo - 1) * stride + 1
        buf = np.zeros((n, k, dil_h + 2 * (kh - 1) + rh, dil_w + 2 * (kw - 1) + rw),
                       dtype=g.dtype)
        buf[:, :, kh - 1:kh - 1 + dil_h:stride, kw - 1:kw - 1 + dil_w:stride] = g
        w_flip = w_d[:, :, ::-1, ::-1].swapaxes(0, 1)   # (C, K, kh, kw)
        gxp, _ = _conv_forward(buf, np.ascontiguousarray(w_flip), 1)
        gx = gxp[:, :, pad:pad + h, pad:pad + w_in]
        return [np.ascontiguousarray(gx), gw, gb]

    return _record("conv2d", [x, weight, bias], out, backward_fn)


# ---------------------------------------------------------------------------
# pooling and resampling

def _bin_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Nearly-equal partition of [0, n_in) into n_out bins."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def _avg_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i, (lo, hi) in enumerate(_bin_bounds(n_in, n_out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def pool2d(kind: str, x: Tensor, out_hw: Sequence[int]) -> Tensor:
    """Output-size-driven 2D pooling over nearly-equal spatial bins.

    'adaptive_avg' accepts any output extents; 'avg' additionally requires
    the input extents to divide evenly; 'max' takes the bin maximum.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects 4D input, got {x.shape}")
    oh, ow = int(out_hw[0]), int(out_hw[1])
    n, c, h, w = x.shape
    if oh < 1 or ow < 1:
        raise ConfigError(f"pool2d output extents must be >= 1, got {oh}x{ow}")
    if oh > h or ow > w:
        raise ShapeError(f"pool2d output {oh}x{ow} exceeds input {h}x{w}")

    if kind in ("avg", "adaptive_avg"):
        if kind == "avg" and (h % oh != 0 or w % ow != 0):
            raise ConfigError(
                f"pool2d kind 'avg' requires divisible extents, got {h}x{w} -> {oh}x{ow}")
        mh = _avg_matrix(h, oh, x.dtype)
        mw = _avg_matrix(w, ow, x.dtype)
        out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T))

        def backward_fn(g):
            return [np.matmul(np.matmul(mh.T, g), mw)]

        return _record("pool2d_avg", [x], out, backward_fn)

    if kind == "max":
        rows = _bin_bounds(h, oh)
        cols = _bin_bounds(w, ow)
        out_data = np.empty((n, c, oh, ow), dtype=x.dtype)
        argmax = np.empty((n, c, oh, ow), dtype=np.int64)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                window = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
                flat_idx = window.argmax(axis=2)
                out_data[:, :, i, j] = np.take_along_axis(
                    window, flat_idx[:, :, None], axis=2)[:, :, 0]
                width = c1 - c0
                argmax[:, :, i, j] = (r0 + flat_idx // width) * w + (c0 + flat_idx % width)
        out = Tensor(out_data)
        in_shape = x.shape

        def backward_fn(g):
            # bins overlap when extents do not divide evenly, so accumulate
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            bi = np.arange(n)[:, None, None]
            ci = np.arange(c)[None, :, None]
            np.add.at(gx, (bi, ci, argmax.reshape(n, c, -1)), g.reshape(n, c, -1))
            return [gx.reshape(in_shape)]

        return _record("pool2d_max", [x], out, backward_fn)

    raise ConfigError(f"unknown pool2d kind {kind!r}")


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic sampling matrix, align-corners-false convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_hw: Sequence[int]) -> Tensor:
    """Bilinear resampling to ``out_hw`` (align-corners-false)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects 4D input, got {x.shape}")
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ShapeError(f"upsample output extents must be >= 1, got {oh}x{ow}")
    h, w = x.shape[2], x.shape[3]
    mh = _bilinear_matrix(h, oh, x.dtype)
    mw = _bilinear_matrix(w, ow, x.dtype)
    out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T))

    def backward_fn(g):
        return [np.matmul(np.matmul(mh.T, g), mw)]

    return _record("upsample_bilinear", [x], out, backward_fn)


# ---------------------------------------------------------------------------
# group normalization

def group_normalize(x: Tensor, groups: int, gain: Tensor, shift: Tensor,
                    eps: float = 1e-5) -> Tensor:
    """Per-group mean/variance normalization with per-channel affine."""
    if x.ndim != 4:
        raise ShapeError(f"group_normalize expects 4D input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"{c} channels not divisible by {groups} groups")
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"gain/shift must be ({c},), got {gain.shape} and {shift.shape}")
    grouped = x.data.reshape(n, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((grouped - mu) * inv_std).reshape(n, c, h, w)
    out = Tensor(x_hat * gain.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1))

    gain_d = gain.data
    m = grouped.shape[2]

    def backward_fn(g):
        g_gain = (g * x_hat).sum(axis=(0, 2, 3))
        g_shift = g.sum(axis=(0, 2, 3))
        p = (g * gain_d.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        xh = x_hat.reshape(n, groups, -1)
        p_mean = p.mean(axis=2, keepdims=True)
        px_mean = (p * xh).mean(axis=2, keepdims=True)
        gx = inv_std * (p - p_mean - xh * px_mean)
        return [gx.reshape(n, c, h, w), g_gain, g_shift]

    return _record("group_normalize", [x, gain, shift], out, backward_fn)


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params: Mapping[str, Tensor], lr: float, momentum: float,
             velocity: Optional[dict[str, np.ndarray]] = None) -> dict[str, np.ndarray]:
    """One SGD-with-momentum update: v <- momentum*v + grad; p <- p - lr*v.

    Gradients are cleared afterwards.  Returns the velocity state to be
    passed back on the next step.
    """
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        # keep the state in the parameter dtype so a saved optimizer
        # snapshot restores the run bit for bit
        g = p.grad.astype(p.data.dtype, copy=False)
        v = (momentum * v.astype(p.data.dtype, copy=False)) + g
        velocity[name] = v
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
        p.grad = None
    return velocity


# ---------------------------------------------------------------------------
# initialization and gradient checking

def uniform_fan_in(rng: np.random.Generator, shape: Sequence[int],
                   dtype=np.float32) -> np.ndarray:
    """Uniform init with variance 1/fan_in (fan_in = prod of all but dim 0)."""
    fan_in = 1
    for extent in shape[1:]:
        fan_in *= extent
    bound = math.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


def finite_difference_gradient(fn: Callable[[], float], t: Tensor,
                               eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. every entry of ``t``.

    ``fn`` must recompute the scalar from current tensor contents.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn()
        flat[i] = orig - eps
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def check_gradients(build_loss: Callable[[], Tensor], wrt: Sequence[Tensor],
                    eps: float = 1e-4, coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare tape gradients against central finite differences.

    Returns the worst relative error over all checked coordinates.  With
    ``coords`` set, only that many randomly sampled coordinates per tensor
    are probed (for whole-graph checks).
    """
    for t in wrt:
        t.grad = None
    with OpGraph() as graph:
        loss = build_loss()
    graph.backward(loss, params=wrt)

    def loss_value() -> float:
        return build_loss().item()

    worst = 0.0
    for t in wrt:
        analytic = t.grad
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        if coords is None or coords >= flat.size:
            picked = range(flat.size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            picked = gen.choice(flat.size, size=coords, replace=False)
        for i in picked:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_value()
            flat[i] = orig - eps
            f_minus = loss_value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(fd), abs(a_flat[i]), 1e-6)
            worst = max(worst, abs(a_flat[i] - fd) / denom)
    return worst
