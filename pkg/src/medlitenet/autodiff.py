"""Dense N-D float tensors with reverse-mode automatic differentiation.

The engine is tape-based: while a :class:`Graph` is active, every operation
appends a node holding the operands and a backward closure.  ``backward``
walks the tape in exact reverse append order and accumulates gradients
(``+=``) into the ``grad`` buffer of every leaf tensor that requires them.

Layout convention is NCHW for 4-D tensors, row-major, float32 by default.
All ops are dtype-preserving so the gradient-check harness can run the same
code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tensor",
    "Parameter",
    "Graph",
    "Conv2dSpec",
    "BatchNormState",
    "backward",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_scalar",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "relu",
    "sigmoid",
    "silu",
    "softmax",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "concat_channels",
    "conv2d",
    "conv2d_direct",
    "batchnorm2d",
    "upsample_bilinear",
    "global_avg_pool",
    "broadcast_spatial",
]


class AutodiffError(RuntimeError):
    """Raised on invalid use of the autodiff machinery."""


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for an op."""


# ---------------------------------------------------------------------------
# Tensor and graph plumbing
# ---------------------------------------------------------------------------

class Tensor:
    """A dense float array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "creator", "name", "decay_exempt")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[_Node] = None
        self.name = name
        self.decay_exempt = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + (", requires_grad=True)" if self.requires_grad else ")")

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A leaf tensor registered as trainable by the module system."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "parents", "out", "backward_fn", "graph")

    def __init__(self, op, parents, out, backward_fn, graph):
        self.op = op
        self.parents = parents
        self.out = out
        self.backward_fn = backward_fn
        self.graph = graph


class Graph:
    """Append-only op tape; backward runs in exact reverse append order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.pop()
        return False

    def backward(self, loss: Tensor):
        backward(loss, self)


_GRAPH_STACK: list[Graph] = []


def _active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _record(op: str, out: Tensor, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(op, tuple(parents), out, backward_fn, graph)
        out.creator = node
        graph.nodes.append(node)
    return out


def backward(loss: Tensor, graph: Optional[Graph] = None):
    """Accumulate d(loss)/d(leaf) into ``grad`` for every requires_grad leaf.

    Repeated calls without zeroing add up, so two passes yield exactly twice
    the single-pass gradient.
    """
    if loss.data.size != 1:
        raise AutodiffError(
            f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if graph is None:
        if loss.creator is None:
            raise AutodiffError("loss tensor is not attached to any graph")
        graph = loss.creator.graph
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.creator is None or loss.creator.graph is not graph:
        # degenerate: the loss is itself a leaf
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += pending[id(loss)]
        return
    for node in reversed(graph.nodes):
        gout = pending.pop(id(node.out), None)
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.creator is not None and parent.creator.graph is graph:
                prev = pending.get(id(parent))
                pending[id(parent)] = g if prev is None else prev + g
            else:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: sum gradient down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        ga = _reduce_to_shape(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to_shape(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        ga = _reduce_to_shape(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to_shape(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        ga = _reduce_to_shape(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _reduce_to_shape(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = _reduce_to_shape(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to_shape(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record("pow", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record("exp", out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / out.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))

    def bw(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside.astype(a.data.dtype),)

    return _record("clamp", out, (a,), bw)


# ---------------------------------------------------------------------------
# Activations and softmax
# ---------------------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_stable_sigmoid(a.data))

    def bw(g):
        s = out.data
        return (g * s * (1.0 - s),)

    return _record("sigmoid", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bw(g):
        return (g * (a.data > 0).astype(a.data.dtype),)

    return _record("relu", out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(a.data * s)

    def bw(g):
        # d/dx x*sig(x) = sig(x) * (1 + x * (1 - sig(x)))
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _record("silu", out, (a,), bw)


def activation(a: Tensor, kind: str) -> Tensor:
    """Dispatch helper for the supported elementwise activations."""
    if kind == "silu":
        return silu(a)
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {tuple(a.shape)}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bw(g):
        s = out.data
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), bw)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _record("sum", out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes])) if axes else 1
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        g = np.broadcast_to(g, a.data.shape) / count
        return (g.astype(a.data.dtype, copy=False),)

    return _record("mean", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record("transpose", out, (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(pieces, tensors))

    return _record("concat", out, tuple(tensors), bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    first = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != first.ndim:
            raise ShapeError(f"concat_channels: rank mismatch at input {i}")
        same = (t.shape[0] == first.shape[0] and t.shape[2:] == first.shape[2:])
        if not same:
            raise ShapeError(
                f"concat_channels: input {i} has shape {tuple(t.shape)}, "
                f"expected N={first.shape[0]} and spatial {tuple(first.shape[2:])}")
    return concat(tensors, axis=1)


# ---------------------------------------------------------------------------
# Matrix multiply
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.shape[-1]} (lhs) vs {b.shape[-2]} (rhs)")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                  a.data.shape)
        if b.requires_grad:
            gb = _reduce_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                  b.data.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class Conv2dSpec:
    """Static description of a 2-D convolution (square kernel)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: Optional[int] = None   # None -> "same" for stride 1, odd kernel
    bias: bool = False

    def __post_init__(self):
        if self.stride <= 0 or self.dilation <= 0:
            raise ShapeError(
                f"conv2d: stride/dilation must be positive, got "
                f"stride={self.stride} dilation={self.dilation}")
        if self.kernel <= 0:
            raise ShapeError(f"conv2d: kernel must be positive, got {self.kernel}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"conv2d: channels ({self.in_channels}->{self.out_channels}) "
                f"not divisible by groups={self.groups}")
        if self.padding is None:
            self.padding = self.dilation * (self.kernel - 1) // 2

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel, self.kernel)

    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    def out_size(self, size: int) -> int:
        eff = self.dilation * (self.kernel - 1) + 1
        out = (size + 2 * self.padding - eff) // self.stride + 1
        if out <= 0:
            raise ShapeError(
                f"conv2d: kernel span {eff} exceeds padded input of size "
                f"{size + 2 * self.padding}")
        return out


def _conv_windows(xp: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    span = dilation * (k - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x: Tensor, weight: Tensor, spec: Conv2dSpec,
           bias: Optional[Tensor] = None) -> Tensor:
    """Grouped/strided/dilated 2-D convolution (windowed-matmul fast path)."""
    _check_conv_args(x, weight, spec, bias)
    n, c, h, w = x.shape
    k, s, d, p, grp = spec.kernel, spec.stride, spec.dilation, spec.padding, spec.groups
    cout = spec.out_channels
    ho, wo = spec.out_size(h), spec.out_size(w)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _conv_windows(xp, k, s, d)   # [N, C, Ho, Wo, K, K], a view
    if grp == 1:
        out_data = np.einsum("nchwkl,ockl->nohw", win, weight.data, optimize=True)
    elif spec.depthwise:
        out_data = np.einsum("nchwkl,ckl->nchw", win, weight.data[:, 0], optimize=True)
    else:
        cg = c // grp
        win_g = win.reshape(n, grp, cg, ho, wo, k, k)
        w_g = weight.data.reshape(grp, cout // grp, cg, k, k)
        out_data = np.einsum("ngchwkl,gockl->ngohw", win_g, w_g,
                             optimize=True).reshape(n, cout, ho, wo)
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(out_data)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            if grp == 1:
                gw = np.einsum("nchwkl,nohw->ockl", win, g, optimize=True)
            elif spec.depthwise:
                gw = np.einsum("nchwkl,nchw->ckl", win, g,
                               optimize=True)[:, None, :, :]
            else:
                cg = c // grp
                win_g = win.reshape(n, grp, cg, ho, wo, k, k)
                g_g = g.reshape(n, grp, cout // grp, ho, wo)
                gw = np.einsum("ngchwkl,ngohw->gockl", win_g, g_g,
                               optimize=True).reshape(cout, cg, k, k)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if grp == 1:
                wmat = weight.data
            else:
                w_g = weight.data.reshape(grp, cout // grp, c // grp, k, k)
                g_g = g.reshape(n, grp, cout // grp, ho, wo)
            for ki in range(k):
                for li in range(k):
                    if grp == 1:
                        t = np.einsum("nohw,oc->nchw", g, wmat[:, :, ki, li],
                                      optimize=True)
                    elif spec.depthwise:
                        t = g * weight.data[:, 0, ki, li].reshape(1, c, 1, 1)
                    else:
                        t = np.einsum("ngohw,goc->ngchw", g_g, w_g[:, :, :, ki, li],
                                      optimize=True).reshape(n, c, ho, wo)
                    gxp[:, :, ki * d: ki * d + s * ho: s,
                        li * d: li * d + s * wo: s] += t
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _record("conv2d", out, parents, lambda g: bw(g)[:2])
    return _record("conv2d", out, parents, bw)


def conv2d_direct(x: Tensor, weight: Tensor, spec: Conv2dSpec,
                  bias: Optional[Tensor] = None) -> Tensor:
    """Direct-summation reference convolution (forward only, no graph).

    Slow by design; used to cross-check the windowed fast path.
    """
    _check_conv_args(x, weight, spec, bias)
    n, c, h, w = x.shape
    k, s, d, p, grp = spec.kernel, spec.stride, spec.dilation, spec.padding, spec.groups
    cout = spec.out_channels
    cg = c // grp
    og = cout // grp
    ho, wo = spec.out_size(h), spec.out_size(w)
    out = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
    for ni in range(n):
        for o in range(cout):
            gidx = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        cin = gidx * cg + ci
                        for ki in range(k):
                            hi = i * s + ki * d - p
                            if hi < 0 or hi >= h:
                                continue
                            for li in range(k):
                                wi = j * s + li * d - p
                                if wi < 0 or wi >= w:
                                    continue
                                acc += float(x.data[ni, cin, hi, wi]) * \
                                    float(weight.data[o, ci, ki, li])
                    out[ni, o, i, j] = acc
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    return Tensor(out)


def _check_conv_args(x, weight, spec, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got rank {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, spec expects "
            f"{spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(
            f"conv2d: weight shape {tuple(weight.shape)} does not match spec "
            f"{spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(
            f"conv2d: bias shape {tuple(bias.shape)} != ({spec.out_channels},)")


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one BatchNorm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and updates the running
    stats in place; eval mode uses the stored running stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D NCHW, got rank {x.ndim}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: affine params must have shape ({c},), got "
            f"{tuple(gamma.shape)} / {tuple(beta.shape)}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = ((1.0 - momentum) * state.mean + momentum * mean).astype(
            state.mean.dtype, copy=False)
        state.var = ((1.0 - momentum) * state.var + momentum * var).astype(
            state.var.dtype, copy=False)
    else:
        mean = state.mean.astype(x.data.dtype, copy=False)
        var = state.var.astype(x.data.dtype, copy=False)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = Tensor(gamma.data.reshape(1, c, 1, 1) * xhat +
                 beta.data.reshape(1, c, 1, 1))

    def bw(g):
        gxh = g * gamma.data.reshape(1, c, 1, 1)
        gx = None
        if x.requires_grad:
            if training:
                # gradient through the batch statistics
                sum_gxh = gxh.sum(axis=axes)
                sum_gxh_xhat = (gxh * xhat).sum(axis=axes)
                gx = (gxh - (sum_gxh / m).reshape(1, c, 1, 1)
                      - xhat * (sum_gxh_xhat / m).reshape(1, c, 1, 1))
                gx = gx * invstd.reshape(1, c, 1, 1)
            else:
                gx = gxh * invstd.reshape(1, c, 1, 1)
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record("batchnorm2d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Resampling and pooling
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE: dict = {}


def _upsample_matrix(size: int, scale: int, dtype) -> np.ndarray:
    """Dense [scale*size, size] bilinear interpolation matrix.

    Half-pixel centers (align_corners=False) with edge clamping.
    """
    key = (size, scale, np.dtype(dtype).str)
    mat = _UPSAMPLE_CACHE.get(key)
    if mat is None:
        out_size = size * scale
        mat = np.zeros((out_size, size), dtype=dtype)
        for j in range(out_size):
            src = (j + 0.5) / scale - 0.5
            src = min(max(src, 0.0), size - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, size - 1)
            t = src - i0
            mat[j, i0] += 1.0 - t
            mat[j, i1] += t
        _UPSAMPLE_CACHE[key] = mat
    return mat


def upsample_bilinear(x: Tensor, scale: int = 2) -> Tensor:
    """Bilinear upsampling with half-pixel centers and edge clamping."""
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear: input must be 4-D NCHW")
    if scale < 1:
        raise ShapeError(f"upsample_bilinear: scale must be >= 1, got {scale}")
    n, c, h, w = x.shape
    ah = _upsample_matrix(h, scale, x.data.dtype)
    aw = _upsample_matrix(w, scale, x.data.dtype)
    tmp = np.einsum("Yh,nchw->ncYw", ah, x.data, optimize=True)
    out = Tensor(np.ascontiguousarray(
        np.einsum("Xw,ncYw->ncYX", aw, tmp, optimize=True)))

    def bw(g):
        t = np.einsum("Xw,ncYX->ncYw", aw, g, optimize=True)
        gx = np.einsum("Yh,ncYw->nchw", ah, t, optimize=True)
        return (np.ascontiguousarray(gx),)

    return _record("upsample_bilinear", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool: input must be 4-D NCHW")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).astype(
            x.data.dtype, copy=False),)

    return _record("global_avg_pool", out, (x,), bw)


def broadcast_spatial(x: Tensor, hw: tuple) -> Tensor:
    """Broadcast a [N,C,1,1] map to [N,C,h,w]; gradient sums back."""
    if x.ndim != 4 or x.shape[2] != 1 or x.shape[3] != 1:
        raise ShapeError("broadcast_spatial: input must be [N,C,1,1]")
    h, w = hw
    out = Tensor(np.broadcast_to(x.data, (x.shape[0], x.shape[1], h, w)).copy())

    def bw(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return _record("broadcast_spatial", out, (x,), bw)
