"""Minimal reverse-mode autodiff tensor engine on numpy arrays.

Values are dense numpy arrays wrapped in :class:`Node` objects that record
enough bookkeeping to replay the backward pass (define-by-run: the graph is
rebuilt on every forward evaluation). Production code runs float32 with
reductions accumulated in float64; the same ops accept float64 arrays, which
is what the finite-difference verification suite uses.

Conventions:
  - volumes and feature maps are [c, w, h, d] or batched [n, c, w, h, d]
  - gradients accumulate additively across fan-out and across repeated
    backward() calls; call zero_grad() between optimizer steps
  - ops validate shapes up front and raise ValueError with both shapes
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Node", "Rng", "as_node", "parameter", "backward", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "sqrt", "exp", "log",
    "absolute", "clip", "silu", "sigmoid", "tanh", "relu", "softmax",
    "matmul", "reshape", "transpose", "narrow", "concat",
    "reduce_sum", "reduce_mean",
    "conv3d", "normalize_group", "upsample_nearest",
]

_grad_enabled = True


class no_grad:
    """Context manager: ops executed inside build no backward graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """A tensor value plus the op record needed for reverse-mode autodiff.

    ``value`` is a contiguous numpy array, ``grad`` is lazily allocated with
    the same shape and accumulates d(loss)/d(value). ``requires_grad`` marks
    nodes whose subgraph contains at least one parameter.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Optional[Callable] = None,
                 name: str = ""):
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        elif not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.value = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Node":
        return Node(self.value)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        tag = self.name or "node"
        return f"Node({tag}, shape={tuple(self.shape)}, dtype={self.value.dtype}, req={self.requires_grad})"


def as_node(x) -> Node:
    """Wrap arrays/scalars as constant nodes; pass Nodes through."""
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x))


def parameter(value, name: str = "") -> Node:
    """A trainable leaf: requires_grad=True with an eagerly zeroed grad slot."""
    n = Node(value, requires_grad=True, name=name)
    n.grad = np.zeros_like(n.value)
    return n


def _make(value, parents, backward_fn, name="") -> Node:
    """Build an op output node, pruning the graph when no parent needs grad."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, True, tuple(parents), backward_fn, name)
    return Node(value, name=name)


def _same_dtype(*nodes):
    dt = nodes[0].value.dtype
    for n in nodes[1:]:
        if n.value.dtype != dt:
            raise ValueError(f"dtype mismatch: {[m.value.dtype for m in nodes]}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast when reaching g.shape from shape."""
    if g.shape == shape:
        return g
    nd_extra = g.ndim - len(shape)
    if nd_extra:
        g = g.sum(axis=tuple(range(nd_extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def _coerce_pair(a, b):
    a = as_node(a)
    b = as_node(b)
    if a.value.dtype != b.value.dtype:
        # scalars follow the array operand; real mixed tensors are an error
        if a.value.ndim == 0:
            a = Node(a.value.astype(b.value.dtype), a.requires_grad, a._parents, a._backward)
        elif b.value.ndim == 0:
            b = Node(b.value.astype(a.value.dtype), b.requires_grad, b._parents, b._backward)
        else:
            raise ValueError(f"dtype mismatch: {a.value.dtype} vs {b.value.dtype}")
    return a, b


def add(a, b) -> Node:
    a, b = _coerce_pair(a, b)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = _coerce_pair(a, b)
    out = a.value - b.value

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = _coerce_pair(a, b)
    out = a.value * b.value
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = _coerce_pair(a, b)
    out = a.value / b.value
    av, bv = a.value, b.value

    def bw(g):
        ga = g / bv
        gb = -g * av / (bv * bv)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Node:
    a = as_node(a)

    def bw(g):
        return (-g,)

    return _make(-a.value, (a,), bw, "neg")


def power(a, p: float) -> Node:
    """a**p for a constant real exponent p."""
    a = as_node(a)
    p = float(p)
    out = a.value ** p
    av = a.value

    def bw(g):
        return (g * p * av ** (p - 1.0),)

    return _make(out, (a,), bw, "pow")


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)

    def bw(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), bw, "sqrt")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def log(a) -> Node:
    a = as_node(a)
    out = np.log(a.value)
    av = a.value

    def bw(g):
        return (g / av,)

    return _make(out, (a,), bw, "log")


def absolute(a) -> Node:
    a = as_node(a)
    out = np.abs(a.value)
    sign = np.sign(a.value)

    def bw(g):
        return (g * sign,)

    return _make(out, (a,), bw, "abs")


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes only through the interior."""
    a = as_node(a)
    out = np.clip(a.value, lo, hi)
    inside = ((a.value > lo) & (a.value < hi)).astype(a.value.dtype)

    def bw(g):
        return (g * inside,)

    return _make(out, (a,), bw, "clip")


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def sigmoid(a) -> Node:
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def silu(a) -> Node:
    a = as_node(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (a,), bw, "silu")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


def relu(a) -> Node:
    a = as_node(a)
    out = np.maximum(a.value, 0.0)
    mask = (a.value > 0.0).astype(a.value.dtype)

    def bw(g):
        return (g * mask,)

    return _make(out, (a,), bw, "relu")


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bw, "softmax")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    out = a.value.reshape(shape)
    orig = a.value.shape

    def bw(g):
        return (g.reshape(orig),)

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes) -> Node:
    a = as_node(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.value.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (a,), bw, "transpose")


def narrow(a, axis: int, start: int, length: int) -> Node:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = as_node(a)
    axis = axis % a.value.ndim
    if start < 0 or start + length > a.value.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] out of bounds for "
                         f"axis {axis} of shape {a.value.shape}")
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.value[idx])
    shape = a.value.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, (a,), bw, "narrow")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    _same_dtype(*nodes)
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    return _make(out, tuple(nodes), bw, "concat")


# --------------------------------------------------------------------------
# reductions (accumulated in float64, result cast back to input dtype)
# --------------------------------------------------------------------------

def _reduce_axes(a: Node, axis):
    if axis is None:
        return tuple(range(a.value.ndim))
    if isinstance(axis, int):
        return (axis % a.value.ndim,)
    return tuple(ax % a.value.ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _reduce_axes(a, axis)
    out = a.value.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.value.dtype)
    shape = a.value.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape), shape).copy(),)

    return _make(out, (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _reduce_axes(a, axis)
    count = 1
    for ax in axes:
        count *= a.value.shape[ax]
    out = a.value.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.value.dtype)
    shape = a.value.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    inv = 1.0 / count

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape) * inv, shape).copy(),)

    return _make(out, (a,), bw, "mean")


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """np.matmul semantics for 2-D operands with optional stacked batch axes."""
    a, b = _coerce_pair(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.value.shape} @ {b.value.shape}")
    out = np.matmul(a.value, b.value)
    av, bv = a.value, b.value

    def bw(g):
        ga = np.matmul(g, bv.swapaxes(-1, -2))
        gb = np.matmul(av.swapaxes(-1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# 3-D convolution via im2col + BLAS matmul
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple) -> np.ndarray:
    """[n, c, wp, hp, dp] padded input -> contiguous [n, c*k^3, W*H*D] patches."""
    n, c, wp, hp, dp = xp.shape
    W, H, D = out_sp
    sn, sc, sx, sy, sz = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, k, W, H, D),
        strides=(sn, sc, sx, sy, sz, stride * sx, stride * sy, stride * sz),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k * k, W * H * D)


def _col2im(gcol: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int,
            out_sp: tuple) -> np.ndarray:
    """Scatter-add column gradients back to input layout [n, c, w, h, d]."""
    n, c, w, h, d = x_shape
    W, H, D = out_sp
    gxp = np.zeros((n, c, w + 2 * pad, h + 2 * pad, d + 2 * pad), dtype=gcol.dtype)
    g6 = gcol.reshape(n, c, k, k, k, W, H, D)
    for ka in range(k):
        for kb in range(k):
            for kc in range(k):
                gxp[:, :,
                    ka: ka + stride * W: stride,
                    kb: kb + stride * H: stride,
                    kc: kc + stride * D: stride] += g6[:, :, ka, kb, kc]
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp)


def conv3d(x, kernel, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of [c_in,w,h,d] (or [n,c_in,w,h,d]) with [c_out,c_in,k,k,k].

    Output extent per axis is floor((e + 2*pad - k)/stride) + 1. Differentiable
    w.r.t. both input and kernel; the patch matrix is cached for the backward
    pass and released when backward(free_graph=True) consumes it.
    """
    x = as_node(x)
    kernel = as_node(kernel)
    _same_dtype(x, kernel)
    squeeze = x.value.ndim == 4
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 5 or kernel.value.ndim != 5:
        raise ValueError(f"conv3d expects [*, c,w,h,d] input and [c_out,c_in,k,k,k] kernel, "
                         f"got {x.value.shape} and {kernel.value.shape}")
    n, c_in, w, h, d = xv.shape
    c_out, kc_in, k, k2, k3 = kernel.value.shape
    if not (k == k2 == k3):
        raise ValueError(f"conv3d kernel must be cubic, got {kernel.value.shape}")
    if k % 2 != 1:
        raise ValueError(f"conv3d kernel extent must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError(f"conv3d pad must be >= 0, got {pad}")
    if kc_in != c_in:
        raise ValueError(f"conv3d channel mismatch: input has c_in={c_in} but kernel "
                         f"expects c_in={kc_in} (input {x.value.shape}, kernel {kernel.value.shape})")
    W = (w + 2 * pad - k) // stride + 1
    H = (h + 2 * pad - k) // stride + 1
    D = (d + 2 * pad - k) // stride + 1
    if min(W, H, D) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.value.shape}, "
                         f"k={k}, stride={stride}, pad={pad}")

    # 1x1x1 stride-1 convolutions reduce to a channel-mixing matmul; the patch
    # matrix is then just a reshaped view and the backward scatter is a reshape
    pointwise = k == 1 and stride == 1 and pad == 0
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xv
    if pointwise:
        col = xp.reshape(n, c_in, W * H * D)
    else:
        col = _im2col(xp, k, stride, (W, H, D))      # [n, c_in*k^3, M]
    k2d = kernel.value.reshape(c_out, c_in * k * k * k)
    out = np.matmul(k2d, col).reshape(n, c_out, W, H, D)
    if squeeze:
        out = out[0]

    x_needs = x.requires_grad
    k_needs = kernel.requires_grad
    x_shape = xv.shape

    def bw(g):
        g5 = g.reshape(n, c_out, W, H, D)
        g3 = g5.reshape(n, c_out, W * H * D)
        gk = None
        gx = None
        if k_needs:
            gk = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.value.shape)
        if x_needs:
            if pointwise:
                gx = np.matmul(k2d.T, g3).reshape(x_shape)
            elif stride == 1:
                # input gradient of a stride-1 correlation is itself a
                # correlation of the padded output gradient with the
                # channel-swapped, tap-reversed kernel -- a contiguous gemm
                # instead of a 27-tap scatter-add
                pg = k - 1 - pad
                gp = np.pad(g5, ((0, 0), (0, 0), (pg, pg), (pg, pg), (pg, pg)))
                kf = np.ascontiguousarray(
                    kernel.value.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
                gcolT = _im2col(gp, k, 1, x_shape[2:])
                gx = np.matmul(kf.reshape(c_in, c_out * k * k * k), gcolT).reshape(x_shape)
            else:
                gcol = np.matmul(k2d.T, g3)
                gx = _col2im(gcol, x_shape, k, stride, pad, (W, H, D))
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _make(out, (x, kernel), bw, "conv3d")


# --------------------------------------------------------------------------
# group normalization (fused op: normalize per group, then per-channel affine)
# --------------------------------------------------------------------------

def normalize_group(x, gamma, beta, groups: int, eps: float = 1e-5) -> Node:
    """Group normalization over [c,w,h,d] or [n,c,w,h,d] inputs.

    Each group of c/groups channels is standardized to zero mean and unit
    variance over its (channels-in-group x spatial) elements, then scaled and
    shifted by the per-channel affine (gamma, beta), each shaped [c].
    """
    x = as_node(x)
    gamma = as_node(gamma)
    beta = as_node(beta)
    _same_dtype(x, gamma, beta)
    squeeze = x.value.ndim == 4
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 5:
        raise ValueError(f"normalize_group expects [*, c,w,h,d], got {x.value.shape}")
    n, c, w, h, d = xv.shape
    if eps <= 0:
        raise ValueError(f"normalize_group eps must be > 0, got {eps}")
    if c % groups != 0:
        raise ValueError(f"normalize_group: {c} channels not divisible by {groups} groups")
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ValueError(f"normalize_group affine must be shape ({c},), got "
                         f"{gamma.value.shape} and {beta.value.shape}")

    xg = xv.reshape(n, groups, c // groups, w, h, d)
    mu = xg.mean(axis=(2, 3, 4, 5), keepdims=True, dtype=np.float64)
    var = np.square(xg.astype(np.float64) - mu).mean(axis=(2, 3, 4, 5), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = ((xg - mu.astype(xv.dtype)) * inv).reshape(n, c, w, h, d)
    gview = gamma.value.reshape(1, c, 1, 1, 1)
    out = xhat * gview + beta.value.reshape(1, c, 1, 1, 1)
    if squeeze:
        out = out[0]

    def bw(g):
        g5 = g[None] if squeeze else g
        gbeta = g5.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(xv.dtype)
        ggamma = (g5 * xhat).sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(xv.dtype)
        gx = None
        if x.requires_grad:
            dxhat = (g5 * gview).reshape(n, groups, c // groups, w, h, d)
            xhg = xhat.reshape(n, groups, c // groups, w, h, d)
            m1 = dxhat.mean(axis=(2, 3, 4, 5), keepdims=True, dtype=np.float64).astype(xv.dtype)
            m2 = (dxhat * xhg).mean(axis=(2, 3, 4, 5), keepdims=True, dtype=np.float64).astype(xv.dtype)
            gx = ((dxhat - m1 - xhg * m2) * inv).reshape(n, c, w, h, d)
            if squeeze:
                gx = gx[0]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "group_norm")


# --------------------------------------------------------------------------
# nearest-neighbor 3-D upsampling
# --------------------------------------------------------------------------

def upsample_nearest(x, factors) -> Node:
    """Repeat each voxel along the three spatial axes by integer factors."""
    x = as_node(x)
    fw, fh, fd = (int(f) for f in factors)
    if min(fw, fh, fd) < 1:
        raise ValueError(f"upsample factors must be >= 1, got {factors}")
    squeeze = x.value.ndim == 4
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 5:
        raise ValueError(f"upsample_nearest expects [*, c,w,h,d], got {x.value.shape}")
    n, c, w, h, d = xv.shape
    out = np.broadcast_to(
        xv[:, :, :, None, :, None, :, None],
        (n, c, w, fw, h, fh, d, fd),
    ).reshape(n, c, w * fw, h * fh, d * fd).copy()
    if squeeze:
        out = out[0]

    def bw(g):
        g5 = g[None] if squeeze else g
        gx = g5.reshape(n, c, w, fw, h, fh, d, fd).sum(axis=(3, 5, 7), dtype=np.float64)
        gx = gx.astype(xv.dtype)
        if squeeze:
            gx = gx[0]
        return (gx,)

    return _make(out, (x,), bw, "upsample")


# --------------------------------------------------------------------------
# backward driver
# --------------------------------------------------------------------------

def _topo_order(root: Node) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, free_graph: bool = False):
    """Populate grad on every node reachable from ``loss``.

    ``loss`` must be scalar. Repeated calls without zero_grad accumulate.
    With free_graph=True the op records (and their cached buffers, e.g. conv
    patch matrices) are dropped as soon as they are consumed, which caps the
    memory peak during training; the graph cannot be replayed afterwards.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.value.shape)}")
    if not loss.requires_grad:
        loss.accumulate(np.ones_like(loss.value))
        return
    order = _topo_order(loss)
    flows = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        flow = flows.pop(id(node), None)
        if flow is None:
            continue
        node.accumulate(flow)
        if node._backward is None:
            continue
        pgrads = node._backward(flow)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.value.dtype:
                pg = pg.astype(parent.value.dtype)
            pid = id(parent)
            if pid in flows:
                flows[pid] = flows[pid] + pg
            else:
                flows[pid] = pg
        if free_graph:
            node._backward = None
            node._parents = ()


# --------------------------------------------------------------------------
# counter-based RNG (splitmix64): identical seed => identical stream
# --------------------------------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(idx: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = idx * _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SM_M1
        z = (z ^ (z >> np.uint64(27))) * _SM_M2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int) -> int:
    """Mix integer tags into a seed to carve independent substreams."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        for t in tags:
            z = _splitmix(np.uint64((int(z) + int(t) + 0x632BE59BD9B4E019) & 0xFFFFFFFFFFFFFFFF))
    return int(z)


class Rng:
    """Deterministic counter-based generator (splitmix64 finalizer).

    The stream is a pure function of (seed, counter): draw i is
    splitmix(seed_mixed + i), so identical seeds give identical streams and
    the state is a single 64-bit counter.
    """

    def __init__(self, seed: int):
        self._base = np.uint64(derive_seed(seed, 0x5EED))
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix(self._base + idx)

    def uniform(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = u.astype(dtype).reshape(shape) if shape else dtype(u[0])
        return out

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normal draws via Box-Muller on paired uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        u1 = 1.0 - (raw[:m] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.astype(dtype).reshape(shape) if shape else dtype(z[0])

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Uniform integers in [lo, hi). Modulo bias is < (hi-lo)/2^64."""
        if hi <= lo:
            raise ValueError(f"integers needs hi > lo, got [{lo}, {hi})")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(hi - lo)
        vals = (self._raw(n) % span).astype(np.int64) + lo
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniform keys)."""
        keys = self._raw(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int) -> int:
        return int(self.integers(0, n))

    def spawn(self, *tags: int) -> "Rng":
        """Independent substream keyed by integer tags."""
        return Rng(derive_seed(int(self._base), *tags, 0xC0FFEE))
