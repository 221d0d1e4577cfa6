"""Network building blocks on top of the autodiff engine.

Parameters live in a ParamStore keyed by hierarchical dotted names, which is
also the unit of checkpointing and of the freeze contract (a frozen store is
snapshotted and byte-compared after training steps). Layers are lightweight
callables that register their parameters at construction time.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import engine as E


class ParamStore:
    """Named collection of trainable arrays with gradient slots."""

    def __init__(self):
        self._params: dict[str, E.Node] = {}

    def add(self, name: str, value: np.ndarray) -> E.Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        node = E.parameter(np.ascontiguousarray(value, dtype=np.float32), name=name)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> E.Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(k, self._params[k]) for k in self.names()]

    def n_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self._params[k].value.copy() for k in self.names()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for k, v in state.items():
            node = self._params[k]
            v = np.asarray(v, dtype=np.float32)
            if v.shape != node.value.shape:
                raise ValueError(f"shape mismatch for '{k}': {v.shape} vs {node.value.shape}")
            node.value = np.ascontiguousarray(v)

    def snapshot_bytes(self) -> bytes:
        return b"".join(self._params[k].value.tobytes() for k in self.names())


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale the store's gradients so their global L2 norm is <= max_norm.

    Returns the pre-clip norm. Gradients of parameters untouched by the last
    backward pass (grad None) are treated as zero.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    sq = 0.0
    grads = [p.grad for _, p in store.items() if p.grad is not None]
    for g in grads:
        sq += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads:
            g *= scale
    return norm


def _fan_in_uniform(rng: E.Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return (rng.uniform(shape, dtype=np.float64) * 2.0 - 1.0).astype(np.float32) * bound


class Conv3d:
    """3-D convolution layer (kernel + bias), stride 1 or 2, odd kernel."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int = 3, stride: int = 1, pad: Optional[int] = None,
                 rng: Optional[E.Rng] = None, bias: bool = True):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = c_in * k ** 3
        rng = rng or E.Rng(0)
        self.w = store.add(f"{name}.w", _fan_in_uniform(rng, (c_out, c_in, k, k, k), fan_in))
        self.b = store.add(f"{name}.b", _fan_in_uniform(rng, (c_out,), fan_in)) if bias else None
        self._c_out = c_out

    def __call__(self, x: E.Node) -> E.Node:
        y = E.conv3d(x, self.w, stride=self.stride, pad=self.pad)
        if self.b is not None:
            bshape = (self._c_out, 1, 1, 1) if y.value.ndim == 4 else (1, self._c_out, 1, 1, 1)
            y = y + E.reshape(self.b, bshape)
        return y


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: Optional[E.Rng] = None):
        rng = rng or E.Rng(0)
        self.w = store.add(f"{name}.w", _fan_in_uniform(rng, (n_in, n_out), n_in))
        self.b = store.add(f"{name}.b", _fan_in_uniform(rng, (n_out,), n_in))

    def __call__(self, x: E.Node) -> E.Node:
        return E.matmul(x, self.w) + self.b


class GroupNorm:
    """Group normalization with per-channel affine; ``enabled=False`` builds
    an identity layer with no parameters (the normalization-off variant)."""

    def __init__(self, store: ParamStore, name: str, c: int, groups: int = 8,
                 eps: float = 1e-5, enabled: bool = True):
        self.enabled = enabled
        self.eps = eps
        if enabled:
            self.groups = math.gcd(groups, c) if c % groups else groups
            self.gamma = store.add(f"{name}.gamma", np.ones(c, dtype=np.float32))
            self.beta = store.add(f"{name}.beta", np.zeros(c, dtype=np.float32))

    def __call__(self, x: E.Node) -> E.Node:
        if not self.enabled:
            return x
        return E.normalize_group(x, self.gamma, self.beta, self.groups, self.eps)


def sinusoidal_time_embedding(t_values, dim: int = 64) -> np.ndarray:
    """Classic sin/cos positional features of timestep indices, shape [n, dim]."""
    t = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(np.float32)


class ResBlock3d:
    """norm -> silu -> conv -> (+ time) -> norm -> silu -> conv, with skip.

    The time embedding, when provided, is projected per block and added right
    after the first convolution. A 1x1x1 convolution matches channel counts
    on the skip path when c_in != c_out.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 groups: int = 8, temb_dim: Optional[int] = None,
                 use_norm: bool = True, rng: Optional[E.Rng] = None):
        rng = rng or E.Rng(0)
        self.n1 = GroupNorm(store, f"{name}.n1", c_in, groups, enabled=use_norm)
        self.c1 = Conv3d(store, f"{name}.c1", c_in, c_out, rng=rng.spawn(1))
        self.n2 = GroupNorm(store, f"{name}.n2", c_out, groups, enabled=use_norm)
        self.c2 = Conv3d(store, f"{name}.c2", c_out, c_out, rng=rng.spawn(2))
        self.temb_proj = Linear(store, f"{name}.temb", temb_dim, c_out,
                                rng=rng.spawn(3)) if temb_dim else None
        self.skip = Conv3d(store, f"{name}.skip", c_in, c_out, k=1, pad=0,
                           rng=rng.spawn(4), bias=False) if c_in != c_out else None
        self._c_out = c_out

    def __call__(self, x: E.Node, temb: Optional[E.Node] = None) -> E.Node:
        h = self.c1(E.silu(self.n1(x)))
        if self.temb_proj is not None and temb is not None:
            tproj = self.temb_proj(E.silu(temb))  # [n, c_out]
            if h.value.ndim == 5:
                tproj = E.reshape(tproj, (temb.value.shape[0], self._c_out, 1, 1, 1))
            else:
                tproj = E.reshape(tproj, (self._c_out, 1, 1, 1))
            h = h + tproj
        h = self.c2(E.silu(self.n2(h)))
        s = self.skip(x) if self.skip is not None else x
        return s + h


class SelfAttention3d:
    """Single-head self-attention over flattened spatial positions, residual."""

    def __init__(self, store: ParamStore, name: str, c: int, groups: int = 8,
                 use_norm: bool = True, rng: Optional[E.Rng] = None):
        rng = rng or E.Rng(0)
        self.norm = GroupNorm(store, f"{name}.norm", c, groups, enabled=use_norm)
        self.wq = store.add(f"{name}.wq", _fan_in_uniform(rng.spawn(1), (c, c), c))
        self.wk = store.add(f"{name}.wk", _fan_in_uniform(rng.spawn(2), (c, c), c))
        self.wv = store.add(f"{name}.wv", _fan_in_uniform(rng.spawn(3), (c, c), c))
        self.wo = store.add(f"{name}.wo", _fan_in_uniform(rng.spawn(4), (c, c), c))
        self.c = c

    def __call__(self, x: E.Node) -> E.Node:
        squeeze = x.value.ndim == 4
        shp = x.value.shape
        n = 1 if squeeze else shp[0]
        c = self.c
        m = int(np.prod(shp[-3:]))
        h = self.norm(x)
        h2 = E.reshape(h, (n, c, m))
        q = E.matmul(self.wq, h2)
        k = E.matmul(self.wk, h2)
        v = E.matmul(self.wv, h2)
        scores = E.matmul(E.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(c))
        attn = E.softmax(scores, axis=-1)
        out = E.matmul(v, E.transpose(attn, (0, 2, 1)))
        out = E.matmul(self.wo, out)
        return x + E.reshape(out, shp)


class Adam:
    """Adaptive-moment optimizer with bias correction; lr is mutable so a
    plateau scheduler can halve it in place."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.value) for k, p in store.items()}
        self._v = {k: np.zeros_like(p.value) for k, p in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.value -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        self.store.zero_grad()


class PlateauScheduler:
    """Halve lr after ``patience`` epochs without improvement of the watched
    validation quantity (strict improvement, relative threshold 1e-4)."""

    def __init__(self, opt: Adam, patience: int = 10, factor: float = 0.5,
                 min_lr: float = 1e-6):
        self.opt = opt
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.stale = 0

    def step(self, value: float) -> bool:
        """Record one validation value; returns True when lr was reduced."""
        if value < self.best * (1.0 - 1e-4):
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale > self.patience and self.opt.lr > self.min_lr:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.stale = 0
            return True
        return False
