"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` collects the nodes reachable from a scalar loss, replays
them in reverse execution order and accumulates gradients on the leaves.

Arrays are row-major; image tensors are channel-first (``C x H x W``, with an
optional leading batch axis).
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

COSINE_EPS = 1e-12
LAYER_NORM_EPS = 1e-6

_seq = itertools.count()
_grad_enabled = True


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


@dataclass
class GradTape:
    """Differentiable nodes reachable from a root, in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return GradTape([])
    tape = GradTape.from_root(loss)
    tape.replay(loss, seed)
    return tape


def check_finite(named: Iterable[tuple[str, Tensor]], include_grads: bool = False) -> None:
    """Raise :class:`NonFiniteError` naming the first tensor holding NaN/Inf."""
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite values in tensor {name!r} {t.shape}")
        if include_grads and t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for tensor {name!r} {t.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    return _make(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(key)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), bw)


def take(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather slices along ``axis`` with a constant integer index array."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        gm = np.moveaxis(g, axis, 0).reshape((idx.size,) + tuple(np.delete(shape, axis)))
        out = np.zeros((shape[axis],) + gm.shape[1:])
        np.add.at(out, idx.reshape(-1), gm)
        return (np.moveaxis(out, 0, axis),)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, k] = x[b, idx[b, k]]`` for ``x`` of shape ``(B, N, d)``."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} incompatible with index {idx.shape}")
    B, N, d = x.shape
    flat = (idx + (np.arange(B) * N)[:, None]).reshape(-1)

    def bw(g):
        out = np.zeros((B * N, d))
        np.add.at(out, flat, g.reshape(-1, d))
        return (out.reshape(B, N, d),)

    return _make(x.data.reshape(B * N, d)[flat].reshape(B, idx.shape[1], d), (x,), bw)


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    n = x.shape[axis]
    return take(x, (np.arange(n) - shift) % n, axis)


def pad_reflect(x: Tensor, axis: int, after: int) -> Tensor:
    """Reflect-pad ``after`` entries at the end of ``axis`` (numpy ``reflect`` rule)."""
    if after == 0:
        return x
    idx = np.pad(np.arange(x.shape[axis]), (0, after), mode="reflect")
    return take(x, idx, axis)


# ---------------------------------------------------------------------------
# linear algebra and fused kernels
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    g_data = None if gamma is None else gamma.data
    out = xhat if gamma is None else xhat * g_data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        dxhat = g if g_data is None else g * g_data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = None if gamma is None else np.sum(g * xhat, axis=lead)
        dbeta = None if beta is None else np.sum(g, axis=lead)
        return dx, dgamma, dbeta

    parents = (x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0))
    return _make(out, parents, bw)


def l2_normalize(x: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Rows divided by ``max(||row||, eps)``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    m = np.maximum(norm, eps)
    out = x.data / m
    active = norm > eps

    def bw(g):
        proj = np.where(active, np.sum(g * out, axis=-1, keepdims=True), 0.0)
        return ((g - out * proj) / m,)

    return _make(out, (x,), bw)


def cosine_sim(q: Tensor, k: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarity, ``(..., N, c) x (..., M, c) -> (..., N, M)``."""
    if eps <= 0:
        raise ContractError("cosine_sim eps must be positive")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"cosine_sim: widths differ, {q.shape} vs {k.shape}")
    return matmul(l2_normalize(q, eps), swapaxes(l2_normalize(k, eps), -1, -2))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1; ``x`` is ``(C,H,W)`` or ``(B,C,H,W)``."""
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects a (C_out, C_in, 3, 3) kernel, got {w.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    B, C, H, W = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + H, j:j + W] += np.tensordot(w.data[:, :, i, j], g4, axes=([0], [1])).transpose(1, 0, 2, 3)
            gx = gxp[:, :, 1:-1, 1:-1]
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return _make(out, parents, bw)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """``(..., s*s*C, H, W) -> (..., C, s*H, s*W)``."""
    *lead, ch, H, W = x.shape
    if ch % (s * s):
        raise DimensionError(f"pixel_shuffle: {ch} channels not divisible by {s}^2")
    C = ch // (s * s)
    n = len(lead)
    y = reshape(x, (*lead, C, s, s, H, W))
    y = permute(y, (*range(n), n, n + 3, n + 1, n + 4, n + 2))
    return reshape(y, (*lead, C, s * H, s * W))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    *lead, C, sH, sW = x.shape
    if sH % s or sW % s:
        raise DimensionError(f"pixel_unshuffle: spatial {sH}x{sW} not divisible by {s}")
    H, W = sH // s, sW // s
    n = len(lead)
    y = reshape(x, (*lead, C, H, s, W, s))
    y = permute(y, (*range(n), n, n + 2, n + 4, n + 1, n + 3))
    return reshape(y, (*lead, C * s * s, H, W))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5,
               tol: float = 1e-5, n_samples: int | None = None, seed: int = 0,
               floor: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    The error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``
    over the checked coordinates; ``floor`` keeps identically-zero gradients from
    dividing roundoff by zero. ``n_samples`` restricts the check to a random
    subset of coordinates.
    """
    if not 0 < h <= 1e-2:
        raise ContractError(f"finite-difference step must lie in (0, 1e-2], got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    loss = f(probe)
    if loss.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad

    flat_idx = np.arange(base.size)
    if n_samples is not None and n_samples < base.size:
        flat_idx = np.sort(np.random.default_rng(seed).choice(base.size, n_samples, replace=False))
    numeric = np.empty(flat_idx.size)
    work = base.reshape(-1).copy()
    with no_grad():
        for n, i in enumerate(flat_idx):
            orig = work[i]
            work[i] = orig + h
            fp = f(Tensor(work.reshape(base.shape).copy())).item()
            work[i] = orig - h
            fm = f(Tensor(work.reshape(base.shape).copy())).item()
            work[i] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)[flat_idx]
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    err = float(np.max(np.abs(a - numeric), initial=0.0) / scale)
    return GradCheckReport(err, tol, int(flat_idx.size))
