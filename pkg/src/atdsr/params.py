"""Parameter containers, initialisers and named-parameter traversal."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, layer_norm, linear


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std^2) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class Linear:
    w: Tensor  # (d_in, d_out)
    b: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True) -> "Linear":
        w = param(trunc_normal(rng, (d_in, d_out)))
        return cls(w, param(np.zeros(d_out)) if bias else None)

    @classmethod
    def zeros(cls, d_in: int, d_out: int, bias: bool = True) -> "Linear":
        return cls(param(np.zeros((d_in, d_out))), param(np.zeros(d_out)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(param(np.ones(d)), param(np.zeros(d)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class Conv3x3:
    w: Tensor  # (C_out, C_in, 3, 3)
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int) -> "Conv3x3":
        bound = 1.0 / np.sqrt(c_in * 9)
        return cls(param(rng.uniform(-bound, bound, (c_out, c_in, 3, 3))),
                   param(rng.uniform(-bound, bound, c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.name, tensor)`` for every trainable tensor under ``obj``.

    Walks dataclass fields and lists in declaration order, so names are stable.
    """
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            if f.metadata.get("skip"):
                continue
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), sub)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def count_tensor_params(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))
