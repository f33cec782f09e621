"""Shifted-window self-attention and token-dictionary cross-attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError
from .params import Linear, param, trunc_normal
from .tensor import (
    Tensor,
    add,
    cosine_sim,
    div,
    matmul,
    pad_reflect,
    permute,
    reshape,
    roll,
    softmax,
    swapaxes,
    take,
)

TAU_INIT = 0.5
TAU_RANGE = (0.01, 2.0)
MASK_VALUE = -1e9


@dataclass
class WindowAttentionParams:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    rpb_table: Tensor | None  # ((2w-1)^2, heads)
    heads: int = field(metadata={"skip": True})
    window: int = field(metadata={"skip": True})
    shift: int = field(default=0, metadata={"skip": True})

    def __post_init__(self):
        d = self.wq.w.shape[0]
        if d % self.heads:
            raise ContractError(f"dim {d} not divisible by {self.heads} heads")
        if not 0 <= self.shift < self.window:
            raise ContractError(f"shift {self.shift} must lie in [0, {self.window})")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, window: int, shift: int = 0,
             position_bias: bool = True) -> "WindowAttentionParams":
        wq, wk, wv, wo = (Linear.init(rng, d, d) for _ in range(4))
        table = param(trunc_normal(rng, ((2 * window - 1) ** 2, heads))) if position_bias else None
        return cls(wq, wk, wv, wo, table, heads, window, shift)

    @property
    def dim(self) -> int:
        return self.wq.w.shape[0]


@dataclass
class TdcaParams:
    wq: Tensor  # (d, inner)
    wk: Tensor  # (d, inner)
    wv: Tensor  # (d, d)
    tau: Tensor  # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, inner_dim: int) -> "TdcaParams":
        if inner_dim < 1:
            raise ContractError("TDCA inner width must be a positive integer")
        return cls(param(trunc_normal(rng, (d, inner_dim))), param(trunc_normal(rng, (d, inner_dim))),
                   param(trunc_normal(rng, (d, d))), param([TAU_INIT]))

    @property
    def inner_dim(self) -> int:
        return self.wq.shape[1]

    def clamp_tau(self) -> None:
        np.clip(self.tau.data, *TAU_RANGE, out=self.tau.data)


def multi_head_attention(x: Tensor, wq: Linear, wk: Linear, wv: Linear, wo: Linear, heads: int,
                         bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Dense softmax attention over the second-to-last axis of ``x`` (``(..., n, d)``).

    ``bias`` broadcasts against logits of shape ``(..., heads, n, n)``; ``mask``
    holds 0 for allowed pairs and a large negative value elsewhere.
    """
    *lead, n, d = x.shape
    hd = d // heads
    k_lead = len(lead)

    def split(t: Tensor) -> Tensor:
        t = reshape(t, (*lead, n, heads, hd))
        return permute(t, (*range(k_lead), k_lead + 1, k_lead, k_lead + 2))

    q, k, v = split(wq(x)), split(wk(x)), split(wv(x))
    logits = matmul(q, swapaxes(k, -1, -2)) * (hd ** -0.5)
    if bias is not None:
        logits = add(logits, bias)
    if mask is not None:
        logits = add(logits, Tensor(mask))
    out = matmul(softmax(logits, -1), v)
    out = permute(out, (*range(k_lead), k_lead + 1, k_lead, k_lead + 2))
    return wo(reshape(out, (*lead, n, d)))


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """``(w*w, w*w)`` index into the ``(2w-1)^2`` bias table."""
    ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@lru_cache(maxsize=None)
def shifted_window_mask(Hp: int, Wp: int, window: int, shift: int) -> np.ndarray:
    """Additive mask ``(num_windows, 1, w*w, w*w)`` for the cyclically shifted layout."""
    region = np.zeros((Hp, Wp), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[hs, ws] = cnt
            cnt += 1
    win = region.reshape(Hp // window, window, Wp // window, window).transpose(0, 2, 1, 3)
    win = win.reshape(-1, window * window)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)[:, None]


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected (N, d) or (B, N, d) tokens, got {x.shape}")


def window_msa(x: Tensor, params: WindowAttentionParams, H: int, W: int) -> Tensor:
    """(Shifted) window self-attention over an ``H x W`` token grid."""
    xb, squeeze = _as_batched(x)
    B, N, d = xb.shape
    if N != H * W:
        raise ContractError(f"token count {N} != H*W = {H}*{W}")
    w, s = params.window, params.shift
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    img = reshape(xb, (B, H, W, d))
    img = pad_reflect(pad_reflect(img, 1, Hp - H), 2, Wp - W)
    if s:
        img = roll(roll(img, -s, 1), -s, 2)
    nh, nw = Hp // w, Wp // w
    win = permute(reshape(img, (B, nh, w, nw, w, d)), (0, 1, 3, 2, 4, 5))
    win = reshape(win, (B, nh * nw, w * w, d))

    bias = None
    if params.rpb_table is not None:
        idx = relative_position_index(w)
        bias = take(params.rpb_table, idx.reshape(-1), 0)
        bias = permute(reshape(bias, (w * w, w * w, params.heads)), (2, 0, 1))
    mask = shifted_window_mask(Hp, Wp, w, s) if s else None

    out = multi_head_attention(win, params.wq, params.wk, params.wv, params.wo, params.heads, bias, mask)
    out = permute(reshape(out, (B, nh, nw, w, w, d)), (0, 1, 3, 2, 4, 5))
    out = reshape(out, (B, Hp, Wp, d))
    if s:
        out = roll(roll(out, s, 1), s, 2)
    if Hp != H or Wp != W:
        out = out[:, :H, :W]
    out = reshape(out, (B, N, d))
    return reshape(out, (N, d)) if squeeze else out


def tdca(x: Tensor, dictionary: Tensor, params: TdcaParams) -> tuple[Tensor, Tensor]:
    """Token-dictionary cross-attention.

    Queries come from the image tokens ``x`` (``(N, d)`` or ``(B, N, d)``), keys and
    values from the dictionary (``(M, d)`` shared or ``(B, M, d)`` per sample).
    Returns the enhanced tokens and the ``(.., N, M)`` attention map.
    """
    if dictionary.shape[-1] != x.shape[-1]:
        raise DimensionError(f"tdca: token width {x.shape} does not match dictionary {dictionary.shape}")
    if dictionary.shape[-2] < 1:
        raise ContractError("tdca needs a dictionary with at least one token")
    q = matmul(x, params.wq)
    k = matmul(dictionary, params.wk)
    v = matmul(dictionary, params.wv)
    attn = softmax(div(cosine_sim(q, k), params.tau), -1)
    return matmul(attn, v), attn
