"""Category-based self-attention: argmax categories, fixed-size groups, exact inversion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import multi_head_attention
from .errors import ContractError, DimensionError
from .params import Linear
from .tensor import Tensor, gather_rows, reshape, take

MODES = ("train", "eval")


@dataclass(frozen=True)
class CategoryPartition:
    labels: np.ndarray  # (N,) argmax category per token
    permutation: np.ndarray  # (N,) token index -> slot in the flattened ordering
    slots: np.ndarray  # (group_count * group_size,) token index held by each slot
    group_count: int
    group_size: int
    pad_count: int

    @property
    def n_tokens(self) -> int:
        return self.labels.shape[0]

    @property
    def groups(self) -> np.ndarray:
        return self.slots.reshape(self.group_count, self.group_size)


def categorize(attn) -> np.ndarray:
    """Index of the most similar dictionary token for every row (ties -> lowest index)."""
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    return np.argmax(a, axis=-1)


def sub_categorize(labels, n_s: int, mode: str = "eval", seed=0) -> CategoryPartition:
    """Sort tokens by category and cut the flattened order into groups of ``n_s``.

    In ``train`` mode the order inside each category is a seeded random
    permutation, in ``eval`` mode it is the original token order. The group
    size is ``min(n_s, N)``; a short final group is padded with copies of its
    last real token.
    """
    if n_s <= 0:
        raise ContractError(f"group size must be positive, got {n_s}")
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    N = labels.shape[0]
    if N == 0:
        raise ContractError("cannot partition zero tokens")
    if mode == "train":
        pre = np.random.default_rng(seed).permutation(N)
        order = pre[np.argsort(labels[pre], kind="stable")]
    else:
        order = np.argsort(labels, kind="stable")
    size = min(n_s, N)
    count = -(-N // size)
    pad = count * size - N
    slots = np.concatenate([order, np.full(pad, order[-1], dtype=order.dtype)])
    permutation = np.empty(N, dtype=np.int64)
    permutation[order] = np.arange(N)
    return CategoryPartition(labels, permutation, slots, count, size, pad)


def gather_groups(x: Tensor, partition: CategoryPartition) -> Tensor:
    """Rows of ``x`` (``(N, d)``) laid out slot by slot, pads included."""
    if x.shape[-2] != partition.n_tokens:
        raise ContractError(f"partition covers {partition.n_tokens} tokens, input has {x.shape[-2]}")
    return take(x, partition.slots, -2)


def uncategorize(grouped: Tensor, partition: CategoryPartition) -> Tensor:
    """Put every token back at its original position, discarding pad slots."""
    expected = partition.group_count * partition.group_size
    if grouped.shape[-2] != expected:
        raise ContractError(f"expected {expected} grouped rows, got {grouped.shape[-2]}")
    return take(grouped, partition.permutation, -2)


@dataclass
class AcMsaParams:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    heads: int = field(metadata={"skip": True})

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int) -> "AcMsaParams":
        if d % heads:
            raise ContractError(f"dim {d} not divisible by {heads} heads")
        return cls(*(Linear.init(rng, d, d) for _ in range(4)), heads)


def ac_msa(x: Tensor, attn: Tensor, params: AcMsaParams, n_s: int, mode: str = "eval", seed: int = 0,
           partitions: list | None = None) -> Tensor:
    """Multi-head self-attention inside each sub-category.

    ``x`` is ``(N, d)`` or ``(B, N, d)`` and ``attn`` the matching TDCA map.
    Sample ``b`` of a batch is shuffled with the seed entropy ``[seed, b]``.
    If ``partitions`` is a list, the per-sample partitions are appended to it.
    """
    if attn.shape[:-1] != x.shape[:-1]:
        raise ContractError(f"ac_msa: tokens {x.shape} and attention {attn.shape} disagree")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    elif x.ndim != 3:
        raise DimensionError(f"ac_msa expects (N, d) or (B, N, d), got {x.shape}")
    labels = categorize(attn).reshape(x.shape[0], -1)
    parts = [sub_categorize(labels[b], n_s, mode, [seed, b]) for b in range(x.shape[0])]
    if partitions is not None:
        partitions.extend(parts)
    B, N, d = x.shape
    G, size = parts[0].group_count, parts[0].group_size
    grouped = gather_rows(x, np.stack([p.slots for p in parts]))
    grouped = reshape(grouped, (B, G, size, d))
    out = multi_head_attention(grouped, params.wq, params.wk, params.wv, params.wo, params.heads)
    out = gather_rows(reshape(out, (B, G * size, d)), np.stack([p.permutation for p in parts]))
    return reshape(out, (N, d)) if squeeze else out
