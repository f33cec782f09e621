"""Token dictionaries and their layer-by-layer adaptive refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .params import param
from .tensor import Tensor, add, layer_norm, matmul, mul, sigmoid, softmax, sub, swapaxes


@dataclass(frozen=True)
class TokenDictionary:
    tokens: Tensor  # (M, d) learnable at layer 1, (B, M, d) once refined
    layer_index: int = 1
    per_sample: bool = False

    @property
    def size(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


def init_dictionary(M: int, d: int, seed: int | np.random.Generator) -> TokenDictionary:
    """Layer-1 dictionary with i.i.d. N(0, 0.02^2) tokens."""
    if M < 1 or d < 1:
        raise ValueError(f"dictionary needs M, d >= 1, got ({M}, {d})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TokenDictionary(param(rng.normal(0.0, 0.02, size=(M, d))), 1, False)


@dataclass
class AdrParams:
    sigma_raw: Tensor  # (1,), sigmoid gives the blend weight
    norm_gamma: Tensor | None  # (M, 1)
    norm_beta: Tensor | None  # (M, 1)

    @classmethod
    def init(cls, M: int, affine: bool = True) -> "AdrParams":
        if not affine:
            return cls(param([0.0]), None, None)
        return cls(param([0.0]), param(np.ones((M, 1))), param(np.zeros((M, 1))))

    def sigma(self) -> Tensor:
        return sigmoid(self.sigma_raw)


def refine(dictionary: TokenDictionary, attn: Tensor, x_next: Tensor, params: AdrParams,
           sigma: float | Tensor | None = None) -> TokenDictionary:
    """Rebuild every token from the layer output via the transposed attention map.

    ``D_hat = softmax_N(Norm(attn^T)) @ x_next`` and the result is
    ``sigma * D_hat + (1 - sigma) * D``. ``sigma`` overrides the learned blend.
    """
    if attn.shape[-2] != x_next.shape[-2]:
        raise DimensionError(f"refine: attention {attn.shape} and features {x_next.shape} disagree on N")
    if attn.shape[-1] != dictionary.size:
        raise DimensionError(f"refine: attention {attn.shape} does not match dictionary size {dictionary.size}")
    scores = layer_norm(swapaxes(attn, -1, -2))
    if params.norm_gamma is not None:
        scores = add(mul(scores, params.norm_gamma), params.norm_beta)
    d_hat = matmul(softmax(scores, -1), x_next)
    s = params.sigma() if sigma is None else sigma
    tokens = add(mul(s, d_hat), mul(sub(1.0, s), dictionary.tokens))
    return TokenDictionary(tokens, dictionary.layer_index + 1, True)
