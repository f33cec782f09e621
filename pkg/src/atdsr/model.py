"""ATD transformer layer, ATD block and the full super-resolution network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import TdcaParams, WindowAttentionParams, tdca, window_msa
from .categorize import AcMsaParams, ac_msa
from .dictionary import AdrParams, TokenDictionary, init_dictionary, refine
from .errors import ConfigError, ContractError
from .params import Conv3x3, LayerNorm, Linear, count_tensor_params, named_parameters
from .tensor import Tensor, add, clamp, gelu, no_grad, permute, pixel_shuffle, reshape, sub


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``inner_dim`` is the reduced TDCA similarity width (``d / r``), stored
    directly because the published reduction ratios are not integer divisors.
    ``ffn_ratio`` 1.5 keeps both published presets within 10% of their
    reported parameter counts.
    """

    dim: int = 24
    blocks: int = 1
    layers_per_block: int = 2
    dict_size: int = 8
    inner_dim: int = 4
    n_s: int = 16
    window: int = 8
    heads: int = 2
    ffn_ratio: float = 1.5
    scale: int = 2
    global_residual: bool = True
    position_bias: bool = True
    norm_affine: bool = True
    rgb_mean: tuple[float, float, float] = (0.4488, 0.4371, 0.4040)

    def __post_init__(self):
        object.__setattr__(self, "rgb_mean", tuple(float(v) for v in self.rgb_mean))
        if len(self.rgb_mean) != 3:
            raise ConfigError(f"rgb_mean needs 3 values, got {self.rgb_mean}")
        counts = (self.dim, self.blocks, self.layers_per_block, self.dict_size, self.inner_dim,
                  self.n_s, self.window, self.heads)
        if min(counts) < 1:
            raise ConfigError(f"all counts must be >= 1: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.ffn_ratio <= 0:
            raise ConfigError("ffn_ratio must be positive")

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_ratio * self.dim))

    def to_dict(self) -> dict:
        return asdict(self)


_PRESETS = {
    "atd": dict(dim=210, blocks=6, layers_per_block=6, dict_size=128, inner_dim=20, n_s=128,
                window=16, heads=6),
    "atd_light": dict(dim=48, blocks=4, layers_per_block=6, dict_size=64, inner_dim=8, n_s=128,
                      window=8, heads=4),
    "atd_tiny": dict(dim=24, blocks=1, layers_per_block=2, dict_size=8, inner_dim=4, n_s=16,
                     window=8, heads=2),
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, scale: int = 2, **overrides) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(_PRESETS)}")
    return ModelConfig(**{**_PRESETS[name], "scale": scale, **overrides})


@dataclass
class TransformerLayerParams:
    norm1: LayerNorm
    wmsa: WindowAttentionParams
    tdca: TdcaParams
    acmsa: AcMsaParams
    norm2: LayerNorm
    ffn_in: Linear
    ffn_out: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig, shift: int) -> "TransformerLayerParams":
        d = cfg.dim
        return cls(
            norm1=LayerNorm.init(d),
            wmsa=WindowAttentionParams.init(rng, d, cfg.heads, cfg.window, shift, cfg.position_bias),
            tdca=TdcaParams.init(rng, d, cfg.inner_dim),
            acmsa=AcMsaParams.init(rng, d, cfg.heads),
            norm2=LayerNorm.init(d),
            ffn_in=Linear.init(rng, d, cfg.ffn_hidden),
            ffn_out=Linear.init(rng, cfg.ffn_hidden, d),
        )


@dataclass
class AtdBlockParams:
    layers: list[TransformerLayerParams]
    dictionary: TokenDictionary
    adr: AdrParams
    conv: Conv3x3

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig) -> "AtdBlockParams":
        layers = [TransformerLayerParams.init(rng, cfg, 0 if i % 2 == 0 else cfg.window // 2)
                  for i in range(cfg.layers_per_block)]
        return cls(layers, init_dictionary(cfg.dict_size, cfg.dim, rng),
                   AdrParams.init(cfg.dict_size, cfg.norm_affine), Conv3x3.init(rng, cfg.dim, cfg.dim))


@dataclass
class AtdModel:
    config: ModelConfig = field(metadata={"skip": True})
    conv_first: Conv3x3
    blocks: list[AtdBlockParams]
    conv_last: Conv3x3

    def named_parameters(self):
        return list(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self)]

    def clamp_constrained(self) -> None:
        for block in self.blocks:
            for layer in block.layers:
                layer.tdca.clamp_tau()


def build_model(cfg: ModelConfig, seed: int = 0) -> AtdModel:
    rng = np.random.default_rng(seed)
    conv_first = Conv3x3.init(rng, 3, cfg.dim)
    blocks = [AtdBlockParams.init(rng, cfg) for _ in range(cfg.blocks)]
    conv_last = Conv3x3.init(rng, cfg.dim, 3 * cfg.scale**2)
    return AtdModel(cfg, conv_first, blocks, conv_last)


def count_params(model) -> int:
    """Number of scalar learnable parameters."""
    return count_tensor_params(model)


def layer_seed(seed: int, block: int, layer: int) -> int:
    return int(np.random.SeedSequence([seed, block, layer]).generate_state(1)[0])


def transformer_layer(x: Tensor, dictionary: TokenDictionary, params: TransformerLayerParams,
                      adr: AdrParams, H: int, W: int, n_s: int, mode: str = "eval", seed: int = 0,
                      partitions: list | None = None) -> tuple[Tensor, TokenDictionary]:
    """Three parallel attention branches on the normalised input, then the FFN."""
    if x.shape[-2] != H * W:
        raise ContractError(f"token count {x.shape[-2]} != H*W = {H}*{W}")
    h = params.norm1(x)
    t, attn = tdca(h, dictionary.tokens, params.tdca)
    a = ac_msa(h, attn, params.acmsa, n_s, mode, seed, partitions)
    w = window_msa(h, params.wmsa, H, W)
    x1 = add(add(add(x, t), a), w)
    out = add(x1, params.ffn_out(gelu(params.ffn_in(params.norm2(x1)))))
    return out, refine(dictionary, attn, out, adr)


def tokens_to_image(x: Tensor, H: int, W: int) -> Tensor:
    B, N, d = x.shape
    return permute(reshape(x, (B, H, W, d)), (0, 3, 1, 2))


def image_to_tokens(img: Tensor) -> Tensor:
    B, d, H, W = img.shape
    return reshape(permute(img, (0, 2, 3, 1)), (B, H * W, d))


def atd_block(x: Tensor, params: AtdBlockParams, H: int, W: int, n_s: int, mode: str = "eval",
              seed: int = 0, block_index: int = 0, trace: dict | None = None) -> Tensor:
    """Layers threaded by the refined dictionary, a 3x3 conv, and the block residual.

    ``x`` is ``(B, N, d)``. When ``trace`` is given it receives the dictionary
    after each layer under ``("dict", block, layer)`` and the AC-MSA partitions
    under ``("partitions", block, layer)``.
    """
    dictionary = params.dictionary
    h = x
    for li, layer in enumerate(params.layers):
        parts = [] if trace is not None else None
        h, dictionary = transformer_layer(h, dictionary, layer, params.adr, H, W, n_s, mode,
                                          layer_seed(seed, block_index, li), parts)
        if trace is not None:
            trace[("dict", block_index, li)] = dictionary
            trace[("partitions", block_index, li)] = parts
    body = params.conv(tokens_to_image(h, H, W))
    return add(x, image_to_tokens(body))


def forward(img, model: AtdModel, mode: str = "eval", seed: int = 0, trace: dict | None = None) -> Tensor:
    """LR image ``(3, H, W)`` or ``(B, 3, H, W)`` to SR image of ``scale``x the size."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    squeeze = img.ndim == 3
    if squeeze:
        img = reshape(img, (1, *img.shape))
    if img.ndim != 4 or img.shape[1] != 3:
        raise ContractError(f"expected a 3-channel image, got shape {img.shape}")
    cfg = model.config
    H, W = img.shape[2:]
    mean = np.asarray(cfg.rgb_mean).reshape(1, 3, 1, 1)
    shallow = image_to_tokens(model.conv_first(sub(img, mean)))
    x = shallow
    for bi, block in enumerate(model.blocks):
        x = atd_block(x, block, H, W, cfg.n_s, mode, seed, bi, trace)
    if cfg.global_residual:
        x = add(x, shallow)
    out = add(pixel_shuffle(model.conv_last(tokens_to_image(x, H, W)), cfg.scale), mean)
    return reshape(out, out.shape[1:]) if squeeze else out


def upscale(img: np.ndarray, model: AtdModel, seed: int = 0) -> np.ndarray:
    """Inference: eval-mode forward without a graph, clamped to [0, 1]."""
    with no_grad():
        out = clamp(forward(Tensor(img), model, "eval", seed), 0.0, 1.0)
    return out.data
