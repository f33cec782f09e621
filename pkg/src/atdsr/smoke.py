"""Desk-scale learning check: train a tiny model on synthetic images, compare with bicubic."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import build_dataset, quantize, synthetic_images
from .metrics import EvalProtocol, bicubic_up, psnr
from .model import build_model, preset, upscale
from .train import TrainConfig, train_loop


def _smoke_train() -> TrainConfig:
    # halving points sit at the same fractions of the run as the lightweight model's long schedule
    return TrainConfig(batch=32, lr=2e-3, iters=2000, warmup_iters=50,
                       lr_milestones=(1000, 1600, 1800, 1900, 1960), patch_lr=16, scale=2, seed=0)


@dataclass
class SmokeConfig:
    preset: str = "atd_tiny"
    train_images: int = 200
    test_images: int = 20
    image_size: int = 64
    data_seed: int = 1
    test_seed: int = 2
    model_seed: int = 0
    train: TrainConfig = field(default_factory=_smoke_train)


@dataclass
class SmokeResult:
    sr_psnr: float
    bicubic_psnr: float
    seconds: float
    curve: list

    @property
    def gain(self) -> float:
        return self.sr_psnr - self.bicubic_psnr


def held_out_psnr(model, pairs, scale: int) -> tuple[float, float]:
    """Mean Y-PSNR (border = scale) of the model and of bicubic on 8-bit outputs."""
    proto = EvalProtocol(convert_to_y=True, crop_border=scale)
    sr = [psnr(quantize(upscale(p.lr, model)), p.hr, proto) for p in pairs]
    base = [psnr(quantize(bicubic_up(p.lr, scale)), p.hr, proto) for p in pairs]
    return float(np.mean(sr)), float(np.mean(base))


def run_smoke(cfg: SmokeConfig = SmokeConfig(), on_checkpoint=None) -> SmokeResult:
    scale = cfg.train.scale
    train = build_dataset(synthetic_images(cfg.train_images, cfg.image_size, cfg.data_seed), scale)
    test = build_dataset(synthetic_images(cfg.test_images, cfg.image_size, cfg.test_seed, "val"), scale)
    model = build_model(preset(cfg.preset, scale), cfg.model_seed)
    start = time.perf_counter()
    result = train_loop(model, train, cfg.train, on_checkpoint)
    seconds = time.perf_counter() - start
    sr, base = held_out_psnr(model, test, scale)
    return SmokeResult(sr, base, seconds, result.curve)
