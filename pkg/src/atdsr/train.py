"""Desk-scale training: L1 loss, AdamW, warm-up plus step-halving schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import ImagePair, sample_batch, stack_batch, usable_pairs
from .errors import ConfigError, ContractError, NonFiniteError
from .model import AtdModel, forward
from .tensor import Tensor, backward, check_finite, mean, sub, tabs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch: int = 8
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.9)
    weight_decay: float = 0.0
    eps: float = 1e-8
    iters: int = 2000
    lr_milestones: tuple[int, ...] = ()
    warmup_iters: int = 0
    patch_lr: int = 32
    scale: int = 2
    seed: int = 0
    checkpoint_every: int = 0
    # optional second stage with larger patches, same recipe restarted
    stage2_iters: int = 0
    stage2_patch_lr: int = 48

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if any(b >= a for a, b in zip(self.lr_milestones[1:], self.lr_milestones)):
            raise ConfigError(f"milestones must be strictly increasing: {self.lr_milestones}")
        if self.lr_milestones and self.lr_milestones[-1] >= max(self.iters, 1):
            raise ConfigError(f"milestones must be < iters ({self.iters}): {self.lr_milestones}")
        if self.batch < 1 or self.patch_lr < 1 or self.iters < 0 or self.warmup_iters < 0:
            raise ConfigError("batch and patch_lr must be positive; iters and warmup_iters non-negative")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


def l1_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss: shapes differ, {pred.shape} vs {target.shape}")
    return mean(tabs(sub(pred, target)))


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then halve at every milestone reached."""
    if iteration < 0:
        raise ContractError("iteration must be >= 0")
    if iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    passed = sum(1 for m in cfg.lr_milestones if iteration >= m)
    return cfg.lr * 0.5**passed


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> None:
    """In-place AdamW update: decay ``p -= lr*wd*p``, then the bias-corrected Adam step."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainResult:
    curve: list[tuple[int, float, float]]  # (iteration, loss, lr)
    checkpoints: list[int]
    optimizer: AdamState
    rng: np.random.Generator


def step_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def train_loop(model: AtdModel, dataset: list[ImagePair], cfg: TrainConfig,
               on_checkpoint: Callable[[int, AtdModel, AdamState, np.random.Generator], None] | None = None,
               optimizer: AdamState | None = None, rng: np.random.Generator | None = None,
               start: int = 0) -> TrainResult:
    """Run ``cfg.iters`` (plus optional stage-2) optimisation steps.

    Iterations are numbered from 1; step ``i`` uses ``lr_schedule(i)``.
    """
    if cfg.scale != model.config.scale:
        raise ConfigError(f"train scale {cfg.scale} != model scale {model.config.scale}")
    stages = [(cfg.iters, cfg.patch_lr)]
    if cfg.stage2_iters:
        stages.append((cfg.stage2_iters, cfg.stage2_patch_lr))
    # filter once so undersized images are reported once, not every step
    pools = [usable_pairs(dataset, p) if n else [] for n, p in stages]
    named = model.named_parameters()
    opt = optimizer or AdamState()
    rng = rng or np.random.default_rng(cfg.seed)
    curve, saved = [], []
    total = 0
    for stage, ((iters, patch), pool) in enumerate(zip(stages, pools)):
        for it in range(1, iters + 1):
            total += 1
            if total <= start:
                continue
            lr = lr_schedule(it, cfg)
            lr_np, hr_np = stack_batch(sample_batch(pool, cfg.batch, patch, cfg.scale, rng))
            for _, t in named:
                t.grad = None
            loss = l1_loss(forward(lr_np, model, "train", step_seed(cfg.seed, total)), hr_np)
            if not np.isfinite(loss.item()):
                check_finite(named)
                raise NonFiniteError(f"loss became non-finite at iteration {total}")
            backward(loss)
            check_finite(named, include_grads=True)
            adamw_step({n: t.data for n, t in named}, {n: t.grad for n, t in named}, opt, lr,
                       cfg.betas, cfg.weight_decay, cfg.eps)
            model.clamp_constrained()
            curve.append((total, loss.item(), lr))
            log.info("iter %d stage %d loss %.6f lr %.3e", total, stage + 1, loss.item(), lr)
            if cfg.checkpoint_every and total % cfg.checkpoint_every == 0:
                saved.append(total)
                if on_checkpoint is not None:
                    on_checkpoint(total, model, opt, rng)
    return TrainResult(curve, saved, opt, rng)
