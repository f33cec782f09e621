"""LR/HR pair construction, dihedral augmentation and synthetic toy images."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .metrics import bicubic_down

log = logging.getLogger(__name__)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round to 8-bit levels, as a PNG round trip would."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def mod_crop(img: np.ndarray, s: int) -> np.ndarray:
    H, W = img.shape[-2:]
    return img[..., : H - H % s, : W - W % s]


@dataclass(frozen=True)
class ImagePair:
    name: str
    hr: np.ndarray  # (3, sH, sW)
    lr: np.ndarray  # (3, H, W)


@dataclass(frozen=True)
class SamplePair:
    lr_patch: np.ndarray
    hr_patch: np.ndarray
    image: str
    offset: tuple[int, int]  # LR top-left (y, x)
    aug: int


def make_pair(name: str, hr: np.ndarray, scale: int) -> ImagePair:
    """Bicubic-degrade an HR image (values in [0, 1]) into an aligned pair."""
    hr = mod_crop(np.asarray(hr, dtype=np.float64), scale)
    return ImagePair(name, hr, quantize(bicubic_down(hr, scale)))


def build_dataset(images: dict[str, np.ndarray], scale: int) -> list[ImagePair]:
    return [make_pair(name, img, scale) for name, img in images.items()]


def dihedral(img: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 symmetries of the square: optional horizontal flip, then ``code % 4`` quarter turns."""
    if code // 4:
        img = img[..., ::-1]
    return np.rot90(img, code % 4, axes=(-2, -1))


def dihedral_inverse(img: np.ndarray, code: int) -> np.ndarray:
    img = np.rot90(img, -(code % 4), axes=(-2, -1))
    if code // 4:
        img = img[..., ::-1]
    return img


def usable_pairs(dataset: list[ImagePair], patch_lr: int) -> list[ImagePair]:
    ok = []
    for pair in dataset:
        if min(pair.lr.shape[-2:]) < patch_lr:
            log.warning("skipping %s: LR size %s smaller than patch %d", pair.name, pair.lr.shape[-2:], patch_lr)
            continue
        ok.append(pair)
    if not ok:
        raise DataError(f"no training image has an LR side of at least {patch_lr}")
    return ok


def sample_batch(dataset: list[ImagePair], batch: int, patch_lr: int, scale: int,
                 rng: np.random.Generator) -> list[SamplePair]:
    """Random image, random aligned crop and a random dihedral code per sample."""
    pairs = usable_pairs(dataset, patch_lr)
    out = []
    for _ in range(batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        H, W = pair.lr.shape[-2:]
        y = int(rng.integers(H - patch_lr + 1))
        x = int(rng.integers(W - patch_lr + 1))
        code = int(rng.integers(8))
        lr = pair.lr[:, y:y + patch_lr, x:x + patch_lr]
        hp = patch_lr * scale
        hr = pair.hr[:, y * scale:y * scale + hp, x * scale:x * scale + hp]
        out.append(SamplePair(np.ascontiguousarray(dihedral(lr, code)),
                              np.ascontiguousarray(dihedral(hr, code)), pair.name, (y, x), code))
    return out


def stack_batch(samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.lr_patch for s in samples]), np.stack([s.hr_patch for s in samples])


# ---------------------------------------------------------------------------
# synthetic toy images
# ---------------------------------------------------------------------------


def synthetic_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Piecewise-smooth RGB image: gradient background, shapes and stripes."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    base = rng.uniform(0.1, 0.9, 3)
    tilt = rng.uniform(-0.3, 0.3, (3, 2))
    for c in range(3):
        img[c] = base[c] + tilt[c, 0] * (yy - 0.5) + tilt[c, 1] * (xx - 0.5)
    for _ in range(int(rng.integers(3, 8))):
        color = rng.uniform(0.0, 1.0, 3)[:, None, None]
        kind = rng.integers(4)
        if kind == 0:
            y0, x0 = rng.uniform(0, 0.8, 2)
            h, w = rng.uniform(0.1, 0.5, 2)
            m = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:
            cy, cx = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.05, 0.3)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        elif kind == 2:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(0.08, 0.25)
            phase = np.cos(theta) * yy + np.sin(theta) * xx
            m = (np.floor(phase / (period / 2)) % 2) == 0
            band = rng.uniform(0, 0.6)
            m &= (yy >= band) & (yy < band + rng.uniform(0.2, 0.5))
        else:
            theta = rng.uniform(0, np.pi)
            off = rng.uniform(-0.3, 0.3)
            m = np.cos(theta) * (yy - 0.5) + np.sin(theta) * (xx - 0.5) > off
        img = np.where(m[None], color, img)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(n: int, size: int = 64, seed: int = 0, prefix: str = "toy") -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {f"{prefix}{i:04d}": quantize(synthetic_image(rng, size)) for i in range(n)}
