"""PSNR / SSIM under the usual SR benchmark protocol, and bicubic resampling.

Images are float arrays in [0, 1], either ``(3, H, W)`` RGB or ``(H, W)`` gray.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

PSNR_CAP = 100.0
_Y_WEIGHTS = np.array([65.481, 128.553, 24.966])


@dataclass(frozen=True)
class EvalProtocol:
    convert_to_y: bool = True
    crop_border: int = 0
    data_range: float = 255.0

    def __post_init__(self):
        if self.crop_border < 0:
            raise ContractError("crop_border must be >= 0")


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma on the 0..255 scale (16..235) from RGB in [0, 1]."""
    return np.tensordot(_Y_WEIGHTS, img, axes=([0], [0])) + 16.0


def _prepare(img: np.ndarray, proto: EvalProtocol) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and proto.convert_to_y:
        out = rgb_to_y(img) * (proto.data_range / 255.0)
    else:
        out = img * proto.data_range
    c = proto.crop_border
    if c:
        out = out[..., c:-c, c:-c]
    return out


def _check_pair(a, b):
    if np.shape(a) != np.shape(b):
        raise ContractError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray, proto: EvalProtocol = EvalProtocol()) -> float:
    _check_pair(a, b)
    x, y = _prepare(a, proto), _prepare(b, proto)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * np.log10(proto.data_range**2 / mse)


@lru_cache(maxsize=None)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=-1) @ g
    return sliding_window_view(rows, n, axis=-2) @ g


def _ssim_plane(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, proto: EvalProtocol = EvalProtocol()) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    _check_pair(a, b)
    x, y = _prepare(a, proto), _prepare(b, proto)
    if min(x.shape[-2:]) < 11:
        raise ContractError(f"ssim needs both sides >= 11 after cropping, got {x.shape[-2:]}")
    if x.ndim == 2:
        return _ssim_plane(x, y, proto.data_range)
    return float(np.mean([_ssim_plane(x[c], y[c], proto.data_range) for c in range(x.shape[0])]))


# ---------------------------------------------------------------------------
# bicubic
# ---------------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax**2, ax**3
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=None)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic interpolation weights.

    Downscaling stretches the kernel by the scale (antialiasing); taps past the
    border are clamped to the edge sample and every row sums to one.
    """
    f = n_out / n_in
    stretch = min(f, 1.0)
    width = 4.0 / stretch
    taps = int(np.ceil(width)) + 2
    u = (np.arange(n_out) + 0.5) / f - 0.5
    left = np.floor(u - width / 2).astype(np.int64)
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = stretch * cubic((u[:, None] - idx) * stretch)
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return mat


_SCALES = (2, 3, 4)


def bicubic_resize(img: np.ndarray, scale: float) -> np.ndarray:
    """Resize the last two axes by ``scale`` (2, 3, 4 or their reciprocals)."""
    up = round(scale) if scale >= 1 else round(1 / scale)
    if up not in _SCALES or not np.isclose(scale if scale >= 1 else 1 / scale, up):
        raise ContractError(f"scale must be one of 2, 3, 4 or a reciprocal, got {scale}")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[-2:]
    if scale >= 1:
        oh, ow = H * up, W * up
    else:
        oh, ow = -(-H // up), -(-W // up)
    mh, mw = resize_matrix(H, oh), resize_matrix(W, ow)
    return mh @ img @ mw.T


def bicubic_down(img: np.ndarray, s: int) -> np.ndarray:
    return bicubic_resize(img, 1.0 / s)


def bicubic_up(img: np.ndarray, s: int) -> np.ndarray:
    return bicubic_resize(img, float(s))
