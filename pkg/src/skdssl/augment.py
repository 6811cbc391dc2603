"""Two-view augmentation: random resized crop, horizontal flip, Gaussian blur.

Every random draw for a view comes from a stream derived purely from
``(global_seed, epoch, sample_index, view_slot)``, so the views of a batch do
not depend on the order in which samples are processed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, InputError

_MASK64 = (1 << 64) - 1
# splitmix64 increment and finaliser multipliers
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

FIRST, SECOND = 0, 1


@dataclass(frozen=True)
class AugmentationConfig:
    view_size: int = 112
    crop_area_range: tuple = (0.2, 1.0)
    crop_aspect_range: tuple = (3 / 4, 4 / 3)
    flip_probability: float = 0.5
    blur_probability: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_kernel: int = 9

    def __post_init__(self):
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise ContractError(f"crop_area_range must satisfy 0 < min <= max <= 1, got {self.crop_area_range}")
        a_lo, a_hi = self.crop_aspect_range
        if not 0 < a_lo <= a_hi:
            raise ContractError(f"bad crop_aspect_range {self.crop_aspect_range}")
        if self.view_size < 8:
            raise ContractError(f"view_size must be >= 8, got {self.view_size}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ContractError(f"blur_kernel must be odd, got {self.blur_kernel}")
        for name in ("flip_probability", "blur_probability"):
            if not 0 <= getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in [0, 1]")
        s_lo, s_hi = self.blur_sigma_range
        if not 0 < s_lo <= s_hi:
            raise ContractError(f"bad blur_sigma_range {self.blur_sigma_range}")


@dataclass
class View:
    pixels: np.ndarray
    source_index: int
    view_slot: int


def _splitmix64(state):
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


def mix_seed(global_seed, epoch, sample_index, view_slot):
    """Fold the four integers into one 64-bit seed with splitmix64 rounds."""
    state = 0
    out = 0
    for value in (global_seed, epoch, sample_index, view_slot):
        state, out = _splitmix64((state ^ (value & _MASK64) ^ out) & _MASK64)
    return out


def derive_stream(global_seed, epoch, sample_index, view_slot):
    return np.random.Generator(np.random.PCG64(mix_seed(global_seed, epoch, sample_index, view_slot)))


def gaussian_kernel(sigma, size):
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def hflip(image):
    return image[:, ::-1]


def _sample_crop(h, w, cfg, rng):
    area = h * w
    log_lo, log_hi = math.log(cfg.crop_aspect_range[0]), math.log(cfg.crop_aspect_range[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_area_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def sample_view(image, cfg, stream, source_index=0, view_slot=FIRST):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InputError(f"expected a 2-d grayscale image, got shape {image.shape}")
    h, w = image.shape
    if min(h, w) < cfg.view_size / 4:
        raise InputError(f"image {h}x{w} is smaller than view_size/4 = {cfg.view_size / 4:g}")
    top, left, ch, cw = _sample_crop(h, w, cfg, stream)
    out = kernels.crop_resize(image, top, left, ch, cw, cfg.view_size, cfg.view_size)
    if stream.uniform() < cfg.flip_probability:
        out = hflip(out)
    if stream.uniform() < cfg.blur_probability:
        sigma = stream.uniform(*cfg.blur_sigma_range)
        out = kernels.blur(np.ascontiguousarray(out), gaussian_kernel(sigma, cfg.blur_kernel))
    return View(np.clip(out, 0.0, 1.0), source_index, view_slot)


def two_views(images, indices, cfg, seed, epoch):
    """Both augmented views for a batch as ``(N, 1, S, S)`` arrays."""
    first, second = [], []
    for img, idx in zip(images, indices):
        first.append(sample_view(img, cfg, derive_stream(seed, epoch, int(idx), FIRST), int(idx), FIRST).pixels)
        second.append(sample_view(img, cfg, derive_stream(seed, epoch, int(idx), SECOND), int(idx), SECOND).pixels)
    return np.stack(first)[:, None], np.stack(second)[:, None]


def resize_image(image, size):
    """Deterministic whole-image bilinear resize (evaluation path)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h == size and w == size:
        return image
    return kernels.crop_resize(image, 0, 0, h, w, size, size)
