"""Grid-mask augmentation for images, PV map tensors and the BEV point set.

A mask is a lattice of period ``p``; in every ``p x p`` cell the square of
side ``round(ratio * p)`` starting at ``offset`` is masked.  A location
``(a, b)`` is masked iff ``(a - ox) mod p < s`` and ``(b - oy) mod p < s``.
Image masks use integer pixel coordinates ``(u, v)``; BEV masks use ego
``(x, y)`` in meters.

Seeds: every mask is drawn from ``numpy.random.default_rng`` seeded with a
``SeedSequence`` built from ``(base_seed, frame, modality, camera)``, see
:func:`derive_seed`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .pv_encoder import PVMapTensor

IMAGE = "image"
BEV = "bev"
_MODALITY_CODES = {"image": 0, "pv": 1, "bev": 2}


@dataclass(frozen=True)
class GridMaskConfig:
    """Sampling ranges; image periods are drawn as integers, BEV periods as floats."""

    period: tuple[float, float]
    ratio: tuple[float, float]
    domain: str = IMAGE

    def __post_init__(self):
        p0, p1 = self.period
        r0, r1 = self.ratio
        if not (0 < p0 <= p1):
            raise ValueError(f"invalid period range {self.period}")
        if not (0 <= r0 <= r1 < 1):
            raise ValueError(f"invalid ratio range {self.ratio}")
        if self.domain not in (IMAGE, BEV):
            raise ValueError(f"unknown grid-mask domain {self.domain!r}")


IMAGE_DEFAULTS = GridMaskConfig((60, 120), (0.2, 0.4), IMAGE)
BEV_DEFAULTS = GridMaskConfig((4.0, 8.0), (0.2, 0.4), BEV)


@dataclass(frozen=True)
class GridMask:
    period: float
    ratio: float
    offset: tuple[float, float]
    domain: str = IMAGE

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not 0 <= self.ratio < 1:
            raise ValueError("ratio must lie in [0, 1)")

    @property
    def side(self) -> float:
        return math.floor(self.ratio * self.period + 0.5)

    def masked(self, a, b) -> np.ndarray:
        """Boolean mask for coordinates ``a`` (u or x) and ``b`` (v or y); broadcasts."""
        s = self.side
        if s <= 0:
            return np.zeros(np.broadcast(a, b).shape, dtype=bool)
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return (np.mod(a - self.offset[0], self.period) < s) & (np.mod(b - self.offset[1], self.period) < s)

    def image_mask(self, height: int, width: int) -> np.ndarray:
        """H×W boolean array, true where masked."""
        u = np.arange(width)
        v = np.arange(height)
        return self.masked(u[None, :], v[:, None])


def derive_seed(base_seed: int, frame: int = 0, modality: str = "image", camera: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(frame), _MODALITY_CODES[modality], int(camera)])


def sample_mask(seed, config: GridMaskConfig) -> GridMask:
    """Draw period, ratio and offset uniformly from ``config``; pure in ``seed``."""
    rng = np.random.default_rng(seed)
    p0, p1 = config.period
    if config.domain == IMAGE:
        period = float(rng.integers(int(round(p0)), int(round(p1)) + 1))
    else:
        period = float(rng.uniform(p0, p1))
    ratio = float(rng.uniform(*config.ratio))
    offset = tuple(float(x) for x in rng.uniform(0.0, period, size=2))
    return GridMask(period, ratio, offset, config.domain)


def _check_domain(mask: GridMask, domain: str) -> None:
    if mask.domain != domain:
        raise ValueError(f"expected a {domain} mask, got {mask.domain}")


def apply_image(mask: GridMask, image: np.ndarray) -> np.ndarray:
    """Zero masked pixels of an H×W or H×W×C image."""
    _check_domain(mask, IMAGE)
    out = np.array(image, copy=True)
    m = mask.image_mask(out.shape[0], out.shape[1])
    out[m] = 0
    return out


def apply_pv(mask: GridMask, t: PVMapTensor) -> PVMapTensor:
    """Masked pixels become "no prior here": every channel 0 except delta_norm = 1."""
    _check_domain(mask, IMAGE)
    H, W, _ = t.data.shape
    m = mask.image_mask(H, W)
    data = t.data.copy()
    data[m] = 0.0
    data[m, 6 + t.E] = 1.0
    return t.replace(data)


def apply_bev(mask: GridMask, patch_ego: PointCloud) -> PointCloud:
    """Drop points whose (x, y) falls in a masked ground cell, whatever their z."""
    _check_domain(mask, BEV)
    p = patch_ego.positions
    return patch_ego.select(~mask.masked(p[:, 0], p[:, 1]))
