"""Resizing, preprocessing and random affine augmentation.

All geometry uses bilinear sampling with edge-replicate padding. Pixel
centres sit at integer coordinates; resizing maps centres with the
half-pixel convention so a same-size resize is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img[h, w, ...] at fractional coordinates, clamping to the border."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx)


def preprocess(img: np.ndarray, size: int) -> np.ndarray:
    """Grayscale [h, w] or [h, w, 1] in [0, 1] -> float32 [size, size, 3]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        if img.shape[-1] != 1:
            raise ValueError(f"expected a single-channel image, got shape {img.shape}")
        img = img[..., 0]
    if img.ndim != 2 or min(img.shape) < 8:
        raise ValueError(f"image extents must be >= 8, got shape {img.shape}")
    out = np.clip(resize_bilinear(img, size, size), 0, 1).astype(np.float32)
    return np.repeat(out[..., None], 3, axis=-1)


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip: float = 0.5
    rotation: float = 10.0
    zoom: tuple[float, float] = (0.9, 1.1)
    width_shift: float = 0.1
    height_shift: float = 0.1
    shear: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.horizontal_flip <= 1:
            raise ValueError(f"horizontal_flip probability must lie in [0, 1], got {self.horizontal_flip}")
        if not 0 <= self.rotation <= 180:
            raise ValueError(f"rotation must lie in [0, 180] degrees, got {self.rotation}")
        lo, hi = self.zoom
        if not 0 < lo <= hi:
            raise ValueError(f"zoom range must satisfy 0 < lo <= hi, got {self.zoom}")
        if not (0 <= self.width_shift < 1 and 0 <= self.height_shift < 1):
            raise ValueError("shift fractions must lie in [0, 1)")
        if not 0 <= self.shear < 90:
            raise ValueError(f"shear must lie in [0, 90) degrees, got {self.shear}")

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> AugmentConfig:
        d = dict(d)
        if "zoom" in d:
            d["zoom"] = tuple(d["zoom"])
        return cls(**d)


@dataclass(frozen=True)
class AffineParams:
    flip: bool = False
    angle: float = 0.0       # degrees, counter-clockwise as displayed
    zoom: float = 1.0        # > 1 magnifies
    shift_x: float = 0.0     # pixels, positive moves content right
    shift_y: float = 0.0     # pixels, positive moves content down
    shear: float = 0.0       # degrees


def _linear_part(p: AffineParams) -> np.ndarray:
    """Forward 2x2 map on (x, y) offsets from the image centre, y pointing down."""
    a = math.radians(p.angle)
    c, s = math.cos(a), math.sin(a)
    # snap exact quarter turns so 90-degree rotations are pure permutations
    c, s = (round(c) if abs(c - round(c)) < 1e-12 else c), (round(s) if abs(s - round(s)) < 1e-12 else s)
    flip = np.array([[-1.0, 0.0], [0.0, 1.0]]) if p.flip else np.eye(2)
    rot = np.array([[c, s], [-s, c]])
    shear = np.array([[1.0, math.tan(math.radians(p.shear))], [0.0, 1.0]])
    zoom = np.eye(2) * p.zoom
    return zoom @ shear @ rot @ flip


def apply_affine(img: np.ndarray, p: AffineParams) -> np.ndarray:
    h, w = img.shape[:2]
    lin = _linear_part(p)
    if np.array_equal(lin, np.eye(2)) and p.shift_x == 0 and p.shift_y == 0:
        return img.copy()
    inv = np.linalg.inv(lin)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dx = xx - cx - p.shift_x
    dy = yy - cy - p.shift_y
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    return bilinear_sample(img, src_y, src_x).astype(img.dtype)


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator, h: int, w: int) -> AffineParams:
    # draw every variate every time so the stream position never depends on cfg
    u = rng.random(6)
    lo, hi = cfg.zoom
    return AffineParams(
        flip=bool(u[0] < cfg.horizontal_flip),
        angle=(2 * u[1] - 1) * cfg.rotation,
        zoom=lo + (hi - lo) * u[2],
        shift_x=(2 * u[3] - 1) * cfg.width_shift * w,
        shift_y=(2 * u[4] - 1) * cfg.height_shift * h,
        shear=(2 * u[5] - 1) * cfg.shear,
    )


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random flip/rotation/zoom/shift/shear transform."""
    return apply_affine(img, sample_affine(cfg, rng, *img.shape[:2]))
