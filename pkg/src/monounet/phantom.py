"""Synthetic knee-cartilage-like ultrasound phantoms and device-shift perturbations.

Each phantom is a B-mode-like image with a curved hypoechoic band (the
"cartilage") lying between a thin bright soft-tissue interface above and a
bright bone interface with acoustic shadowing below. Texture is
multiplicative speckle made from low-pass filtered exponential noise, and
brightness decays with depth. The mask is the band itself, computed
analytically column by column, so labels carry no annotation noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

DEPTH_MM = 40.0


@dataclass(frozen=True)
class Shift:
    """One device-shift setting. All zeros (and ``gamma = 1``) is the identity."""
    gain_db: float = 0.0
    contrast_gamma: float = 1.0
    blur_sigma: float = 0.0
    speckle_scale: float = 0.0
    tilt_degrees: float = 0.0


@dataclass(frozen=True)
class ShiftRanges:
    gain_db: tuple[float, float] = (-6.0, 6.0)
    contrast_gamma: tuple[float, float] = (0.6, 1.6)
    blur_sigma: tuple[float, float] = (0.25, 1.0)  # wider blur erases the thinnest bands
    speckle_scale: tuple[float, float] = (0.3, 1.0)
    tilt_degrees: tuple[float, float] = (-15.0, 15.0)

    def sample(self, rng: np.random.Generator) -> Shift:
        return Shift(**{f.name: float(rng.uniform(*getattr(self, f.name))) for f in fields(self)})

    def contains(self, shift: Shift) -> bool:
        return all(lo <= getattr(shift, f.name) <= hi
                   for f in fields(self) for lo, hi in [getattr(self, f.name)])


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    count: int = 200
    image_size: int = 256
    thickness_px: tuple[int, int] = (4, 20)
    depth_px: tuple[float, float] = (70.0, 150.0)  # band top at the apex
    sag_px: tuple[float, float] = (5.0, 45.0)  # arc drop from apex to band ends
    width_fraction: tuple[float, float] = (0.6, 0.95)
    speckle_grain: tuple[float, float] = (0.8, 1.4)  # gaussian sigma, px
    speckle_variance: tuple[float, float] = (0.6, 1.0)
    attenuation: tuple[float, float] = (0.4, 1.2)  # exp(-a * depth / size)
    shift: ShiftRanges = field(default_factory=ShiftRanges)

    def __post_init__(self):
        lo, hi = self.thickness_px
        if not (0 < lo <= hi):
            raise ValueError("thickness range must be positive and ordered")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and not all(math.isfinite(x) for x in v):
                raise ValueError(f"{f.name} range must be finite")
        if self.count < 1:
            raise ValueError("count must be >= 1")

    @property
    def pixel_spacing(self) -> float:
        return DEPTH_MM / self.image_size


@dataclass
class Phantom:
    image: np.ndarray  # uint8, raw grey values
    mask: np.ndarray  # bool
    pixel_spacing: float
    thickness_profile: np.ndarray  # px per column, 0 outside the band


def speckle(rng: np.random.Generator, shape, grain: float, variance: float = 1.0) -> np.ndarray:
    """Mean-one positive texture: smoothed exponential noise, contrast ``variance``."""
    tex = ndimage.gaussian_filter(rng.exponential(1.0, shape), grain, mode="wrap")
    tex /= tex.mean()
    return np.maximum(1.0 + variance * (tex - 1.0) / tex.std() * 0.5, 0.05)


def _ridge(rows: np.ndarray, centre: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((rows - centre) / sigma) ** 2)


def _try_generate(cfg: PhantomConfig, rng: np.random.Generator) -> Phantom | None:
    n = cfg.image_size
    cols = np.arange(n, dtype=np.float64)
    rows = cols[:, None]

    width = rng.uniform(*cfg.width_fraction) * n
    centre = rng.uniform(0.5 * width, n - 0.5 * width)
    x0, x1 = int(math.ceil(centre - width / 2)), int(math.floor(centre + width / 2))
    apex = rng.uniform(*cfg.depth_px)
    sag = rng.uniform(*cfg.sag_px)
    top = apex + sag * ((cols - centre) / (width / 2)) ** 2

    tmin, tmax = cfg.thickness_px
    base = rng.uniform(tmin, tmax)
    amp = rng.uniform(0, 0.35) * (tmax - tmin)
    freq = rng.uniform(0.5, 2.0)
    phase = rng.uniform(0, 2 * math.pi)
    thick = np.clip(np.rint(base + amp * np.sin(2 * math.pi * freq * cols / n + phase)), tmin, tmax)

    band = np.zeros(n, dtype=bool)
    band[max(x0, 0):min(x1, n - 1) + 1] = True
    top_row = np.ceil(top).astype(int)
    bottom_row = top_row + thick.astype(int)  # exclusive
    if (top_row[band].min() < 8) or (bottom_row[band].max() > n - 12):
        return None

    profile = np.where(band, thick, 0.0)
    mask = band[None, :] & (rows >= top_row[None, :]) & (rows < bottom_row[None, :])

    # echogenicity map
    tissue = 0.45 * (1 + 0.25 * ndimage.gaussian_filter(rng.normal(size=(n, n)), 12, mode="wrap") * 6)
    for _ in range(rng.integers(1, 4)):  # fascia-like faint layers above the joint
        depth = rng.uniform(15, max(apex - 15, 20))
        tilt = rng.uniform(-0.1, 0.1)
        tissue = tissue + 0.35 * _ridge(rows, depth + tilt * (cols - n / 2), rng.uniform(1.0, 2.5))
    echo = tissue.copy()
    taper = np.clip(np.minimum(cols - x0 + 6, x1 + 6 - cols) / 6.0, 0, 1)
    bone_row = bottom_row.astype(np.float64)
    below = rows >= bone_row[None, :] + 2
    shadow = np.where(below, np.exp(-(rows - bone_row[None, :]) / 12.0) * 0.6 + 0.15, 1.0)
    echo = np.where(taper[None, :] > 0, echo * (1 - taper[None, :]) + echo * shadow * taper[None, :],
                    echo)
    inside = mask.astype(np.float64)
    echo = echo * (1 - inside) + rng.uniform(0.05, 0.12) * inside
    echo += taper[None, :] * 0.9 * _ridge(rows, top_row[None, :] - 1.5, rng.uniform(0.6, 1.0))
    echo += taper[None, :] * 1.6 * _ridge(rows, bone_row[None, :] + 1.0, rng.uniform(0.8, 1.5))

    tex = speckle(rng, (n, n), rng.uniform(*cfg.speckle_grain), rng.uniform(*cfg.speckle_variance))
    atten = np.exp(-rng.uniform(*cfg.attenuation) * rows / n)
    linear = echo * tex * atten
    image = np.clip(255 * linear / rng.uniform(1.3, 1.8), 0, 255)
    return Phantom(np.rint(image).astype(np.uint8), mask, cfg.pixel_spacing, profile)


def generate(cfg: PhantomConfig) -> list[Phantom]:
    """``cfg.count`` phantoms; sample ``i`` depends only on ``(cfg, i)``.

    A draw whose band leaves the frame is discarded and the next substream
    of the same sample is used.
    """
    out = []
    for i in range(cfg.count):
        for attempt in range(1000):
            ph = _try_generate(cfg, np.random.default_rng([cfg.seed, i, attempt]))
            if ph is not None:
                out.append(ph)
                break
        else:  # pragma: no cover - geometry ranges make this unreachable
            raise RuntimeError(f"could not place a band for sample {i}")
    return out


def perturb(image: np.ndarray, shift: Shift, rng: np.random.Generator | None = None,
            grain: float = 2.0) -> np.ndarray:
    """Emulate a different device/acquisition on a raw 0-255 image.

    Applied in order: speckle re-noising (extra multiplicative texture of
    strength ``speckle_scale`` and coarser grain), Gaussian blur, gain in dB,
    gamma contrast, and a lateral brightness ramp for probe tilt. The result
    is clipped to ``[0, 255]`` and returned as float64; masks are unaffected.
    """
    img = np.asarray(image, dtype=np.float64)
    if shift.speckle_scale:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img * speckle(rng, img.shape, grain) ** shift.speckle_scale
    if shift.blur_sigma:
        img = ndimage.gaussian_filter(img, shift.blur_sigma, mode="nearest")
    if shift.gain_db:
        img = img * 10 ** (shift.gain_db / 20)
    img = np.clip(img, 0, 255)
    if shift.contrast_gamma != 1.0:
        img = 255 * (img / 255) ** shift.contrast_gamma
    if shift.tilt_degrees:
        w = img.shape[1]
        ramp = 1 + 2 * math.tan(math.radians(shift.tilt_degrees)) * (np.arange(w) - (w - 1) / 2) / w
        img = img * np.maximum(ramp, 0.05)[None, :]
    return np.clip(img, 0, 255)


def shifted_set(cfg: PhantomConfig, shift_seed: int | None = None) -> list[Phantom]:
    """Phantoms from ``cfg`` with one random shift from ``cfg.shift`` per image."""
    out = []
    seed = cfg.seed if shift_seed is None else shift_seed
    for i, ph in enumerate(generate(cfg)):
        rng = np.random.default_rng([seed, i, 7919])
        img = perturb(ph.image, cfg.shift.sample(rng), rng)
        out.append(Phantom(np.rint(img).astype(np.uint8), ph.mask, ph.pixel_spacing,
                           ph.thickness_profile))
    return out
