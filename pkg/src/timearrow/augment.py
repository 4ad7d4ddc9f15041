"""Augmentations for patch pairs.

Geometric transforms and one intensity transform are shared by both frames
of a pair; translation, a second intensity transform and noise are drawn
per frame. Everything is applied to the margin-extended crops and the
output is the margin-free ``h x w`` core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import RectBivariateSpline

from .sampler import PatchPair, draw_rng

_TRANSFORMS = ("flip", "rotate", "scale", "elastic", "translate",
               "intensity_joint", "intensity_independent", "noise")


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    elastic: bool = True
    translate: bool = True
    intensity_joint: bool = True
    intensity_independent: bool = True
    noise: bool = True

    apply_probability: float = 0.5
    rotation_range: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.8, 1.25)
    elastic_grid: int = 4
    elastic_sigma: float = 5.0
    translate_fraction: float = 0.1
    intensity_scale: tuple[float, float] = (0.8, 1.2)
    intensity_shift: tuple[float, float] = (-0.1, 0.1)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.apply_probability <= 1:
            raise ValueError("apply_probability must be in [0, 1]")
        for name in ("rotation_range", "scale_range", "intensity_scale", "intensity_shift", "noise_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be an ordered (low, high) pair")
        if self.scale and self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if self.elastic_grid < 2:
            raise ValueError("elastic_grid must be >= 2")
        if self.translate_fraction < 0 or self.elastic_sigma < 0:
            raise ValueError("translate_fraction and elastic_sigma must be >= 0")

    @property
    def enabled(self) -> frozenset:
        return frozenset(t for t in _TRANSFORMS if getattr(self, t))

    @classmethod
    def none(cls, **kw) -> "AugmentConfig":
        return cls(**{t: False for t in _TRANSFORMS}, **kw)


def augment_level(level: int, seed: int = 0) -> AugmentConfig:
    """Cumulative presets used by the CLI shorthand ``--augment-level``.

    0: none, 1: flips + rotations, 2: + scaling and elastic,
    3: + independent translations, 4: + intensity and noise (full suite).
    """
    steps = [(), ("flip", "rotate"), ("scale", "elastic"), ("translate",),
             ("intensity_joint", "intensity_independent", "noise")]
    if not 0 <= level < len(steps):
        raise ValueError(f"augment level must be in 0..{len(steps) - 1}, got {level}")
    on = {t for s in steps[:level + 1] for t in s}
    return AugmentConfig(**{t: t in on for t in _TRANSFORMS}, seed=seed)


def augmentation_ablation_suite(levels: Sequence[AugmentConfig]) -> list[AugmentConfig]:
    """Validate an ordered list of augmentation levels (each a superset of the previous)."""
    levels = list(levels)
    if not levels:
        raise ValueError("empty augmentation level list")
    for i, cfg in enumerate(levels):
        for prev in levels[:i]:
            if prev == cfg:
                raise ValueError(f"duplicate augmentation level at position {i}")
        if i and not levels[i - 1].enabled <= cfg.enabled:
            raise ValueError(f"level {i} drops transforms enabled at level {i - 1}; order levels from none to full")
    return levels


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate counter-clockwise by ``angle`` degrees about the centre (bilinear, reflect)."""
    coords = _affine_coords(image.shape, angle, 1.0, False, False)
    return _sample(image, coords)


def _affine_coords(shape, angle, scale, flip_v, flip_h):
    h, w = shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    if flip_v:
        yy = -yy
    if flip_h:
        xx = -xx
    # output (y, x) samples input at R^-1 (y, x) / scale; counter-clockwise in display coords
    th = np.deg2rad(angle)
    c, s = np.cos(th), np.sin(th)
    # snap right angles so 90-degree rotations hit exact grid points
    c, s = np.round(c, 12), np.round(s, 12)
    src_y = (c * yy + s * xx) / scale + cy
    src_x = (-s * yy + c * xx) / scale + cx
    return np.stack([src_y, src_x])


def _elastic_displacement(shape, grid, sigma, rng):
    h, w = shape
    out = []
    for _ in range(2):
        ctrl = rng.normal(0.0, sigma, size=(grid, grid))
        spline = RectBivariateSpline(np.linspace(0, h - 1, grid), np.linspace(0, w - 1, grid), ctrl,
                                     kx=min(3, grid - 1), ky=min(3, grid - 1))
        out.append(spline(np.arange(h), np.arange(w)))
    return np.stack(out)


def _sample(image, coords):
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), coords, order=1,
                                   mode="mirror").astype(np.float32)


def augment_pair(pair: PatchPair, config: AugmentConfig, index: int = 0) -> PatchPair:
    """Augment one pair deterministically given ``(config.seed, index)``; the label is untouched."""
    rng = draw_rng(config.seed, index, stream=2)
    p = config.apply_probability
    x1 = np.asarray(pair.x1, dtype=np.float32)
    x2 = np.asarray(pair.x2, dtype=np.float32)
    if x1.shape != x2.shape:
        raise ValueError("pair crops differ in shape")
    m = pair.margin
    full_h, full_w = x1.shape
    h, w = full_h - 2 * m, full_w - 2 * m

    # every coin is flipped regardless of enablement so streams stay aligned across configs
    coins = rng.random(len(_TRANSFORMS)) < p
    use = {t: bool(getattr(config, t) and c) for t, c in zip(_TRANSFORMS, coins)}

    # joint geometric
    flip_v = flip_h = False
    angle, scale = 0.0, 1.0
    fv, fh = rng.random(2) < 0.5
    if use["flip"]:
        flip_v, flip_h = bool(fv), bool(fh)
    a = rng.uniform(*config.rotation_range)
    if use["rotate"]:
        angle = float(a)
    sc = float(rng.uniform(*config.scale_range))
    if use["scale"]:
        scale = sc
    elastic_rng = np.random.default_rng(rng.integers(2**63))
    if flip_v or flip_h or angle or scale != 1.0 or use["elastic"]:
        coords = _affine_coords((full_h, full_w), angle, scale, flip_v, flip_h)
        if use["elastic"]:
            coords = coords + _elastic_displacement((full_h, full_w), config.elastic_grid,
                                                    config.elastic_sigma, elastic_rng)
        idx = np.rint(coords).astype(int)
        exact = not (use["elastic"] or scale != 1.0 or angle % 90)
        if exact and idx[0].min() >= 0 and idx[1].min() >= 0 and idx[0].max() < full_h and idx[1].max() < full_w:
            # pure flips/right-angle rotations: exact index permutation
            x1, x2 = x1[idx[0], idx[1]], x2[idx[0], idx[1]]
        else:
            x1, x2 = _sample(x1, coords), _sample(x2, coords)

    # independent translation: shift each core window inside the margin
    max_shift = int(np.floor(config.translate_fraction * min(h, w)))
    if config.translate and max_shift > m:
        raise ValueError(f"translation of up to {max_shift} px exceeds the pair's context margin of {m} px")
    shifts = rng.integers(-max_shift, max_shift + 1, size=(2, 2)) if max_shift > 0 else np.zeros((2, 2), int)
    if not use["translate"]:
        shifts = np.zeros((2, 2), int)
    outs = []
    for x, (dy, dx) in zip((x1, x2), shifts):
        outs.append(np.array(x[m + dy:m + dy + h, m + dx:m + dx + w], dtype=np.float32))
    x1, x2 = outs

    # joint intensity
    js, jb = rng.uniform(*config.intensity_scale), rng.uniform(*config.intensity_shift)
    if use["intensity_joint"]:
        x1, x2 = x1 * js + jb, x2 * js + jb
    # independent intensity
    iscale = rng.uniform(*config.intensity_scale, size=2)
    ishift = rng.uniform(*config.intensity_shift, size=2)
    if use["intensity_independent"]:
        x1 = x1 * iscale[0] + ishift[0]
        x2 = x2 * iscale[1] + ishift[1]
    sig = rng.uniform(*config.noise_sigma, size=2)
    noise_rng = np.random.default_rng(rng.integers(2**63))
    if use["noise"]:
        x1 = x1 + noise_rng.normal(0.0, sig[0], size=x1.shape)
        x2 = x2 + noise_rng.normal(0.0, sig[1], size=x2.shape)

    return PatchPair(x1.astype(np.float32), x2.astype(np.float32), pair.label, pair.source, 0,
                     pair.region, pair.center_offset)
