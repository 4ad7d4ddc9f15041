"""Grad-CAM attribution of the time arrow decision and peak region extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tifffile
import torch

from .models import EquivariantHead, TimeArrowNet


@dataclass
class AttributionMap:
    values: np.ndarray  # (H, W), >= 0, aligned to the earlier frame
    source: tuple = (0, 0, 1)  # (video, t, delta_t)
    logits: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def normalized(self) -> np.ndarray:
        v = self.values
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            return np.zeros_like(v)
        return (v - lo) / (hi - lo)


@dataclass(frozen=True)
class PeakRegion:
    row: int
    col: int
    score: float
    t: Optional[int] = None
    context: Optional[tuple] = None  # (t0, t1, r0, r1, c0, c1), half-open


def _pair_tensor(frame_a, frame_b, dtype):
    a, b = np.asarray(frame_a), np.asarray(frame_b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be two equally shaped 2D arrays, got {a.shape} and {b.shape}")
    return torch.as_tensor(np.stack([a, b])[None], dtype=dtype)


def _cam(z, alpha):
    # z: (2, c, h, w), alpha: (2, c) -> per-slot ReLU maps averaged over slots
    return torch.relu((alpha[:, :, None, None] * z).sum(1)).mean(0)


def _check_grad(g):
    if not torch.all(torch.isfinite(g)):
        raise FloatingPointError("non-finite gradients in attribution")


def _margin(logits):
    pred = int(torch.argmax(logits[0]))
    return logits[0, pred] - logits[0, 1 - pred]


def _gradcam_whole(model, x):
    with torch.enable_grad():
        z = model.stacked(x).detach().requires_grad_(True)
        logits = model.head(z)
        (g,) = torch.autograd.grad(_margin(logits), z)
    _check_grad(g)
    alpha = g[0].mean(dim=(-2, -1))
    return _cam(z[0].detach(), alpha), logits.detach()


def _tile_starts(n, tile, overlap):
    if n <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, n - tile, stride))
    starts.append(n - tile)
    return sorted(set(starts))


def _ramp(n, lo_overlap, hi_overlap):
    w = np.ones(n)
    if lo_overlap:
        w[:lo_overlap] = np.linspace(1.0 / (lo_overlap + 1), 1.0, lo_overlap, endpoint=False)
    if hi_overlap:
        w[n - hi_overlap:] = np.linspace(1.0, 1.0 / (hi_overlap + 1), hi_overlap + 1)[1:]
    return w


def _tiles(shape, tile, overlap):
    """``(row slice, col slice, normalized blending weights)`` covering the frame."""
    H, W = shape
    rs, cs = _tile_starts(H, tile, overlap), _tile_starts(W, tile, overlap)
    raw = []
    for i, r in enumerate(rs):
        th = min(tile, H)
        lo_r = (rs[i - 1] + th - r) if i > 0 else 0
        hi_r = (r + th - rs[i + 1]) if i + 1 < len(rs) else 0
        for j, c in enumerate(cs):
            tw = min(tile, W)
            lo_c = (cs[j - 1] + tw - c) if j > 0 else 0
            hi_c = (c + tw - cs[j + 1]) if j + 1 < len(cs) else 0
            w = np.outer(_ramp(th, lo_r, hi_r), _ramp(tw, lo_c, hi_c))
            raw.append((slice(r, r + th), slice(c, c + tw), w))
    total = np.zeros(shape)
    for rr, cc, w in raw:
        total[rr, cc] += w
    return [(rr, cc, w / total[rr, cc]) for rr, cc, w in raw]


def _gradcam_tiled(model, x, tile, overlap):
    head = model.head
    if not isinstance(head, EquivariantHead):
        raise ValueError("tiled attribution needs a head with pixelwise features (equivariant head)")
    H, W = x.shape[-2:]
    n_pix = H * W
    tiles = [(rr, cc, torch.as_tensor(w, dtype=x.dtype)) for rr, cc, w in _tiles((H, W), tile, overlap)]

    with torch.no_grad():
        pooled = 0
        for rr, cc, w in tiles:
            f = head.features(model.stacked(x[..., rr, cc]))
            pooled = pooled + (f * w).sum(dim=(-2, -1))
        pooled = pooled / n_pix
    with torch.enable_grad():
        p = pooled.clone().requires_grad_(True)
        logits = head.classify(p)
        (g_pooled,) = torch.autograd.grad(_margin(logits), p)

    alpha = 0
    for rr, cc, w in tiles:
        with torch.enable_grad():
            z = model.stacked(x[..., rr, cc]).detach().requires_grad_(True)
            s = (head.features(z) * w * g_pooled[..., None, None]).sum() / n_pix
            (g,) = torch.autograd.grad(s, z)
        _check_grad(g)
        alpha = alpha + g[0].sum(dim=(-2, -1))
    alpha = alpha / n_pix

    out = torch.zeros((H, W), dtype=x.dtype)
    with torch.no_grad():
        for rr, cc, w in tiles:
            z = model.stacked(x[..., rr, cc])[0]
            out[rr, cc] += _cam(z, alpha) * w
    return out, logits.detach()


def gradcam(model: TimeArrowNet, frame_a, frame_b, tile: int = 256, overlap: int = 32,
            source: tuple = (0, 0, 1)) -> AttributionMap:
    """Attribution of the predicted-class logit margin w.r.t. the stacked representations.

    Channel weights are spatial means of the gradient per slot and channel;
    the two per-slot ReLU maps are averaged. Frames larger than ``tile`` are
    processed in overlapping, linearly blended tiles.
    """
    if overlap >= tile:
        raise ValueError("overlap must be smaller than the tile size")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = _pair_tensor(frame_a, frame_b, dtype)
    if x.shape[-2] <= tile and x.shape[-1] <= tile:
        cam, logits = _gradcam_whole(model, x)
    else:
        cam, logits = _gradcam_tiled(model, x, tile, overlap)
    return AttributionMap(cam.detach().numpy().astype(np.float32), tuple(source), logits.numpy()[0])


def attribute_video(model: TimeArrowNet, frames: np.ndarray, delta_t: int = 1, tile: int = 256,
                    overlap: int = 32, video: int = 0) -> list[AttributionMap]:
    """One map per frame pair ``(t, t + delta_t)``."""
    frames = np.asarray(frames)
    return [gradcam(model, frames[t], frames[t + delta_t], tile, overlap, (video, t, delta_t))
            for t in range(len(frames) - delta_t)]


def top_regions(amap, k: int = 6, radius: float = 48, context: int = 2, n_frames: Optional[int] = None,
                window: Optional[int] = None) -> list[PeakRegion]:
    """Greedy non-maximum suppression on an attribution map.

    Repeatedly takes the global maximum (ties: smallest (row, col)) and zeroes
    the disc of ``radius`` around it, until ``k`` peaks are found or the map
    has no positive value left.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = amap.values if isinstance(amap, AttributionMap) else np.asarray(amap)
    t = amap.source[1] if isinstance(amap, AttributionMap) else None
    work = np.array(values, dtype=np.float64)
    H, W = work.shape
    yy, xx = np.ogrid[:H, :W]
    half = int(window // 2) if window else int(radius)
    peaks = []
    while len(peaks) < k:
        idx = int(np.argmax(work))
        r, c = divmod(idx, W)
        score = work[r, c]
        if not score > 0:
            break
        ctx = None
        if t is not None:
            t0 = max(t - context, 0)
            t1 = t + context + 1 if n_frames is None else min(t + context + 1, n_frames)
            ctx = (t0, t1, max(r - half, 0), min(r + half, H), max(c - half, 0), min(c + half, W))
        peaks.append(PeakRegion(r, c, float(values[r, c]), t, ctx))
        work[(yy - r) ** 2 + (xx - c) ** 2 <= radius**2] = 0
    return peaks


def _gray_rgb(frame):
    g = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def overlay_frame(frame, amap: Optional[AttributionMap]) -> np.ndarray:
    """Gray frame with the min-max normalized map blended in a black-red-yellow ramp."""
    gray = _gray_rgb(frame)
    if amap is None:
        return gray
    a = amap.normalized.astype(np.float64)
    if not a.any():
        return gray
    color = np.stack([np.ones_like(a), a, np.zeros_like(a)], axis=-1) * 255
    out = (1 - a[..., None]) * gray + a[..., None] * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def export_overlay(frames, maps: Sequence[AttributionMap], out_dir, k: int = 6, radius: float = 48) -> dict:
    """Write raw maps (float32 TIFF), an RGB overlay stack and a CSV of top regions per frame.

    Each map is placed at the frame index in its ``source``; frames without a
    map get an all-zero raw map and a plain gray overlay.
    """
    frames = np.asarray(frames)
    T, H, W = frames.shape
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_t = {}
    for m in maps:
        t = m.source[1]
        if not 0 <= t < T or m.values.shape != (H, W):
            raise ValueError(f"map for frame {t} with shape {m.values.shape} does not fit video {frames.shape}")
        by_t[t] = m
    raw = np.zeros((T, H, W), dtype=np.float32)
    overlay = np.zeros((T, H, W, 3), dtype=np.uint8)
    rows = []
    for t in range(T):
        m = by_t.get(t)
        if m is not None:
            raw[t] = m.values
            rows += [(t, p.row, p.col, p.score) for p in top_regions(m, k, radius, n_frames=T)]
        overlay[t] = overlay_frame(frames[t], m)
    paths = {"raw": out / "attribution_raw.tif", "overlay": out / "overlay.tif", "regions": out / "regions.csv"}
    tifffile.imwrite(paths["raw"], raw, photometric="minisblack")
    tifffile.imwrite(paths["overlay"], overlay, photometric="rgb")
    with open(paths["regions"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "row", "col", "score"])
        for t, r, c, s in rows:
            wr.writerow([t, r, c, f"{s:.8g}"])
    return paths
