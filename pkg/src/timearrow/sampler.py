"""Co-located patch pairs from Δt-separated frames with random time-flip labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .video_io import VideoSequence

FORWARD = 0
BACKWARD = 1
REGION_TYPES = ("background", "interphase", "mitotic")


def draw_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one draw; the same (seed, index) gives the same stream."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


@dataclass(frozen=True)
class SamplerConfig:
    patch: tuple[int, int] = (96, 96)
    delta_t: tuple[int, ...] = (1,)
    flip_probability: float = 0.5
    samples_per_epoch: int = 100_000
    seed: int = 0
    margin: int = 16

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "delta_t", tuple(sorted({int(d) for d in self.delta_t})))
        if len(self.patch) != 2 or min(self.patch) < 1:
            raise ValueError(f"patch must be two positive ints, got {self.patch}")
        if not self.delta_t or min(self.delta_t) < 1:
            raise ValueError(f"delta_t must be positive integers, got {self.delta_t}")
        if self.flip_probability != 0.5:
            raise ValueError("flip_probability is fixed at 0.5")
        if self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass
class PatchPair:
    """Two crops from one window; ``x1``/``x2`` include ``margin`` context pixels per side."""

    x1: np.ndarray
    x2: np.ndarray
    label: int
    source: tuple  # (video index, t, delta_t, row, col) of the core window, t = earlier frame
    margin: int = 0
    region: Optional[str] = None
    center_offset: tuple[int, int] = (0, 0)

    def core(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.margin
        if m == 0:
            return self.x1, self.x2
        return self.x1[m:-m, m:-m], self.x2[m:-m, m:-m]

    def flipped(self) -> "PatchPair":
        return PatchPair(self.x2, self.x1, 1 - self.label, self.source, self.margin,
                         self.region, self.center_offset)


def crop_with_margin(frame: np.ndarray, row: int, col: int, h: int, w: int, margin: int) -> np.ndarray:
    """Crop ``frame[row-m:row+h+m, col-m:col+w+m]``, reflect-padding outside the frame."""
    H, W = frame.shape
    r0, r1 = row - margin, row + h + margin
    c0, c1 = col - margin, col + w + margin
    if r0 >= 0 and c0 >= 0 and r1 <= H and c1 <= W:
        return np.array(frame[r0:r1, c0:c1], dtype=np.float32)
    rows = _reflect_index(np.arange(r0, r1), H)
    cols = _reflect_index(np.arange(c0, c1), W)
    return np.asarray(frame, dtype=np.float32)[np.ix_(rows, cols)]


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _valid_starts(frames: Optional[np.ndarray], n_frames: int, dt: int) -> np.ndarray:
    """Earlier-frame indices t such that t and t+dt are both allowed."""
    allowed = np.zeros(n_frames, dtype=bool)
    if frames is None:
        allowed[:] = True
    else:
        allowed[np.asarray(frames, dtype=int)] = True
    if dt >= n_frames:
        return np.arange(0)
    return np.flatnonzero(allowed[:-dt] & allowed[dt:])


class PairSampler:
    """Deterministic pair source: pair ``i`` depends only on (seed, i).

    ``frames`` optionally restricts each video to a subset of frame indices
    (e.g. the training split); a pair is valid only if both its frames are
    in the subset.
    """

    def __init__(self, videos: Sequence[VideoSequence], config: SamplerConfig,
                 frames: Optional[Sequence[Optional[np.ndarray]]] = None):
        self.videos = list(videos)
        self.config = config
        if frames is None:
            frames = [None] * len(self.videos)
        h, w = config.patch
        self._starts = {}
        for dt in config.delta_t:
            per_video = []
            for v, fr in zip(self.videos, frames):
                _, H, W = v.shape
                if h > H or w > W:
                    raise ValueError(f"patch {config.patch} larger than frame {H}x{W} of video {v.name!r}")
                per_video.append(_valid_starts(fr, len(v), dt))
            counts = np.array([len(s) for s in per_video], dtype=float)
            if counts.sum() > 0:
                self._starts[dt] = (per_video, np.cumsum(counts) / counts.sum())
        if not self._starts:
            raise ValueError(f"no valid (t, t+dt) combination for dt in {config.delta_t}")
        self._dts = tuple(sorted(self._starts))

    def __call__(self, index: int) -> PatchPair:
        cfg = self.config
        rng = draw_rng(cfg.seed, index)
        dt = self._dts[rng.integers(len(self._dts))]
        per_video, cum = self._starts[dt]
        vi = min(int(np.searchsorted(cum, rng.random(), side="right")), len(per_video) - 1)
        starts = per_video[vi]
        t = int(starts[rng.integers(len(starts))])
        video = self.videos[vi]
        _, H, W = video.shape
        h, w = cfg.patch
        row = int(rng.integers(H - h + 1))
        col = int(rng.integers(W - w + 1))
        flip = rng.random() < cfg.flip_probability
        a = crop_with_margin(video.frames[t], row, col, h, w, cfg.margin)
        b = crop_with_margin(video.frames[t + dt], row, col, h, w, cfg.margin)
        if flip:
            return PatchPair(b, a, BACKWARD, (vi, t, dt, row, col), cfg.margin)
        return PatchPair(a, b, FORWARD, (vi, t, dt, row, col), cfg.margin)


def sample_pair(videos: Sequence[VideoSequence], config: SamplerConfig, index: int,
                frames=None) -> PatchPair:
    """Convenience wrapper around :class:`PairSampler` for a single draw."""
    return PairSampler(videos, config, frames)(index)


@dataclass(frozen=True)
class RegionAnnotation:
    t: int
    row: int
    col: int
    kind: str
    video: int = 0

    def __post_init__(self):
        if self.kind not in REGION_TYPES:
            raise ValueError(f"region type must be one of {REGION_TYPES}, got {self.kind!r}")


def region_type_dataset(videos: Sequence[VideoSequence], annotations: Sequence[RegionAnnotation],
                        config: SamplerConfig, seed: Optional[int] = None) -> list[PatchPair]:
    """One margin-free pair per annotation, centred on the annotated point.

    Windows near the border are clamped inside the frame and the resulting
    displacement of the crop centre is stored in ``center_offset``. The pair
    uses the smallest configured Δt; if ``t + Δt`` runs past the end of the
    video the pair (t - Δt, t) is used instead.
    """
    seed = config.seed if seed is None else seed
    h, w = config.patch
    dt = config.delta_t[0]
    pairs = []
    for i, ann in enumerate(annotations):
        video = videos[ann.video]
        T, H, W = video.shape
        if not (0 <= ann.t < T and 0 <= ann.row < H and 0 <= ann.col < W):
            raise ValueError(f"annotation {ann} lies outside video of shape {video.shape}")
        if h > H or w > W:
            raise ValueError(f"patch {config.patch} larger than frame {H}x{W}")
        row = min(max(ann.row - h // 2, 0), H - h)
        col = min(max(ann.col - w // 2, 0), W - w)
        offset = (row + h // 2 - ann.row, col + w // 2 - ann.col)
        t0 = ann.t if ann.t + dt < T else ann.t - dt
        if t0 < 0:
            raise ValueError(f"video too short for a pair with dt={dt}")
        a = np.array(video.frames[t0, row:row + h, col:col + w], dtype=np.float32)
        b = np.array(video.frames[t0 + dt, row:row + h, col:col + w], dtype=np.float32)
        flip = draw_rng(seed, i, stream=1).random() < 0.5
        src = (ann.video, t0, dt, row, col)
        pair = PatchPair(a, b, FORWARD, src, 0, ann.kind, offset)
        pairs.append(pair.flipped() if flip else pair)
    return pairs
