"""Synthetic time-lapse videos with planted, time-asymmetric division events.

Blobs perform reflected Gaussian random walks (a reversible process, so the
distractors carry no time arrow). At Poisson times a blob divides: it is
replaced by two children that move apart along a random axis at constant
speed for a fixed number of frames, after which they join the random walk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .sampler import RegionAnnotation
from .video_io import VideoSequence


@dataclass(frozen=True)
class SynthConfig:
    T: int = 100
    H: int = 256
    W: int = 256
    n_blobs: int = 30
    sigma_range: tuple[float, float] = (3.0, 6.0)
    amplitude_range: tuple[float, float] = (0.5, 1.0)
    step_sigma: float = 1.0
    division_rate: float = 0.2
    separation_speed: float = 1.5
    division_duration: int = 10
    background: float = 0.1
    noise_sigma: float = 0.02
    mask_radius: float = 1.5  # child mask radius in units of the blob sigma
    seed: int = 0

    def __post_init__(self):
        for name in ("T", "H", "W", "n_blobs", "step_sigma", "separation_speed", "division_duration",
                     "noise_sigma", "mask_radius", "background"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.division_rate < 0:
            raise ValueError("division_rate must be >= 0")
        if not 0 < self.sigma_range[0] <= self.sigma_range[1]:
            raise ValueError("sigma_range must be positive and ordered")
        if not 0 < self.amplitude_range[0] <= self.amplitude_range[1]:
            raise ValueError("amplitude_range must be positive and ordered")
        if self.division_duration >= self.T:
            raise ValueError("division_duration must be < T")
        s = self.sigma_range[1]
        if self.event_margin * 2 >= min(self.H, self.W):
            raise ValueError("frame too small to hold a division event")
        expected = self.n_blobs + self.division_rate * self.T
        footprint = np.pi * (2 * s) ** 2
        if expected * footprint > 0.5 * self.H * self.W:
            raise ValueError(
                f"blob density too high: ~{expected:.0f} blobs of radius {2 * s:.0f} px "
                f"would cover more than half of a {self.H}x{self.W} frame")

    @property
    def event_margin(self) -> float:
        """Minimum distance of a division centre from the frame border."""
        return self.separation_speed * self.division_duration / 2 + 2 * self.sigma_range[1]


@dataclass
class EventRecord:
    kind: str
    t: int
    row: float
    col: float
    duration: int
    sigma: float
    children: np.ndarray = field(repr=False)  # (duration, 2, 2): frame offset, child, (row, col)

    def active(self, t: int) -> bool:
        return self.t <= t < self.t + self.duration

    def child_masks(self, shape, radius_factor: float = 1.5) -> np.ndarray:
        """Boolean ``(duration, H, W)`` masks of both children over the event."""
        out = np.zeros((self.duration, *shape), dtype=bool)
        for k in range(self.duration):
            for child in self.children[k]:
                _paint_disc(out[k], child, radius_factor * self.sigma)
        return out


@dataclass
class SynthResult:
    video: VideoSequence
    events: list
    masks: np.ndarray  # (T, H, W) uint8 union of child masks
    tracks: list = field(repr=False)  # per frame: (n, 4) array of row, col, sigma, dividing flag
    config: SynthConfig = field(default_factory=SynthConfig)

    def __iter__(self):
        return iter((self.video, self.events, self.masks))


def _paint_disc(mask, center, radius):
    H, W = mask.shape
    r0, c0 = center
    rr = slice(max(int(np.floor(r0 - radius)), 0), min(int(np.ceil(r0 + radius)) + 1, H))
    cc = slice(max(int(np.floor(c0 - radius)), 0), min(int(np.ceil(c0 + radius)) + 1, W))
    yy, xx = np.ogrid[rr, cc]
    mask[rr, cc] |= (yy - r0) ** 2 + (xx - c0) ** 2 <= radius**2


def _render(shape, blobs, background):
    H, W = shape
    img = np.full(shape, background, dtype=np.float64)
    for r0, c0, s, a in blobs:
        rad = 4 * s
        rr = slice(max(int(r0 - rad), 0), min(int(r0 + rad) + 2, H))
        cc = slice(max(int(c0 - rad), 0), min(int(c0 + rad) + 2, W))
        yy, xx = np.ogrid[rr, cc]
        img[rr, cc] += a * np.exp(-((yy - r0) ** 2 + (xx - c0) ** 2) / (2 * s * s))
    return img


def _reflect(x, lo, hi):
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def generate(config: SynthConfig = SynthConfig()) -> SynthResult:
    """Render a video; identical configs give bit-identical output."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.H, cfg.W
    pos = np.column_stack([rng.uniform(0, H - 1, cfg.n_blobs), rng.uniform(0, W - 1, cfg.n_blobs)])
    sigma = rng.uniform(*cfg.sigma_range, cfg.n_blobs)
    amp = rng.uniform(*cfg.amplitude_range, cfg.n_blobs)
    alive = np.ones(cfg.n_blobs, dtype=bool)
    busy_until = np.zeros(cfg.n_blobs, dtype=int)  # blobs in a division are moved by the event

    last_start = cfg.T - cfg.division_duration
    n_starts = rng.poisson(cfg.division_rate, size=last_start + 1) if cfg.division_rate > 0 else \
        np.zeros(last_start + 1, dtype=int)

    events: list[EventRecord] = []
    child_ids: list[tuple[int, int]] = []
    frames = np.empty((cfg.T, H, W), dtype=np.float32)
    masks = np.zeros((cfg.T, H, W), dtype=np.uint8)
    tracks = []
    m = cfg.event_margin
    min_gap = cfg.separation_speed * cfg.division_duration + 4 * cfg.sigma_range[1]

    pending = 0  # divisions deferred because no blob could host them without overlap
    for t in range(cfg.T):
        pending += n_starts[t] if t <= last_start else 0
        while pending:
            free = alive & (busy_until <= t)
            inside = (pos[:, 0] >= m) & (pos[:, 0] <= H - 1 - m) & (pos[:, 1] >= m) & (pos[:, 1] <= W - 1 - m)
            ok = free & inside
            for ev in events:
                if ev.active(t):
                    ok &= np.hypot(pos[:, 0] - ev.row, pos[:, 1] - ev.col) >= min_gap
            candidates = np.flatnonzero(ok)
            if candidates.size == 0:
                if t >= last_start:
                    raise ValueError(f"cannot place {pending} division(s) without overlap by frame {t}; "
                                     "reduce n_blobs or division_rate")
                break
            pending -= 1
            parent = int(candidates[rng.integers(candidates.size)])
            angle = rng.uniform(0, np.pi)
            u = np.array([np.sin(angle), np.cos(angle)])
            k = np.arange(cfg.division_duration)[:, None]
            half = cfg.separation_speed * k / 2
            center = pos[parent].copy()
            children = np.stack([center + half * u, center - half * u], axis=1)
            alive[parent] = False
            ids = []
            for c in range(2):
                pos = np.vstack([pos, children[0, c]])
                sigma = np.append(sigma, sigma[parent])
                amp = np.append(amp, amp[parent])
                alive = np.append(alive, True)
                busy_until = np.append(busy_until, t + cfg.division_duration)
                ids.append(len(pos) - 1)
            events.append(EventRecord("division", t, float(center[0]), float(center[1]),
                                      cfg.division_duration, float(sigma[parent]), children))
            child_ids.append(tuple(ids))

        for ev, ids in zip(events, child_ids):
            if ev.active(t):
                k = t - ev.t
                for c, i in enumerate(ids):
                    pos[i] = ev.children[k, c]
                    _paint_disc_u8(masks[t], ev.children[k, c], cfg.mask_radius * ev.sigma)

        live = np.flatnonzero(alive)
        img = _render((H, W), zip(pos[live, 0], pos[live, 1], sigma[live], amp[live]), cfg.background)
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
        tracks.append(np.column_stack([pos[live], sigma[live], (busy_until[live] > t).astype(float)]))

        walkers = alive & (busy_until <= t + 1)
        steps = rng.normal(0.0, cfg.step_sigma, size=pos.shape)
        pos = np.where(walkers[:, None], pos + steps, pos)
        pos[:, 0] = _reflect(pos[:, 0], 0, H - 1)
        pos[:, 1] = _reflect(pos[:, 1], 0, W - 1)

    video = VideoSequence(frames, name=f"synth-{cfg.seed}", normalized=True)
    return SynthResult(video, events, masks, tracks, cfg)


def _paint_disc_u8(mask, center, radius):
    tmp = np.zeros(mask.shape, dtype=bool)
    _paint_disc(tmp, center, radius)
    mask[tmp] = 1


def region_annotations(result: SynthResult, n_per_type: int = 50, seed: int = 0,
                       division_offset: int = 1) -> list[RegionAnnotation]:
    """Background, interphase and mitotic points with ground truth from the generator.

    Mitotic points sit on each division centre ``division_offset`` frames
    after onset; interphase points on non-dividing blobs at least
    ``event_margin`` away from any active division; background points at
    least ``4 * sigma_max`` away from every blob.
    """
    cfg = result.config
    rng = np.random.default_rng(seed)
    T, H, W = result.video.shape
    s_max = cfg.sigma_range[1]
    anns = [RegionAnnotation(min(ev.t + division_offset, T - 1), int(round(ev.row)), int(round(ev.col)), "mitotic")
            for ev in result.events]
    inter, back = [], []
    tries = 0
    while (len(inter) < n_per_type or len(back) < n_per_type) and tries < 200 * n_per_type:
        tries += 1
        t = int(rng.integers(T - 1))
        tr = result.tracks[t]
        active = [ev for ev in result.events if ev.active(t) or ev.active(t + 1)]
        if len(back) < n_per_type:
            r, c = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
            d = np.hypot(tr[:, 0] - r, tr[:, 1] - c) if len(tr) else np.array([np.inf])
            if d.min() >= 4 * s_max:
                back.append(RegionAnnotation(t, int(r), int(c), "background"))
        if len(inter) < n_per_type and len(tr):
            i = int(rng.integers(len(tr)))
            r, c, _, dividing = tr[i]
            far = all(np.hypot(r - ev.row, c - ev.col) >= 2 * cfg.event_margin for ev in active)
            if not dividing and far:
                inter.append(RegionAnnotation(t, int(round(r)), int(round(c)), "interphase"))
    return anns + inter + back


@dataclass
class ProbeData:
    crops: np.ndarray  # (N, F, h, w)
    labels: np.ndarray  # (N,) 1 = mitotic
    masks: np.ndarray  # (N, h, w) child masks at the centre frame
    centers: np.ndarray  # (N, 3) centre frame, row, col


def make_probe_datasets(video: VideoSequence, events, masks: np.ndarray, crop=(2, 96, 96),
                        negative_ratio: int = 5, seed: int = 0, positive_offset: int = 1) -> ProbeData:
    """Event-centred positive crops plus negatives sampled away from every event.

    The centre frame of an F-frame crop is frame ``F // 2``; positives put it
    ``positive_offset`` frames after division onset. A negative must, for
    every event, either be spatially at least one crop diagonal away from the
    event centre or have no crop frame within ``F`` frames of the event's
    active interval.
    """
    if not events:
        raise ValueError("no events: cannot build a positive class")
    F_, h, w = crop
    T, H, W = video.shape
    if F_ > T or h > H or w > W:
        raise ValueError(f"crop {crop} larger than video {video.shape}")
    rng = np.random.default_rng(seed)
    diag = float(np.hypot(h, w))

    def window(tc, r, c):
        t0 = min(max(tc - F_ // 2, 0), T - F_)
        r0 = min(max(int(round(r)) - h // 2, 0), H - h)
        c0 = min(max(int(round(c)) - w // 2, 0), W - w)
        return t0, r0, c0

    def take(t0, r0, c0):
        return (np.asarray(video.frames[t0:t0 + F_, r0:r0 + h, c0:c0 + w], dtype=np.float32),
                np.asarray(masks[t0 + F_ // 2, r0:r0 + h, c0:c0 + w], dtype=np.uint8))

    crops, labels, mcrops, centers = [], [], [], []
    for ev in events:
        t0, r0, c0 = window(ev.t + positive_offset, ev.row, ev.col)
        x, mk = take(t0, r0, c0)
        crops.append(x), mcrops.append(mk), labels.append(1)
        centers.append((t0 + F_ // 2, r0 + h // 2, c0 + w // 2))

    n_neg = negative_ratio * len(events)
    found, tries = 0, 0
    while found < n_neg:
        tries += 1
        if tries > 1000 * n_neg:
            raise ValueError(f"only {found} of {n_neg} negatives found far enough from all events")
        t0 = int(rng.integers(T - F_ + 1))
        r0 = int(rng.integers(H - h + 1))
        c0 = int(rng.integers(W - w + 1))
        rc, cc = r0 + h // 2, c0 + w // 2
        ok = True
        for ev in events:
            far_space = np.hypot(rc - ev.row, cc - ev.col) >= diag
            far_time = t0 + F_ - 1 < ev.t - F_ or t0 > ev.t + ev.duration - 1 + F_
            if not (far_space or far_time):
                ok = False
                break
        if not ok:
            continue
        x, mk = take(t0, r0, c0)
        crops.append(x), mcrops.append(mk), labels.append(0)
        centers.append((t0 + F_ // 2, rc, cc))
        found += 1
    return ProbeData(np.stack(crops), np.array(labels, dtype=np.int64), np.stack(mcrops),
                     np.array(centers, dtype=np.int64))


def write_synth(result: SynthResult, out_dir, n_annotations: int = 50) -> dict:
    """Write ``video.tif``, ``masks.tif``, ``events.csv`` and ``annotations.csv``."""
    import tifffile

    from .video_io import save_video

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"video": save_video(result.video, out / "video.tif"),
             "masks": out / "masks.tif", "events": out / "events.csv", "annotations": out / "annotations.csv"}
    tifffile.imwrite(paths["masks"], result.masks, photometric="minisblack")
    with open(paths["events"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "t", "row", "col", "duration", "sigma"])
        for ev in result.events:
            wr.writerow([ev.kind, ev.t, f"{ev.row:.3f}", f"{ev.col:.3f}", ev.duration, f"{ev.sigma:.3f}"])
    with open(paths["annotations"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "row", "col", "type"])
        for a in region_annotations(result, n_annotations, seed=result.config.seed):
            wr.writerow([a.t, a.row, a.col, a.kind])
    return paths


def read_events(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"kind": r["kind"], "t": int(r["t"]), "row": float(r["row"]), "col": float(r["col"]),
                 "duration": int(r["duration"])} for r in csv.DictReader(fh)]


def read_annotations(path, video: int = 0) -> list[RegionAnnotation]:
    with open(path, newline="") as fh:
        return [RegionAnnotation(int(r["t"]), int(r["row"]), int(r["col"]), r["type"], int(r.get("video") or video))
                for r in csv.DictReader(fh)]


def ceiling_accuracy(result: SynthResult, patch: tuple[int, int], frames: Optional[np.ndarray] = None,
                     delta_t: int = 1, n: int = 20000, seed: int = 0) -> float:
    """Accuracy of an ideal observer that is right on every pair containing an active division.

    A window counts as informative if any child of an event active at t or
    t + delta_t lies inside it; every other pair is time-symmetric by
    construction and at best guessed at chance.
    """
    T, H, W = result.video.shape
    h, w = patch
    rng = np.random.default_rng(seed)
    starts = np.arange(T - delta_t) if frames is None else np.array(
        [t for t in frames if t + delta_t in set(np.asarray(frames).tolist())])
    hits = 0
    for _ in range(n):
        t = int(starts[rng.integers(len(starts))])
        r0, c0 = rng.integers(H - h + 1), rng.integers(W - w + 1)
        found = False
        for ev in result.events:
            for tt in (t, t + delta_t):
                if ev.active(tt):
                    ch = ev.children[tt - ev.t]
                    if np.any((ch[:, 0] >= r0) & (ch[:, 0] < r0 + h) & (ch[:, 1] >= c0) & (ch[:, 1] < c0 + w)):
                        found = True
            if found:
                break
        hits += found
    frac = hits / n
    return 0.5 + 0.5 * frac


def event_montage(result: SynthResult, event: int = 0, half_width: int = 24, step: int = 2) -> np.ndarray:
    """Grayscale uint8 strip around one event: top row forward in time, bottom row reversed.

    Forward, one blob splits into two; reversed, two blobs merge.
    """
    ev = result.events[event]
    T, H, W = result.video.shape
    r0 = min(max(int(round(ev.row)) - half_width, 0), H - 2 * half_width)
    c0 = min(max(int(round(ev.col)) - half_width, 0), W - 2 * half_width)
    ts = list(range(max(ev.t - 1, 0), min(ev.t + ev.duration + 1, T), step))
    tiles = [result.video.frames[t, r0:r0 + 2 * half_width, c0:c0 + 2 * half_width] for t in ts]
    top = np.concatenate(tiles, axis=1)
    bottom = np.concatenate(tiles[::-1], axis=1)
    strip = np.concatenate([top, bottom], axis=0)
    return np.clip(np.rint(strip * 255), 0, 255).astype(np.uint8)
