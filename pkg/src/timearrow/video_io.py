"""Loading, normalizing and splitting single-channel time-lapse videos."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tifffile
from PIL import Image

logger = logging.getLogger(__name__)

_TIFF_SUFFIXES = (".tif", ".tiff")
_FRAME_SUFFIXES = (".tif", ".tiff", ".png")
_META_KEY = "timearrow"


@dataclass(frozen=True)
class NormalizationConfig:
    """Per-video percentile normalization.

    ``method="percentile"`` maps the lower/upper intensity percentiles to 0/1
    and clips; ``method="none"`` only casts to float32.
    """

    percentiles: tuple[float, float] = (1.0, 99.8)
    clip: bool = True
    method: str = "percentile"

    def __post_init__(self):
        lo, hi = self.percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError(f"percentiles must satisfy 0 <= lo < hi <= 100, got {self.percentiles}")
        if self.method not in ("percentile", "none"):
            raise ValueError(f"unknown normalization method {self.method!r}")


@dataclass(frozen=True, eq=False)
class VideoSequence:
    frames: np.ndarray
    name: str = "video"
    frame_interval: Optional[float] = None
    normalized: bool = False

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"expected a T x H x W stack, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError(f"a video needs at least 2 frames, got {frames.shape[0]}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("video contains non-finite intensities")
        frames = frames.view()
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]


def normalize_frames(frames: np.ndarray, config: NormalizationConfig = NormalizationConfig()) -> np.ndarray:
    """Normalize a whole stack with one pair of percentiles (monotone map)."""
    x = np.asarray(frames, dtype=np.float64)
    if config.method == "none":
        return x.astype(np.float32)
    lo, hi = np.percentile(x, config.percentiles)
    if not hi > lo:
        # degenerate (constant) input
        return np.zeros(x.shape, dtype=np.float32)
    out = (x - lo) / (hi - lo)
    if config.clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def _check_single_channel(arr: np.ndarray, source) -> np.ndarray:
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        if arr.shape[-1] in (3, 4) and arr.shape[0] > 4:
            # looks like H x W x RGB(A)
            raise ValueError(f"{source}: multi-channel images are not supported (shape {arr.shape})")
        return arr
    raise ValueError(f"{source}: multi-channel or volumetric stacks are not supported (shape {arr.shape})")


def _read_frame(path: Path) -> np.ndarray:
    if path.suffix.lower() in _TIFF_SUFFIXES:
        arr = tifffile.imread(path)
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "I;16B", "F", "1"):
                raise ValueError(f"{path}: multi-channel images are not supported (mode {im.mode})")
            arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel 2D frame, got shape {arr.shape}")
    return arr


def _read_stack(path: Path) -> tuple[np.ndarray, dict]:
    with tifffile.TiffFile(path) as tif:
        arr = tif.asarray()
        desc = tif.pages[0].description if len(tif.pages) else ""
    meta = {}
    if desc:
        try:
            meta = json.loads(desc).get(_META_KEY, {})
        except (ValueError, AttributeError):
            meta = {}
    return _check_single_channel(arr, path), meta


def load_video(
    path,
    normalization: Optional[NormalizationConfig] = NormalizationConfig(),
    name: Optional[str] = None,
) -> VideoSequence:
    """Read a multi-page TIFF or a directory of frames ordered by filename.

    Stacks written by :func:`save_video` are flagged as already normalized and
    are returned unchanged, so save/load round trips are bit-exact.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such video: {path}")
    meta: dict = {}
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _FRAME_SUFFIXES)
        if not files:
            raise ValueError(f"{path}: directory contains no .tif/.png frames")
        frames = [_read_frame(f) for f in files]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"{path}: inconsistent frame shapes {sorted(shapes)}")
        arr = np.stack(frames)
    else:
        if path.suffix.lower() not in _TIFF_SUFFIXES:
            raise ValueError(f"{path}: unsupported file type (expected TIFF stack or frame directory)")
        arr, meta = _read_stack(path)
    if arr.shape[0] < 2:
        raise ValueError(f"{path}: a video needs at least 2 frames, got {arr.shape[0]}")
    if not np.issubdtype(arr.dtype, np.number) or np.iscomplexobj(arr):
        raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")

    if meta.get("normalized"):
        frames = arr.astype(np.float32, copy=False)
        normalized = True
    elif normalization is None:
        frames = arr.astype(np.float32)
        normalized = False
    else:
        frames = normalize_frames(arr, normalization)
        normalized = normalization.method != "none"
    return VideoSequence(
        frames=frames,
        name=name or meta.get("name") or path.stem,
        frame_interval=meta.get("frame_interval"),
        normalized=normalized,
    )


def save_video(video: VideoSequence, path) -> Path:
    """Write frames as a float32 TIFF stack with metadata in the description."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {_META_KEY: {"normalized": bool(video.normalized), "name": video.name,
                        "frame_interval": video.frame_interval}}
    tifffile.imwrite(path, np.asarray(video.frames, dtype=np.float32),
                     description=json.dumps(meta), metadata=None, photometric="minisblack")
    return path


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    holdout_policy: str = "temporal_tail"

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.holdout_policy not in ("temporal_tail", "whole_video"):
            raise ValueError(f"unknown holdout policy {self.holdout_policy!r}")


def _has_pair(indices: np.ndarray, delta_t: int) -> bool:
    s = set(indices.tolist())
    return any(t + delta_t in s for t in s)


def split_frames(video, spec: SplitSpec = SplitSpec(), max_delta_t: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Split the time axis into a training prefix and a validation suffix.

    ``video`` may be a :class:`VideoSequence` or a frame count.
    """
    if spec.holdout_policy != "temporal_tail":
        raise ValueError("split_frames handles the temporal_tail policy; use split_videos for whole_video")
    n = len(video) if not isinstance(video, (int, np.integer)) else int(video)
    n_train = int(round(spec.train_fraction * n))
    n_train = min(max(n_train, 1), n)
    train = np.arange(n_train)
    val = np.arange(n_train, n)
    if not _has_pair(train, max_delta_t):
        raise ValueError(
            f"training split of {n_train} frames has no (t, t+{max_delta_t}) pair; "
            "increase split.train_fraction or decrease the time step")
    if val.size == 0:
        warnings.warn("validation split is empty (train_fraction = 1.0)", stacklevel=2)
    elif not _has_pair(val, max_delta_t):
        warnings.warn(f"validation split {val.tolist()} has no (t, t+{max_delta_t}) pair", stacklevel=2)
    return train, val


def split_videos(videos: Sequence[VideoSequence], spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Hold out whole videos: the trailing ones become validation videos."""
    n = len(videos)
    n_train = min(max(int(round(spec.train_fraction * n)), 1), n)
    if n_train == n:
        warnings.warn("no video left for validation", stacklevel=2)
    return list(range(n_train)), list(range(n_train, n))


def frame_splits(videos: Sequence[VideoSequence], spec: SplitSpec, max_delta_t: int = 1):
    """Per-video (train, val) frame index arrays for either holdout policy."""
    if spec.holdout_policy == "whole_video":
        train_ids, _ = split_videos(videos, spec)
        out = []
        for i, v in enumerate(videos):
            idx = np.arange(len(v))
            empty = np.arange(0)
            out.append((idx, empty) if i in train_ids else (empty, idx))
        return out
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [split_frames(v, spec, max_delta_t) for v in videos]
