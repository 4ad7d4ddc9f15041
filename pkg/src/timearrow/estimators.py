"""scikit-learn style estimators around the pretext trainer and the downstream probes."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attribution import attribute_video, gradcam
from .augment import AugmentConfig, augment_level
from .downstream.metrics import instances_from_probability
from .downstream.probes import ProbeSpec, dense_probe, embed, segmentation_scores, train_probe
from .losses import LossConfig
from .models import ExtractorConfig, HeadConfig, TimeArrowNet, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig
from .trainer import TrainConfig, fit as fit_pretext, predict_logits
from .video_io import NormalizationConfig, SplitSpec, VideoSequence, normalize_frames


def check_videos(X, normalization: Optional[NormalizationConfig] = None) -> list[VideoSequence]:
    """Accept one video or a list of videos as ``VideoSequence`` or ``(T, H, W)`` arrays."""
    if isinstance(X, VideoSequence):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("expected a video (T, H, W) or a non-empty list of videos")
    out = []
    for i, v in enumerate(X):
        if isinstance(v, VideoSequence):
            out.append(v)
            continue
        arr = check_array(v, allow_nd=True, dtype=np.float32, ensure_min_samples=2)
        if arr.ndim != 3:
            raise ValueError(f"video {i} must have shape (T, H, W), got {arr.shape}")
        frames = normalize_frames(arr, normalization) if normalization is not None else arr
        out.append(VideoSequence(frames, name=f"video{i}", normalized=normalization is not None))
    return out


def check_crops(X) -> np.ndarray:
    """Crops as float32 ``(N, F, H, W)``; ``(N, H, W)`` is read as single-frame crops."""
    arr = check_array(X, allow_nd=True, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected crops of shape (N, F, H, W) or (N, H, W), got {arr.shape}")
    return np.require(arr, requirements=["C", "W"])


def check_pairs(X) -> np.ndarray:
    arr = check_crops(X)
    if arr.shape[1] != 2:
        raise ValueError(f"expected frame pairs of shape (N, 2, H, W), got {arr.shape}")
    return arr


class TimeArrowPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised time arrow pretraining; ``transform`` yields frozen dense features.

    ``fit`` takes one or more videos. ``transform`` maps crops ``(N, F, H, W)``
    to per-frame features stacked along channels, mean-pooled over space
    unless ``pooling="none"``.
    """

    def __init__(self, patch_size=(96, 96), delta_t=(1,), samples_per_epoch=100_000, epochs=200,
                 batch_size=256, peak_lr=4e-4, min_lr=4e-5, cycle_epochs=20.0, depth=3, base_channels=32,
                 out_channels=32, head="equivariant", lam=0.01, tau=0.2, augment_level=4,
                 train_fraction=0.9, val_samples=1000, pooling="mean", random_state=0,
                 deterministic=False, out_dir=None):
        self.patch_size = patch_size
        self.delta_t = delta_t
        self.samples_per_epoch = samples_per_epoch
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.min_lr = min_lr
        self.cycle_epochs = cycle_epochs
        self.depth = depth
        self.base_channels = base_channels
        self.out_channels = out_channels
        self.head = head
        self.lam = lam
        self.tau = tau
        self.augment_level = augment_level
        self.train_fraction = train_fraction
        self.val_samples = val_samples
        self.pooling = pooling
        self.random_state = random_state
        self.deterministic = deterministic
        self.out_dir = out_dir

    def _configs(self):
        seed = int(self.random_state or 0)
        augment: Optional[AugmentConfig] = augment_level(self.augment_level, seed=seed)
        if not augment.enabled:
            augment = None
        return dict(
            sampler_cfg=SamplerConfig(tuple(self.patch_size), tuple(self.delta_t),
                                      samples_per_epoch=self.samples_per_epoch, seed=seed),
            augment_cfg=augment,
            extractor_cfg=ExtractorConfig(self.depth, self.base_channels, self.out_channels),
            head_cfg=HeadConfig(self.head),
            loss_cfg=LossConfig(self.lam, self.tau),
            train_cfg=TrainConfig(self.epochs, self.batch_size, self.peak_lr, self.min_lr, self.cycle_epochs,
                                  self.val_samples, seed=seed, deterministic=self.deterministic),
            split=SplitSpec(self.train_fraction),
        )

    def fit(self, X, y=None):
        if self.pooling not in ("mean", "none"):
            raise ValueError("pooling must be 'mean' or 'none'")
        videos = check_videos(X, NormalizationConfig())
        self.model_, self.log_ = fit_pretext(videos, out_dir=self.out_dir, **self._configs())
        self.n_features_per_frame_ = self.out_channels
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "TimeArrowPretrainer":
        model, payload = load_checkpoint(path)
        ext = model.extractor_config
        est = cls(depth=ext.depth, base_channels=ext.base_channels, out_channels=ext.out_channels,
                  head=model.head_config.kind, **params)
        est.model_ = model
        est.log_ = None
        est.n_features_per_frame_ = ext.out_channels
        est.checkpoint_ = payload
        return est

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)
        return Path(path)

    def transform(self, X):
        check_is_fitted(self, "model_")
        feats = embed(self.model_, check_crops(X))
        return feats.mean(axis=(-2, -1)) if self.pooling == "mean" else feats

    def predict_proba(self, X) -> np.ndarray:
        """Probability that each pair ``(N, 2, H, W)`` is shown backward, column order (forward, backward)."""
        check_is_fitted(self, "model_")
        dtype = next(self.model_.parameters()).dtype
        x = torch.as_tensor(check_pairs(X), dtype=dtype)
        return torch.softmax(predict_logits(self.model_, x), 1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(1)

    def attribute(self, frames, delta_t: int = 1, tile: int = 256, overlap: int = 32):
        """Grad-CAM maps for every frame pair of a video, or for one pair if given ``(2, H, W)``."""
        check_is_fitted(self, "model_")
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 3:
            raise ValueError(f"expected frames of shape (T, H, W), got {frames.shape}")
        if len(frames) == 2 and delta_t == 1:
            return [gradcam(self.model_, frames[0], frames[1], tile, overlap)]
        return attribute_video(self.model_, frames, delta_t, tile, overlap)


def _resolve_model(pretrainer) -> Optional[TimeArrowNet]:
    if pretrainer is None:
        return None
    if isinstance(pretrainer, TimeArrowNet):
        return pretrainer
    if isinstance(pretrainer, (str, Path)):
        return load_checkpoint(pretrainer)[0]
    check_is_fitted(pretrainer, "model_")
    return pretrainer.model_


class _ProbeParams(BaseEstimator):
    def __init__(self, pretrainer=None, mode="linear", epochs=100, lr=1e-3, batch_size=32, resnet_width=64,
                 random_state=0):
        self.pretrainer = pretrainer
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.resnet_width = resnet_width
        self.random_state = random_state

    def _spec(self) -> ProbeSpec:
        return ProbeSpec(self.mode, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                         resnet_width=self.resnet_width)


class TimeArrowProbeClassifier(ClassifierMixin, _ProbeParams):
    """Crop classifier on time arrow features (``mode`` linear, fixed, finetune) or raw frames (baseline)."""

    def fit(self, X, y):
        X = check_crops(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} crops but {len(y)} labels")
        self.probe_, self.train_metrics_ = train_probe(self._spec(), X, y, _resolve_model(self.pretrainer),
                                                       seed=int(self.random_state or 0))
        self.classes_ = self.probe_.classes_
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "probe_")
        return self.probe_.predict_proba(check_crops(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(1)]


class DenseProbeSegmenter(_ProbeParams):
    """Pixelwise probe; ``predict`` returns instance label images, ``score`` the instance F1."""

    def __init__(self, pretrainer=None, mode="fixed", epochs=100, lr=1e-3, batch_size=32, resnet_width=64,
                 random_state=0, threshold=0.5, min_size=64, iou_threshold=0.5):
        super().__init__(pretrainer, mode, epochs, lr, batch_size, resnet_width, random_state)
        self.threshold = threshold
        self.min_size = min_size
        self.iou_threshold = iou_threshold

    def fit(self, X, y):
        X = check_crops(X)
        masks = check_array(y, allow_nd=True)
        self.probe_, _ = dense_probe(self._spec(), X, masks, _resolve_model(self.pretrainer),
                                     seed=int(self.random_state or 0))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "probe_")
        return self.probe_.predict_proba(check_crops(X))

    def predict(self, X) -> np.ndarray:
        return np.stack([instances_from_probability(p, self.threshold, self.min_size)
                         for p in self.predict_proba(X)])

    def score(self, X, y, sample_weight=None) -> float:
        return segmentation_scores(self.predict_proba(X), check_array(y, allow_nd=True), self.iou_threshold,
                                   self.min_size, self.threshold)["f1"]
