"""Downstream probes on frozen or fine-tuned time arrow features, plus label-budget sweeps."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models import ExtractorConfig, TimeArrowNet, UNet
from .metrics import average_precision, instances_from_probability, match_and_score

logger = logging.getLogger(__name__)

MODES = ("linear", "fixed", "finetune", "baseline")
_ALIASES = {"small_classifier_on_fixed": "fixed", "supervised_baseline": "baseline"}


@dataclass(frozen=True)
class ProbeSpec:
    """Probe configuration.

    ``mode``: ``linear`` (pooled features -> affine), ``fixed`` (residual CNN
    on frozen features), ``finetune`` (extractor + residual CNN trained
    jointly, extractor at ``finetune_lr_factor`` of the probe LR) or
    ``baseline`` (same residual CNN on raw frames, from scratch).
    """

    mode: str = "linear"
    label_budget: float = 1.0
    seeds: tuple[int, ...] = (0,)
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    resnet_width: int = 64
    resnet_blocks: tuple[int, ...] = (1, 1, 1, 1)
    finetune_lr_factor: float = 0.1
    unet_depth: int = 2
    unet_width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "mode", _ALIASES.get(self.mode, self.mode))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    @property
    def input(self) -> str:
        return "raw_images" if self.mode == "baseline" else "tap_features"

    @property
    def needs_checkpoint(self) -> bool:
        return self.mode != "baseline"


def _as_crops(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected (N, H, W) images or (N, F, H, W) crops, got shape {x.shape}")
    return np.require(x, requirements=["C", "W"])


class FrameEncoder(nn.Module):
    """Applies a single-image extractor to every frame and concatenates along channels."""

    def __init__(self, extractor: nn.Module):
        super().__init__()
        self.extractor = extractor

    def forward(self, x):
        n, f, h, w = x.shape
        z = self.extractor(x.reshape(n * f, 1, h, w))
        return z.reshape(n, -1, h, w)


@torch.no_grad()
def embed(model: TimeArrowNet, images, batch_size: int = 16) -> np.ndarray:
    """Frozen dense features; ``(N, F, H, W)`` crops give ``(N, F * c, H, W)``."""
    x = _as_crops(images)
    model.eval()
    enc = FrameEncoder(model.extractor)
    dtype = next(model.parameters()).dtype
    out = [enc(torch.as_tensor(x[i:i + batch_size], dtype=dtype)).float().numpy()
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class ResidualClassifier(nn.Module):
    """Small ResNet with a stride-2 stem; width 64 with one block per stage has ~4.9M parameters."""

    def __init__(self, in_channels: int, n_classes: int, width: int = 64, blocks=(1, 1, 1, 1)):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 2, 1, bias=False), nn.BatchNorm2d(width),
                                  nn.ReLU())
        stages, c = [], width
        for i, n in enumerate(blocks):
            c_out = width * 2**i
            for j in range(n):
                stages.append(BasicBlock(c, c_out, 2 if (i > 0 and j == 0) else 1))
                c = c_out
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(c, n_classes)

    def forward(self, x):
        return self.fc(self.stages(self.stem(x)).mean(dim=(-2, -1)))


class LinearProbe(nn.Module):
    """Global average pooling followed by an affine map."""

    def __init__(self, in_channels: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, n_classes)

    def forward(self, x):
        return self.fc(x.mean(dim=(-2, -1)) if x.ndim == 4 else x)


def budget_size(budget, n: int) -> int:
    if isinstance(budget, (float, np.floating)) and budget <= 1.0:
        if budget <= 0:
            raise ValueError("fractional budget must be in (0, 1]")
        return max(int(round(budget * n)), 1)
    b = int(budget)
    if b < 1 or b > n:
        raise ValueError(f"label budget {budget} outside 1..{n}")
    return b


def nested_budget_indices(labels, budgets: Sequence, seed: int = 0) -> list[np.ndarray]:
    """Stratified subsets for ascending budgets; each subset contains all smaller ones."""
    labels = np.asarray(labels)
    budgets = list(budgets)
    n = len(labels)
    sizes = [budget_size(b, n) for b in budgets]
    if sizes != sorted(sizes):
        raise ValueError("budgets must be sorted ascending")
    classes, counts = np.unique(labels, return_counts=True)
    rng = np.random.default_rng(seed)
    perms = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    out = []
    for b, size in zip(budgets, sizes):
        if size < len(classes):
            raise ValueError(f"budget {b} ({size} samples) is below one sample per class ({len(classes)} classes)")
        take = {c: min(max(int(round(size * k / n)), 1), k) for c, k in zip(classes, counts)}
        out.append(np.sort(np.concatenate([perms[c][:take[c]] for c in classes])))
    return out


def _set_seed(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _train(module, params, x, y, spec: ProbeSpec, seed: int, loss_fn):
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, weight_decay=spec.weight_decay)
    n = len(x)
    bs = min(spec.batch_size, n)
    module.train()
    for _ in range(spec.epochs):
        order = torch.randperm(n, generator=gen)
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            if len(idx) < 2 and any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules()):
                continue
            loss = loss_fn(module(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    module.eval()
    return module


class Probe:
    """A trained probe bundled with the input pipeline it expects."""

    def __init__(self, spec: ProbeSpec, net: nn.Module, tap_model: Optional[TimeArrowNet], classes):
        self.spec = spec
        self.net = net
        self.tap_model = tap_model
        self.classes_ = np.asarray(classes)

    def _inputs(self, images):
        x = _as_crops(images)
        if self.spec.mode in ("linear", "fixed"):
            feats = embed(self.tap_model, x)
            if self.spec.mode == "linear":
                feats = feats.mean(axis=(-2, -1))
            return torch.as_tensor(feats)
        return torch.as_tensor(x)

    @torch.no_grad()
    def predict_proba(self, images, batch_size: int = 32) -> np.ndarray:
        self.net.eval()
        x = self._inputs(images)
        out = [torch.softmax(self.net(x[i:i + batch_size]), 1) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy()

    def predict(self, images) -> np.ndarray:
        return self.classes_[self.predict_proba(images).argmax(1)]


def _build(spec: ProbeSpec, model, in_frames, n_classes):
    """Returns ``(net, param groups)`` for the probe network."""
    c = model.extractor_config.out_channels if model is not None else 0
    if spec.mode == "linear":
        net = LinearProbe(in_frames * c, n_classes)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    if spec.mode == "fixed":
        net = ResidualClassifier(in_frames * c, n_classes, spec.resnet_width, spec.resnet_blocks)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    if spec.mode == "baseline":
        net = ResidualClassifier(in_frames, n_classes, spec.resnet_width, spec.resnet_blocks)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    enc = FrameEncoder(copy.deepcopy(model.extractor).float())
    head = ResidualClassifier(in_frames * c, n_classes, spec.resnet_width, spec.resnet_blocks)
    net = nn.Sequential(enc, head)
    return net, [{"params": enc.parameters(), "lr": spec.lr * spec.finetune_lr_factor},
                 {"params": head.parameters(), "lr": spec.lr}]


def classification_metrics(proba: np.ndarray, y: np.ndarray, classes) -> dict:
    pred = np.asarray(classes)[proba.argmax(1)]
    out = {"accuracy": float(np.mean(pred == y))}
    if len(classes) == 2:
        pos = np.asarray(y) == classes[1]
        out["ap"] = average_precision(proba[:, 1], pos) if pos.any() else float("nan")
    return out


def train_probe(spec: ProbeSpec, images, labels, model: Optional[TimeArrowNet] = None, seed: int = 0,
                test_images=None, test_labels=None, features=None) -> tuple[Probe, dict]:
    """Train one probe on ``images`` (already budget-subsampled) and score it on the test set.

    ``features`` may pass precomputed frozen features for ``images`` to avoid
    re-embedding across seeds.
    """
    if spec.needs_checkpoint and model is None:
        raise ValueError(f"probe mode {spec.mode!r} needs a time arrow checkpoint")
    x = _as_crops(images)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("training labels contain a single class")
    y_idx = torch.as_tensor(np.searchsorted(classes, y), dtype=torch.long)
    _set_seed(seed)
    net, groups = _build(spec, model, x.shape[1], len(classes))
    if spec.mode in ("linear", "fixed"):
        feats = embed(model, x) if features is None else np.asarray(features, dtype=np.float32)
        if spec.mode == "linear":
            feats = feats.mean(axis=(-2, -1)) if feats.ndim == 4 else feats
        inputs = torch.as_tensor(feats)
    else:
        inputs = torch.as_tensor(x)
    _train(net, groups, inputs, y_idx, spec, seed, F.cross_entropy)
    probe = Probe(spec, net, model, classes)
    metrics = {"mode": spec.mode, "seed": seed, "n_train": len(y),
               "n_params": sum(p.numel() for p in net.parameters())}
    metrics.update({f"train_{k}": v for k, v in
                    classification_metrics(probe.predict_proba(x), y, classes).items()})
    if test_images is not None:
        metrics.update(classification_metrics(probe.predict_proba(test_images), np.asarray(test_labels), classes))
    return probe, metrics


def label_budget_sweep(template: ProbeSpec, modes: Sequence[str], budgets: Sequence, seeds: Sequence[int],
                       images, labels, test_images, test_labels, model: Optional[TimeArrowNet] = None) -> list[dict]:
    """One metrics row per (budget, mode, seed); budget subsets are nested per seed."""
    if list(budgets) != sorted(budgets, key=lambda b: budget_size(b, len(labels))):
        raise ValueError("budgets must be sorted ascending")
    x = _as_crops(images)
    needs_features = any(_ALIASES.get(m, m) in ("linear", "fixed") for m in modes)
    feats = embed(model, x) if needs_features and model is not None else None
    rows = []
    for seed in seeds:
        subsets = nested_budget_indices(labels, budgets, seed)
        for budget, idx in zip(budgets, subsets):
            for mode in modes:
                spec = replace(template, mode=mode, label_budget=budget)
                _, m = train_probe(spec, x[idx], np.asarray(labels)[idx], model, seed, test_images, test_labels,
                                   features=None if feats is None else feats[idx])
                rows.append({"budget": budget, **m})
    return rows


class DenseProbe:
    """Pixelwise foreground probability from frozen features, fine-tuned features or raw frames."""

    def __init__(self, spec: ProbeSpec, net: nn.Module, tap_model: Optional[TimeArrowNet]):
        self.spec = spec
        self.net = net
        self.tap_model = tap_model

    def _inputs(self, images):
        x = _as_crops(images)
        if self.spec.mode in ("linear", "fixed"):
            return torch.as_tensor(embed(self.tap_model, x))
        return torch.as_tensor(x)

    @torch.no_grad()
    def predict_proba(self, images, batch_size: int = 8) -> np.ndarray:
        self.net.eval()
        x = self._inputs(images)
        out = [torch.sigmoid(self.net(x[i:i + batch_size]))[:, 0] for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy()


def _dense_net(spec: ProbeSpec, model, in_frames):
    cfg = ExtractorConfig(depth=spec.unet_depth, base_channels=spec.unet_width, out_channels=1)
    c = model.extractor_config.out_channels if model is not None else 0
    if spec.mode == "linear":
        net = nn.Conv2d(in_frames * c, 1, 1)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    if spec.mode == "fixed":
        net = UNet(cfg, in_channels=in_frames * c)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    if spec.mode == "baseline":
        net = UNet(cfg, in_channels=in_frames)
        return net, [{"params": net.parameters(), "lr": spec.lr}]
    enc = FrameEncoder(copy.deepcopy(model.extractor).float())
    head = UNet(cfg, in_channels=in_frames * c)
    return nn.Sequential(enc, head), [{"params": enc.parameters(), "lr": spec.lr * spec.finetune_lr_factor},
                                      {"params": head.parameters(), "lr": spec.lr}]


def segmentation_scores(prob_maps, masks, iou_threshold: float = 0.5, min_size: int = 64,
                        threshold: float = 0.5) -> dict:
    """Pooled F1 over images: ``2 * sum(matches) / (sum(pred) + sum(gt))``."""
    m = p = g = 0
    for prob, mask in zip(prob_maps, masks):
        pred = instances_from_probability(prob, threshold, min_size)
        gt = instances_from_probability(np.asarray(mask, dtype=float), 0.5, 0)
        r = match_and_score(pred, gt, iou_threshold)
        m, p, g = m + r.n_matched, p + r.n_pred, g + r.n_gt
    f1 = 1.0 if p + g == 0 else 2 * m / (p + g)
    return {"f1": f1, "n_matched": m, "n_pred": p, "n_gt": g}


def dense_probe(spec: ProbeSpec, images, masks, model: Optional[TimeArrowNet] = None, seed: int = 0,
                test_images=None, test_masks=None, iou_threshold: float = 0.5,
                min_size: int = 64) -> tuple[DenseProbe, dict]:
    """Train a dense head with pixelwise binary cross-entropy; masks are ``(N, H, W)``."""
    if spec.needs_checkpoint and model is None:
        raise ValueError(f"probe mode {spec.mode!r} needs a time arrow checkpoint")
    x = _as_crops(images)
    y = np.asarray(masks)
    if y.shape != (x.shape[0], *x.shape[-2:]):
        raise ValueError(f"masks of shape {y.shape} do not align with images {x.shape}")
    if not y.any():
        raise ValueError("every training mask is empty")
    _set_seed(seed)
    net, groups = _dense_net(spec, model, x.shape[1])
    inputs = torch.as_tensor(embed(model, x)) if spec.mode in ("linear", "fixed") else torch.as_tensor(x)
    target = torch.as_tensor(y > 0, dtype=torch.float32)[:, None]
    _train(net, groups, inputs, target, spec, seed, F.binary_cross_entropy_with_logits)
    probe = DenseProbe(spec, net, model)
    metrics = {"mode": spec.mode, "seed": seed, "n_train": len(x)}
    if test_images is not None:
        prob = probe.predict_proba(test_images)
        metrics.update(segmentation_scores(prob, test_masks, iou_threshold, min_size))
    return probe, metrics
