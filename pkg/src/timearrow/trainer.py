"""Pre-training loop, validation accuracy and the head ablation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment_pair
from .losses import LossConfig, classification_loss, total_loss
from .models import ExtractorConfig, HeadConfig, TimeArrowNet, load_checkpoint, save_checkpoint
from .sampler import PairSampler, PatchPair, SamplerConfig
from .video_io import NormalizationConfig, SplitSpec, VideoSequence, frame_splits

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    peak_lr: float = 4e-4
    min_lr: float = 4e-5
    cycle_epochs: float = 20.0
    val_samples: int = 1000
    checkpoint_every: int = 10
    seed: int = 0
    deterministic: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "val_samples", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if not 0 < self.min_lr <= self.peak_lr:
            raise ValueError("min_lr must be in (0, peak_lr]")
        if self.cycle_epochs <= 0:
            raise ValueError("cycle_epochs must be > 0")


def cyclic_lr(epoch: float, config: TrainConfig) -> float:
    """Triangular cycle: ``min_lr`` at multiples of the period, ``peak_lr`` half-way."""
    phase = (epoch / config.cycle_epochs) % 1.0
    tri = 1.0 - abs(2.0 * phase - 1.0)
    return config.min_lr + (config.peak_lr - config.min_lr) * tri


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, **row):
        if self.records and row["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("epochs must be logged in order")
        self.records.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def __len__(self):
        return len(self.records)

    def write_csv(self, path, include_seconds: bool = True):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LOG_COLUMNS)
            for r in self.records:
                wr.writerow([r["epoch"], f"{r['train_loss']:.8g}", f"{r['val_loss']:.8g}", f"{r['val_acc']:.8g}",
                             f"{r['lr']:.8g}", f"{r['seconds'] if include_seconds else 0.0:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.append(epoch=int(r["epoch"]), **{k: float(r[k]) for k in LOG_COLUMNS[1:]})
        return log

    def epochs_to(self, threshold: float, column: str = "val_loss") -> Optional[int]:
        """First epoch whose ``column`` is at or below ``threshold`` (None if never)."""
        for r in self.records:
            if r[column] <= threshold:
                return r["epoch"]
        return None


def _torch_dtype(name):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def pairs_to_tensors(pairs: Sequence[PatchPair], dtype=torch.float32):
    x = np.stack([np.stack(p.core()) for p in pairs])
    y = np.array([p.label for p in pairs], dtype=np.int64)
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(y)


class PairStream:
    """Training batches for one epoch: draws ``epoch * n .. (epoch + 1) * n - 1``."""

    def __init__(self, sampler: PairSampler, augment: Optional[AugmentConfig], samples_per_epoch: int):
        self.sampler = sampler
        self.augment = augment
        self.n = samples_per_epoch

    def batches(self, epoch: int, batch_size: int, dtype):
        start = epoch * self.n
        for b0 in range(0, self.n, batch_size):
            pairs = []
            for i in range(start + b0, start + min(b0 + batch_size, self.n)):
                p = self.sampler(i)
                pairs.append(augment_pair(p, self.augment, i) if self.augment is not None else p)
            yield pairs_to_tensors(pairs, dtype)


@torch.no_grad()
def predict_logits(model: TimeArrowNet, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)])


def evaluate_accuracy(model: TimeArrowNet, pairs: Sequence[PatchPair], batch_size: int = 64) -> dict:
    """Overall accuracy and, when pairs carry region tags, accuracy per region type."""
    if len(pairs) == 0:
        raise ValueError("cannot evaluate on an empty pair collection")
    dtype = next(model.parameters()).dtype
    x, y = pairs_to_tensors(pairs, dtype)
    logits = predict_logits(model, x, batch_size)
    correct = (logits.argmax(1) == y).numpy()
    out = {"accuracy": float(correct.mean()), "n": len(pairs),
           "loss": float(classification_loss(logits, y))}
    regions = [p.region for p in pairs]
    if any(r is not None for r in regions):
        out["by_region"] = {}
        for r in sorted({r for r in regions if r is not None}):
            sel = np.array([q == r for q in regions])
            out["by_region"][r] = {"accuracy": float(correct[sel].mean()), "n": int(sel.sum())}
    return out


def _validation_pairs(videos, sampler_cfg, frames, n, seed):
    if not any(len(f) for f in frames):
        return []
    cfg = replace(sampler_cfg, seed=seed, margin=0)
    try:
        sampler = PairSampler(videos, cfg, frames)
    except ValueError:
        return []
    return [sampler(i) for i in range(n)]


def _set_determinism(flag: bool):
    torch.use_deterministic_algorithms(flag)
    if hasattr(torch.backends, "cudnn"):
        torch.backends.cudnn.benchmark = not flag
        torch.backends.cudnn.deterministic = flag


def fit(
    videos: Sequence[VideoSequence],
    sampler_cfg: SamplerConfig = SamplerConfig(),
    augment_cfg: Optional[AugmentConfig] = AugmentConfig(),
    extractor_cfg: ExtractorConfig = ExtractorConfig(),
    head_cfg: HeadConfig = HeadConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    split: SplitSpec = SplitSpec(),
    out_dir=None,
    resume: bool = False,
    normalization: Optional[NormalizationConfig] = None,
    val_pairs: Optional[Sequence[PatchPair]] = None,
    epochs: Optional[int] = None,
) -> tuple[TimeArrowNet, TrainingLog]:
    """Train extractor and head jointly with Adam on the composite loss.

    With ``out_dir`` set, writes ``checkpoint-last``, ``checkpoint-best``,
    periodic ``checkpoint-epochNNNN`` files and ``log.csv``. ``resume``
    continues from ``checkpoint-last``. ``epochs`` stops early (for
    resume tests) without changing the schedule, which depends on
    ``train_cfg.epochs`` only through the cycle.
    """
    cfg = train_cfg
    dtype = _torch_dtype(cfg.dtype)
    _set_determinism(cfg.deterministic)
    torch.manual_seed(cfg.seed)

    max_dt = max(sampler_cfg.delta_t)
    splits = frame_splits(videos, split, max_dt)
    train_frames = [s[0] for s in splits]
    val_frames = [s[1] for s in splits]
    sampler = PairSampler(videos, sampler_cfg, train_frames)
    if val_pairs is None:
        val_pairs = _validation_pairs(videos, sampler_cfg, val_frames, cfg.val_samples, sampler_cfg.seed + 7919)
        if not val_pairs:
            logger.warning("no validation pairs available; validating on held-in training frames")
            val_pairs = _validation_pairs(videos, sampler_cfg, train_frames, cfg.val_samples,
                                          sampler_cfg.seed + 7919)
    xv, yv = pairs_to_tensors(val_pairs, dtype)

    model = TimeArrowNet(extractor_cfg, head_cfg).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.peak_lr, betas=(0.9, 0.999), eps=1e-8,
                                 weight_decay=0.0)
    log = TrainingLog()
    start_epoch, step, best = 0, 0, math.inf
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if out is None or not (out / "checkpoint-last").exists():
            raise FileNotFoundError("resume requested but no checkpoint-last in the output directory")
        loaded, payload = load_checkpoint(out / "checkpoint-last")
        model.load_state_dict(loaded.state_dict())
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch, step = payload["epoch"], payload["step"]
        best = payload["extra"].get("best_val_loss", math.inf)
        if (out / "log.csv").exists():
            log = TrainingLog.read_csv(out / "log.csv")
            log.records = log.records[:start_epoch]

    stream = PairStream(sampler, augment_cfg, sampler_cfg.samples_per_epoch)
    steps_per_epoch = math.ceil(sampler_cfg.samples_per_epoch / cfg.batch_size)
    stop = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    for epoch in range(start_epoch, stop):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for i, (x, y) in enumerate(stream.batches(epoch, cfg.batch_size, dtype)):
            lr = cyclic_lr(epoch + i / steps_per_epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits, z = model(x)
            loss = total_loss(logits, y, z, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}; "
                                       "last good checkpoint kept")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(float(loss.detach()))
        logits_v = predict_logits(model, xv)
        val_loss = float(classification_loss(logits_v, yv))
        val_acc = float((logits_v.argmax(1) == yv).float().mean())
        log.append(epoch=epoch + 1, train_loss=float(np.mean(losses)), val_loss=val_loss, val_acc=val_acc,
                   lr=cyclic_lr(epoch, cfg), seconds=time.perf_counter() - t0)
        logger.info("epoch %d train %.4f val %.4f acc %.3f", epoch + 1, log.records[-1]["train_loss"],
                    val_loss, val_acc)
        if out is not None:
            kw = dict(normalization=normalization, sampler=sampler_cfg, step=step, epoch=epoch + 1)
            if val_loss < best:
                best = val_loss
                save_checkpoint(out / "checkpoint-best", model, **kw)
            save_checkpoint(out / "checkpoint-last", model, optimizer_state=optimizer.state_dict(),
                            extra={"best_val_loss": best}, **kw)
            if (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint-epoch{epoch + 1:04d}", model, **kw)
            log.write_csv(out / "log.csv", include_seconds=not cfg.deterministic)
            if cfg.deterministic:
                _append_timing(out / "timing.csv", epoch + 1, log.records[-1]["seconds"])
    model.eval()
    return model, log


def _append_timing(path, epoch, seconds):
    new = not Path(path).exists() or epoch == 1
    with open(path, "w" if new else "a", newline="") as fh:
        if new:
            fh.write("epoch,seconds\n")
        fh.write(f"{epoch},{seconds:.3f}\n")


def head_ablation(videos, seeds=(0, 1, 2), heads=("equivariant", "plain"), out_dir=None, **fit_kwargs) -> dict:
    """Train every (head, seed) combination on identical data; returns ``{(head, seed): TrainingLog}``."""
    head_base = fit_kwargs.pop("head_cfg", HeadConfig())
    train_base = fit_kwargs.pop("train_cfg", TrainConfig())
    sampler_base = fit_kwargs.pop("sampler_cfg", SamplerConfig())
    augment_base = fit_kwargs.pop("augment_cfg", AugmentConfig())
    logs = {}
    for seed in seeds:
        for head in heads:
            run_dir = None if out_dir is None else Path(out_dir) / f"{head}_seed{seed}"
            _, log = fit(videos,
                         sampler_cfg=replace(sampler_base, seed=seed),
                         augment_cfg=None if augment_base is None else replace(augment_base, seed=seed),
                         head_cfg=replace(head_base, kind=head),
                         train_cfg=replace(train_base, seed=seed),
                         out_dir=run_dir, **fit_kwargs)
            logs[(head, seed)] = log
    return logs
