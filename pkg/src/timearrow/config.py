"""Run configuration: defaults, validation and conversion to the per-module config objects."""

from __future__ import annotations

import copy
import difflib
from typing import Any, Callable, Optional

import yaml

from .augment import _TRANSFORMS, AugmentConfig, augment_level
from .losses import LossConfig
from .models import ExtractorConfig, HeadConfig
from .sampler import SamplerConfig
from .synth import SynthConfig
from .trainer import TrainConfig
from .video_io import NormalizationConfig, SplitSpec


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _pos(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _unit(v):
    return None if 0 <= v <= 1 else "must be in [0, 1]"


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {', '.join(map(str, options))}"


def _all_pos(v):
    return None if all(x > 0 for x in v) else "entries must be > 0"


def _ordered(v):
    return None if v[0] <= v[1] else "must be an ordered (low, high) pair"


# key: (default, type, check)
SCHEMA: dict[str, tuple[Any, str, Optional[Callable]]] = {
    "input.paths": ([], "list[str]", None),
    "input.annotations": (None, "str?", None),
    "input.checkpoint": (None, "str?", None),
    "input.crops": (None, "str?", None),
    "input.labels": (None, "str?", None),
    "input.normalization.percentiles": ([1.0, 99.8], "pair[float]",
                                        lambda v: None if 0 <= v[0] < v[1] <= 100 else "must satisfy 0 <= lo < hi <= 100"),
    "input.normalization.method": ("percentile", "str", _choice("percentile", "none")),
    "split.train_fraction": (0.9, "float", lambda v: None if 0 < v <= 1 else "must be in (0, 1]"),
    "split.policy": ("temporal_tail", "str", _choice("temporal_tail", "whole_video")),
    "sampler.patch": ([96, 96], "pair[int]", _all_pos),
    "sampler.delta_t": ([1], "list[int]", lambda v: None if v and all(x > 0 for x in v) else "must be positive integers"),
    "sampler.samples_per_epoch": (100_000, "int", _pos),
    "sampler.seed": (0, "int", None),
    "sampler.margin": (16, "int", _nonneg),
    "augment.level": (None, "int?", _choice(0, 1, 2, 3, 4)),
    "augment.apply_probability": (0.5, "float", _unit),
    "augment.rotation_range": ([0.0, 360.0], "pair[float]", _ordered),
    "augment.scale_range": ([0.8, 1.25], "pair[float]", lambda v: _ordered(v) or _all_pos(v)),
    "augment.elastic_grid": (4, "int", lambda v: None if v >= 2 else "must be >= 2"),
    "augment.elastic_sigma": (5.0, "float", _nonneg),
    "augment.translate_fraction": (0.1, "float", _nonneg),
    "augment.intensity_scale": ([0.8, 1.2], "pair[float]", _ordered),
    "augment.intensity_shift": ([-0.1, 0.1], "pair[float]", _ordered),
    "augment.noise_sigma": ([0.0, 0.05], "pair[float]", _ordered),
    **{f"augment.{t}": (True, "bool", None) for t in _TRANSFORMS},
    "model.depth": (3, "int", _nonneg),
    "model.base_channels": (32, "int", _pos),
    "model.out_channels": (32, "int", _pos),
    "model.leaky_slope": (0.01, "float", _nonneg),
    "head.kind": ("equivariant", "str", _choice("equivariant", "plain")),
    "head.hidden": ([32, 32], "list[int]", _all_pos),
    "head.plain_width": (8, "int", _pos),
    "loss.lambda": (0.01, "float", lambda v: None if v >= 0 else "lambda must be >= 0"),
    "loss.tau": (0.2, "float", lambda v: None if v > 0 else "tau must be > 0"),
    "loss.normalize_channels": (False, "bool", None),
    "train.epochs": (200, "int", _pos),
    "train.batch_size": (256, "int", _pos),
    "train.peak_lr": (4e-4, "float", _pos),
    "train.min_lr": (4e-5, "float", _pos),
    "train.cycle_epochs": (20.0, "float", _pos),
    "train.val_samples": (1000, "int", _pos),
    "train.checkpoint_every": (10, "int", _pos),
    "train.seed": (0, "int", None),
    "train.deterministic": (False, "bool", None),
    "train.dtype": ("float32", "str", _choice("float32", "float64")),
    "attribution.delta_t": (1, "int", _pos),
    "attribution.topk": (6, "int", _pos),
    "attribution.radius": (48.0, "float", _pos),
    "attribution.tile": (256, "int", _pos),
    "attribution.overlap": (32, "int", _nonneg),
    "probe.mode": ("linear", "str", _choice("linear", "fixed", "finetune", "baseline")),
    "probe.task": ("classify", "str", _choice("classify", "segment")),
    "probe.budgets": ([0.01, 0.03, 0.1, 0.3, 1.0], "list[float]", _all_pos),
    "probe.seeds": (3, "int", _pos),
    "probe.epochs": (100, "int", _pos),
    "probe.lr": (1e-3, "float", _pos),
    "probe.batch_size": (32, "int", _pos),
    "probe.resnet_width": (64, "int", _pos),
    "probe.test_fraction": (0.2, "float", lambda v: None if 0 < v < 1 else "must be in (0, 1)"),
    "eval.iou": (0.5, "float", lambda v: None if 0 < v <= 1 else "must be in (0, 1]"),
    "eval.min_size": (64, "int", _nonneg),
    "synth.T": (100, "int", _pos),
    "synth.H": (256, "int", _pos),
    "synth.W": (256, "int", _pos),
    "synth.n_blobs": (30, "int", _pos),
    "synth.sigma_range": ([3.0, 6.0], "pair[float]", lambda v: _ordered(v) or _all_pos(v)),
    "synth.amplitude_range": ([0.5, 1.0], "pair[float]", lambda v: _ordered(v) or _all_pos(v)),
    "synth.step_sigma": (1.0, "float", _pos),
    "synth.division_rate": (0.2, "float", _nonneg),
    "synth.separation_speed": (1.5, "float", _pos),
    "synth.division_duration": (10, "int", _pos),
    "synth.background": (0.1, "float", _pos),
    "synth.noise_sigma": (0.02, "float", _pos),
    "synth.seed": (0, "int", None),
    "synth.n_annotations": (50, "int", _pos),
    "ablation.seeds": ([0, 1, 2], "list[int]", None),
    "ablation.levels": ([0, 1, 2, 3, 4], "list[int]", lambda v: None if v and all(0 <= x <= 4 for x in v) else "levels must be in 0..4"),
    "ablation.threshold": (0.5, "float", _pos),
}


def defaults() -> dict:
    return {k: copy.deepcopy(v[0]) for k, v in SCHEMA.items()}


def flatten(doc: dict, prefix: str = "") -> dict:
    """Nested mappings to dotted keys; lists and scalars are leaves."""
    out = {}
    for k, v in (doc or {}).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in SCHEMA:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def nest(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


def _coerce(value, kind):
    """Return (value, error message or None)."""
    if kind.endswith("?"):
        if value is None:
            return None, None
        kind = kind[:-1]
    if kind == "bool":
        return (value, None) if isinstance(value, bool) else (value, "expected true/false")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            return value, f"expected an integer, got {value!r}"
        return value, None
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return value, f"expected a number, got {value!r}"
        return float(value), None
    if kind == "str":
        return (value, None) if isinstance(value, str) else (value, f"expected a string, got {value!r}")
    if kind.startswith(("list[", "pair[")):
        inner = kind[kind.index("[") + 1:-1]
        if not isinstance(value, (list, tuple)):
            value = [value] if kind.startswith("list") else value
        if not isinstance(value, (list, tuple)):
            return value, f"expected a list, got {value!r}"
        if kind.startswith("pair") and len(value) != 2:
            return value, f"expected two values, got {len(value)}"
        items = []
        for x in value:
            x, err = _coerce(x, inner)
            if err:
                return value, err
            items.append(x)
        return items, None
    raise AssertionError(kind)


def validate_config(document: Optional[dict]) -> dict:
    """Fill defaults and check every key; raises :class:`ConfigError` listing all problems."""
    flat = flatten(document or {})
    errors = []
    resolved = defaults()
    for key, value in flat.items():
        if key not in SCHEMA:
            hint = difflib.get_close_matches(key, SCHEMA, n=1, cutoff=0.6)
            errors.append(f"unknown key '{key}'" + (f" (did you mean '{hint[0]}'?)" if hint else ""))
            continue
        _, kind, check = SCHEMA[key]
        value, err = _coerce(value, kind)
        if err is None and check is not None and value is not None:
            err = check(value)
        if err:
            errors.append(f"{key}: {err}")
        else:
            resolved[key] = value
    if not errors:
        if resolved["train.min_lr"] > resolved["train.peak_lr"]:
            errors.append("train.min_lr: must not exceed train.peak_lr")
        if resolved["synth.division_duration"] >= resolved["synth.T"]:
            errors.append("synth.division_duration: must be < synth.T")
    if errors:
        raise ConfigError(errors)
    return resolved


def load_config(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: expected a key-value document"])
    return doc


def dump_config(resolved: dict) -> str:
    return yaml.safe_dump(nest(resolved), sort_keys=True, default_flow_style=None)


def build(resolved: dict) -> dict:
    """Module config objects from a resolved (validated) flat config."""
    r = resolved
    if r["augment.level"] is not None:
        base = augment_level(r["augment.level"], seed=r["train.seed"])
        flags = {t: getattr(base, t) for t in _TRANSFORMS}
    else:
        flags = {t: r[f"augment.{t}"] for t in _TRANSFORMS}
    augment = AugmentConfig(
        **flags,
        apply_probability=r["augment.apply_probability"],
        rotation_range=tuple(r["augment.rotation_range"]),
        scale_range=tuple(r["augment.scale_range"]),
        elastic_grid=r["augment.elastic_grid"],
        elastic_sigma=r["augment.elastic_sigma"],
        translate_fraction=r["augment.translate_fraction"],
        intensity_scale=tuple(r["augment.intensity_scale"]),
        intensity_shift=tuple(r["augment.intensity_shift"]),
        noise_sigma=tuple(r["augment.noise_sigma"]),
        seed=r["train.seed"],
    )
    return {
        "normalization": NormalizationConfig(tuple(r["input.normalization.percentiles"]),
                                             method=r["input.normalization.method"]),
        "split": SplitSpec(r["split.train_fraction"], r["split.policy"]),
        "sampler": SamplerConfig(tuple(r["sampler.patch"]), tuple(r["sampler.delta_t"]),
                                 samples_per_epoch=r["sampler.samples_per_epoch"], seed=r["sampler.seed"],
                                 margin=r["sampler.margin"]),
        "augment": augment,
        "extractor": ExtractorConfig(r["model.depth"], r["model.base_channels"], r["model.out_channels"],
                                     r["model.leaky_slope"]),
        "head": HeadConfig(r["head.kind"], tuple(r["head.hidden"]), plain_width=r["head.plain_width"]),
        "loss": LossConfig(r["loss.lambda"], r["loss.tau"], r["loss.normalize_channels"]),
        "train": TrainConfig(r["train.epochs"], r["train.batch_size"], r["train.peak_lr"], r["train.min_lr"],
                             r["train.cycle_epochs"], r["train.val_samples"], r["train.checkpoint_every"],
                             r["train.seed"], r["train.deterministic"], r["train.dtype"]),
        "synth": SynthConfig(r["synth.T"], r["synth.H"], r["synth.W"], r["synth.n_blobs"],
                             tuple(r["synth.sigma_range"]), tuple(r["synth.amplitude_range"]),
                             r["synth.step_sigma"], r["synth.division_rate"], r["synth.separation_speed"],
                             r["synth.division_duration"], r["synth.background"], r["synth.noise_sigma"],
                             seed=r["synth.seed"]),
    }
