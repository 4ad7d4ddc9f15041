"""Command line entry point ``tap``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import difflib
import hashlib
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, build, dump_config, flatten, load_config, nest, validate_config

logger = logging.getLogger("timearrow")

COMMANDS = ("train", "attribute", "embed", "probe", "eval-seg", "synth", "ablate-head", "ablate-augment")


class UsageError(Exception):
    """Bad invocation or configuration; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        m = re.search(r"invalid choice: '([^']*)'", message)
        if m:
            hint = difflib.get_close_matches(m.group(1), COMMANDS, n=1)
            if hint:
                message += f"\ndid you mean '{hint[0]}'?"
        super().error(message)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    p.add_argument("--config", default=s, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=s, help="seed for sampling, training and generation")
    p.add_argument("--deterministic", action="store_true", default=s, help="bitwise reproducible run")
    p.add_argument("--out", default=s, help="output run directory (a .csv path for probe and eval-seg)")
    p.add_argument("--set", action="append", default=s, metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--augment-level", type=int, default=s, choices=range(5), help="augmentation preset 0..4")
    p.add_argument("--dry-run", action="store_true", default=s, help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=s)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="tap", parents=[common],
                     description="Self-supervised time arrow prediction for time-lapse microscopy.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", parents=[common], help="pretrain on videos")
    p.add_argument("paths", nargs="*", help="videos (TIFF stacks or frame directories)")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint-last in --out")

    p = sub.add_parser("attribute", parents=[common], help="Grad-CAM maps and top regions")
    p.add_argument("paths", nargs="*")
    p.add_argument("--checkpoint")

    p = sub.add_parser("embed", parents=[common], help="dense features for crops or videos")
    p.add_argument("paths", nargs="*", help="a .npy crop array (N, F, H, W) or videos")
    p.add_argument("--checkpoint")

    p = sub.add_parser("probe", parents=[common], help="train and score downstream probes")
    p.add_argument("--checkpoint")
    p.add_argument("--crops", help=".npy crops (N, F, H, W)")
    p.add_argument("--labels", help=".npy labels (N,) or masks (N, H, W)")

    p = sub.add_parser("eval-seg", parents=[common], help="instance F1 between predicted and true masks")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")

    sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark video")

    p = sub.add_parser("ablate-head", parents=[common], help="equivariant vs plain head")
    p.add_argument("paths", nargs="*")

    p = sub.add_parser("ablate-augment", parents=[common], help="cumulative augmentation levels")
    p.add_argument("paths", nargs="*")
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve(args) -> dict:
    """Config file, then ``--set`` overrides, then dedicated flags and positionals."""
    doc = load_config(args.config) if _opt(args, "config") else {}
    doc = nest({**flatten(doc), **_parse_set(_opt(args, "set"))})
    flat = flatten(doc)
    seed = _opt(args, "seed")
    if seed is not None:
        for key in ("train.seed", "sampler.seed", "synth.seed"):
            flat[key] = seed
    if _opt(args, "deterministic"):
        flat["train.deterministic"] = True
    if _opt(args, "augment_level") is not None:
        flat["augment.level"] = args.augment_level
    paths = _opt(args, "paths")
    if paths:
        flat["input.paths"] = [str(Path(p).resolve()) for p in paths]
    for name, key in (("checkpoint", "input.checkpoint"), ("crops", "input.crops"), ("labels", "input.labels")):
        if _opt(args, name):
            flat[key] = str(Path(getattr(args, name)).resolve())
    return validate_config(nest(flat))


def _require(resolved, key):
    value = resolved[key]
    if value in (None, [], ""):
        raise UsageError(f"missing required config key '{key}'")
    return value


# run directory


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """Output location; ``--out`` may be a directory or, for table-only commands, a ``.csv`` path."""

    def __init__(self, out, command, metrics_file: bool = False):
        out = Path(out if out is not None else f"runs/{command}")
        if metrics_file and out.suffix == ".csv":
            self.root, self.metrics, prefix = out.parent, out, out.stem + "."
        else:
            self.root, self.metrics, prefix = out, out / "metrics.csv", ""
        self.config_path = self.root / f"{prefix}config.resolved.yaml"
        self.manifest_path = self.root / f"{prefix}manifest.json"
        self.root.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []

    def add(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def add_tree(self, directory):
        self.add(*sorted(p for p in Path(directory).rglob("*") if p.is_file() and not p.name.endswith(".tmp")))

    def write_manifest(self, command, resolved, started):
        files = []
        for p in sorted(set(self.outputs) | {self.config_path}):
            if p.exists():
                files.append({"path": str(p.relative_to(self.root)) if p.is_relative_to(self.root) else str(p),
                              "sha256": _sha256(p), "bytes": p.stat().st_size})
        manifest = {"command": command, "version": __version__, "seed": resolved["train.seed"],
                    "deterministic": resolved["train.deterministic"], "started": started, "finished": _now(),
                    "config": nest(resolved), "outputs": files}
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest


def write_rows(path, rows: list[dict]):
    keys: list = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([_fmt(r.get(k, "")) for k in keys])
    return Path(path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.8g}"
    return v


# commands


def _load_videos(resolved):
    from .video_io import load_video
    cfgs = build(resolved)
    return [load_video(p, cfgs["normalization"]) for p in _require(resolved, "input.paths")]


def _augment(cfgs):
    return cfgs["augment"] if cfgs["augment"].enabled else None


def _annotations(resolved):
    from .synth import read_annotations
    path = resolved["input.annotations"]
    return read_annotations(path) if path else None


def _region_rows(model, videos, anns, sampler_cfg, prefix=()):
    from .sampler import region_type_dataset
    from .trainer import evaluate_accuracy
    res = evaluate_accuracy(model, region_type_dataset(videos, anns, sampler_cfg))
    rows = [{**dict(prefix), "region": "all", "accuracy": res["accuracy"], "n": res["n"]}]
    for region, r in res.get("by_region", {}).items():
        rows.append({**dict(prefix), "region": region, "accuracy": r["accuracy"], "n": r["n"]})
    return rows


def cmd_train(args, resolved, run: RunDir):
    from .trainer import fit
    videos = _load_videos(resolved)
    cfgs = build(resolved)
    model, log = fit(videos, cfgs["sampler"], _augment(cfgs), cfgs["extractor"], cfgs["head"], cfgs["loss"],
                     cfgs["train"], cfgs["split"], out_dir=run.root, resume=_opt(args, "resume", False),
                     normalization=cfgs["normalization"])
    last = log.records[-1]
    rows = [{"epoch": last["epoch"], "region": "validation", "accuracy": last["val_acc"],
             "loss": last["val_loss"]}]
    anns = _annotations(resolved)
    if anns:
        rows += _region_rows(model, videos, anns, cfgs["sampler"])
    run.add(write_rows(run.metrics, rows))
    run.add_tree(run.root)


def _checkpoint(resolved):
    from .models import load_checkpoint
    return load_checkpoint(_require(resolved, "input.checkpoint"))


def cmd_attribute(args, resolved, run: RunDir):
    from .attribution import attribute_video, export_overlay
    model, _ = _checkpoint(resolved)
    videos = _load_videos(resolved)
    a = resolved
    rows = []
    for i, v in enumerate(videos):
        maps = attribute_video(model, v.frames, a["attribution.delta_t"], a["attribution.tile"],
                               a["attribution.overlap"], video=i)
        sub = run.root / "attribution" / (f"video{i}" if len(videos) > 1 else "")
        export_overlay(v.frames, maps, sub, a["attribution.topk"], a["attribution.radius"])
        rows += [{"video": i, "t": m.source[1], "max": float(m.values.max()), "mean": float(m.values.mean()),
                  "logit_forward": float(m.logits[0]), "logit_backward": float(m.logits[1])} for m in maps]
    run.add(write_rows(run.metrics, rows))
    run.add_tree(run.root / "attribution")


def cmd_embed(args, resolved, run: RunDir):
    from .downstream.probes import embed
    model, _ = _checkpoint(resolved)
    paths = resolved["input.paths"]
    crops = resolved["input.crops"]
    if crops is None and len(paths) == 1 and paths[0].endswith(".npy"):
        crops = paths[0]
    if crops is not None:
        feats = embed(model, np.load(crops))
        np.save(run.root / "features.npy", feats)
        run.add(run.root / "features.npy")
        shape = [{"name": "features", "shape": "x".join(map(str, feats.shape))}]
    else:
        shape = []
        for i, v in enumerate(_load_videos(resolved)):
            feats = embed(model, v.frames[:, None])
            out = run.root / f"features_video{i}.npy"
            np.save(out, feats)
            run.add(out)
            shape.append({"name": out.stem, "shape": "x".join(map(str, feats.shape))})
    run.add(write_rows(run.metrics, shape))


def _split_indices(labels, test_fraction, seed):
    from sklearn.model_selection import train_test_split
    idx = np.arange(len(labels))
    strat = labels if labels.ndim == 1 else None
    return train_test_split(idx, test_size=test_fraction, random_state=seed, stratify=strat)


def cmd_probe(args, resolved, run: RunDir):
    from .downstream.probes import ProbeSpec, dense_probe, label_budget_sweep, nested_budget_indices
    r = resolved
    x = np.load(_require(r, "input.crops"))
    y = np.load(_require(r, "input.labels"))
    mode = r["probe.mode"]
    model = _checkpoint(r)[0] if mode != "baseline" else None
    spec = ProbeSpec(mode, epochs=r["probe.epochs"], lr=r["probe.lr"], batch_size=r["probe.batch_size"],
                     resnet_width=r["probe.resnet_width"])
    seed = r["train.seed"]
    tr, te = _split_indices(y, r["probe.test_fraction"], seed)
    seeds = list(range(seed, seed + r["probe.seeds"]))
    if r["probe.task"] == "classify":
        rows = label_budget_sweep(spec, [mode], r["probe.budgets"], seeds, x[tr], y[tr], x[te], y[te], model)
    else:
        rows = []
        for s in seeds:
            subsets = nested_budget_indices(np.asarray([m.any() for m in y[tr]], dtype=int), r["probe.budgets"], s)
            for budget, idx in zip(r["probe.budgets"], subsets):
                _, m = dense_probe(replace(spec, label_budget=budget), x[tr][idx], y[tr][idx], model, s,
                                   x[te], y[te], r["eval.iou"], r["eval.min_size"])
                rows.append({"budget": budget, **m})
    run.add(write_rows(run.metrics, rows))


_IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".npy")


def _read_mask(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix in (".tif", ".tiff"):
        import tifffile
        return tifffile.imread(path)
    from PIL import Image
    return np.asarray(Image.open(path))


def _as_instances(mask, min_size=0):
    from .downstream.metrics import connected_components, remove_small_objects
    mask = np.asarray(mask)
    labels = connected_components(mask > 0) if mask.max(initial=0) <= 1 or mask.dtype == bool else mask
    return remove_small_objects(labels, min_size) if min_size else labels


def cmd_eval_seg(args, resolved, run: RunDir):
    from .downstream.metrics import match_and_score
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    names = sorted(p.name for p in gt_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"no prediction for {len(missing)} ground truth file(s), e.g. {missing[0]}")
    if not names:
        raise FileNotFoundError(f"no mask files in {gt_dir}")
    rows, m, p, g = [], 0, 0, 0
    for n in names:
        pred = _as_instances(_read_mask(pred_dir / n), resolved["eval.min_size"])
        gt = _as_instances(_read_mask(gt_dir / n))
        res = match_and_score(pred, gt, resolved["eval.iou"])
        rows.append({"file": n, "n_pred": res.n_pred, "n_gt": res.n_gt, "n_matched": res.n_matched,
                     "precision": res.precision, "recall": res.recall, "f1": res.f1})
        m, p, g = m + res.n_matched, p + res.n_pred, g + res.n_gt
    rows.append({"file": "ALL", "n_pred": p, "n_gt": g, "n_matched": m,
                 "f1": 1.0 if p + g == 0 else 2 * m / (p + g)})
    run.add(write_rows(run.metrics, rows))


def cmd_synth(args, resolved, run: RunDir):
    from .synth import generate, write_synth
    result = generate(build(resolved)["synth"])
    paths = write_synth(result, run.root, resolved["synth.n_annotations"])
    run.add(*paths.values())
    run.add(write_rows(run.metrics, [{"events": len(result.events), "frames": result.video.shape[0],
                                      "height": result.video.shape[1], "width": result.video.shape[2]}]))


def _synth_or_inputs(resolved):
    """Input videos and annotations, or a generated benchmark video when no input is configured."""
    if resolved["input.paths"]:
        return _load_videos(resolved), _annotations(resolved)
    from .synth import generate, region_annotations
    result = generate(build(resolved)["synth"])
    return [result.video], region_annotations(result, resolved["synth.n_annotations"], seed=resolved["synth.seed"])


def cmd_ablate_head(args, resolved, run: RunDir):
    from .trainer import head_ablation
    videos, _ = _synth_or_inputs(resolved)
    cfgs = build(resolved)
    thr = resolved["ablation.threshold"]
    logs = head_ablation(videos, resolved["ablation.seeds"], ("equivariant", "plain"), out_dir=run.root,
                         sampler_cfg=cfgs["sampler"], augment_cfg=_augment(cfgs), head_cfg=cfgs["head"],
                         train_cfg=cfgs["train"], extractor_cfg=cfgs["extractor"], loss_cfg=cfgs["loss"],
                         split=cfgs["split"], normalization=cfgs["normalization"])
    rows = []
    for (head, seed), log in logs.items():
        reached = log.epochs_to(thr)
        rows.append({"head": head, "seed": seed, "epochs_to_threshold": "" if reached is None else reached,
                     "final_val_loss": log.records[-1]["val_loss"], "final_val_acc": log.records[-1]["val_acc"]})
    run.add(write_rows(run.metrics, rows))
    run.add_tree(run.root)


def cmd_ablate_augment(args, resolved, run: RunDir):
    from .augment import augment_level
    from .trainer import fit
    videos, anns = _synth_or_inputs(resolved)
    cfgs = build(resolved)
    rows = []
    for seed in resolved["ablation.seeds"]:
        for level in resolved["ablation.levels"]:
            aug = augment_level(level, seed=seed)
            model, log = fit(videos, replace(cfgs["sampler"], seed=seed), aug if aug.enabled else None,
                             cfgs["extractor"], cfgs["head"], cfgs["loss"], replace(cfgs["train"], seed=seed),
                             cfgs["split"], out_dir=run.root / f"level{level}_seed{seed}",
                             normalization=cfgs["normalization"])
            prefix = {"level": level, "seed": seed}
            rows.append({**prefix, "region": "validation", "accuracy": log.records[-1]["val_acc"],
                         "n": resolved["train.val_samples"]})
            if anns:
                rows += _region_rows(model, videos, anns, cfgs["sampler"], prefix.items())
    run.add(write_rows(run.metrics, rows))
    run.add_tree(run.root)


HANDLERS = {
    "train": cmd_train, "attribute": cmd_attribute, "embed": cmd_embed, "probe": cmd_probe,
    "eval-seg": cmd_eval_seg, "synth": cmd_synth, "ablate-head": cmd_ablate_head,
    "ablate-augment": cmd_ablate_augment,
}


def _preflight(command, resolved):
    """Fail fast with exit code 2 on configuration problems that need no computation."""
    try:
        cfgs = build(resolved)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if command in ("train", "attribute"):
        _require(resolved, "input.paths")
    if command in ("attribute", "embed"):
        _require(resolved, "input.checkpoint")
    if command == "embed" and not resolved["input.paths"] and not resolved["input.crops"]:
        raise UsageError("missing required config key 'input.paths' (or 'input.crops')")
    if command == "probe":
        _require(resolved, "input.crops")
        _require(resolved, "input.labels")
        if resolved["probe.mode"] != "baseline":
            _require(resolved, "input.checkpoint")
    return cfgs


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if _opt(args, "verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        resolved = resolve(args)
        _preflight(command, resolved)
    except (ConfigError, UsageError) as e:
        print(f"tap {command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as e:
        print(f"tap {command}: cannot read configuration: {e}", file=sys.stderr)
        return 2
    if _opt(args, "dry_run"):
        sys.stdout.write(dump_config(resolved))
        return 0

    started = _now()
    try:
        run = RunDir(_opt(args, "out"), command, metrics_file=command in ("probe", "eval-seg"))
        run.config_path.write_text(dump_config(resolved))
        HANDLERS[command](args, resolved, run)
        run.write_manifest(command, resolved, started)
    except UsageError as e:
        print(f"tap {command}: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 1
        logger.debug("failure", exc_info=True)
        print(f"tap {command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"tap {command}: wrote {run.manifest_path}")
    return 0


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
