import csv
import hashlib
import json

import numpy as np
import pytest
import tifffile
import yaml

from timearrow import cli
from timearrow.config import ConfigError, build, defaults, dump_config, validate_config

SMALL = {
    "synth": {"T": 30, "H": 96, "W": 96, "n_blobs": 1, "division_rate": 0.05, "seed": 2, "n_annotations": 4},
    "model": {"depth": 1, "base_channels": 4, "out_channels": 4},
    "head": {"hidden": [8, 8]},
    "sampler": {"patch": [32, 32], "samples_per_epoch": 16},
    "train": {"epochs": 2, "batch_size": 8, "val_samples": 8},
    "augment": {"level": 0},
    "probe": {"epochs": 2, "resnet_width": 8, "budgets": [4, 8], "seeds": 2},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


@pytest.fixture
def synth_video(tmp_path, small_config):
    assert cli.dispatch(["synth", "--config", str(small_config), "--out", str(tmp_path / "synth")]) == 0
    return tmp_path / "synth"


def test_defaults_resolve():
    r = validate_config({})
    assert r == defaults()
    assert r["loss.lambda"] == 0.01 and r["loss.tau"] == 0.2 and r["sampler.patch"] == [96, 96]
    cfgs = build(r)
    assert cfgs["train"].peak_lr == 4e-4 and cfgs["extractor"].depth == 3


def test_validation_reports_every_error():
    with pytest.raises(ConfigError) as e:
        validate_config({"loss": {"tau": -1}, "los": {"lambda": 1}, "train": {"epochs": "x"}})
    msg = str(e.value)
    assert "tau must be > 0" in msg and "did you mean 'loss.lambda'" in msg and "train.epochs" in msg
    assert len(e.value.errors) == 3


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="min_lr"):
        validate_config({"train": {"peak_lr": 1e-5, "min_lr": 1e-4}})


def test_dump_round_trip():
    r = validate_config({"sampler": {"delta_t": [1, 2]}})
    assert validate_config(yaml.safe_load(dump_config(r))) == r


def test_help_and_version(capsys):
    assert cli.dispatch(["--help"]) == 0
    assert "train" in capsys.readouterr().out
    assert cli.dispatch(["--version"]) == 0


def test_unknown_subcommand_suggests(capsys):
    assert cli.dispatch(["trian"]) == 2
    assert "did you mean 'train'" in capsys.readouterr().err


def test_train_without_inputs(capsys, tmp_path):
    assert cli.dispatch(["train", "--out", str(tmp_path / "r")]) == 2
    assert "input.paths" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_invalid_value_exits_2(capsys):
    assert cli.dispatch(["synth", "--set", "loss.tau=-1", "--dry-run"]) == 2
    assert "tau must be > 0" in capsys.readouterr().err
    assert cli.dispatch(["synth", "--set", "los.lambda=0", "--dry-run"]) == 2
    assert "loss.lambda" in capsys.readouterr().err
    assert cli.dispatch(["synth", "--set", "novalue", "--dry-run"]) == 2


def test_dry_run_precedence(capsys, tmp_path, small_config):
    out = tmp_path / "never"
    assert cli.dispatch(["train", "in.tif", "--config", str(small_config), "--set", "train.epochs=7",
                         "--seed", "5", "--augment-level", "3", "--deterministic", "--dry-run",
                         "--out", str(out)]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["train"]["epochs"] == 7 and doc["train"]["batch_size"] == 8
    assert doc["train"]["seed"] == doc["sampler"]["seed"] == doc["synth"]["seed"] == 5
    assert doc["augment"]["level"] == 3 and doc["train"]["deterministic"] is True
    assert doc["input"]["paths"][0].endswith("in.tif")
    assert not out.exists()


def _manifest_ok(root, name="manifest.json"):
    manifest = json.loads((root / name).read_text())
    for f in manifest["outputs"]:
        data = (root / f["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == f["sha256"] and len(data) == f["bytes"]
    return manifest


def test_synth_command(synth_video):
    root = synth_video
    assert tifffile.imread(root / "video.tif").shape == (30, 96, 96)
    manifest = _manifest_ok(root)
    assert {f["path"] for f in manifest["outputs"]} >= {"video.tif", "masks.tif", "events.csv", "metrics.csv",
                                                        "config.resolved.yaml"}
    with open(root / "metrics.csv") as fh:
        assert next(csv.DictReader(fh))["events"] == "1"


def test_train_attribute_embed(tmp_path, small_config, synth_video):
    video = str(synth_video / "video.tif")
    run = tmp_path / "train"
    assert cli.dispatch(["train", video, "--config", str(small_config), "--out", str(run),
                         "--set", f"input.annotations={synth_video / 'annotations.csv'}"]) == 0
    assert (run / "checkpoint-last").exists() and (run / "log.csv").exists()
    with open(run / "metrics.csv") as fh:
        regions = {r["region"] for r in csv.DictReader(fh)}
    assert {"validation", "all", "mitotic"} <= regions
    _manifest_ok(run)

    att = tmp_path / "att"
    assert cli.dispatch(["attribute", video, "--checkpoint", str(run / "checkpoint-best"), "--config",
                         str(small_config), "--out", str(att)]) == 0
    assert tifffile.imread(att / "attribution" / "attribution_raw.tif").shape == (30, 96, 96)
    _manifest_ok(att)

    crops = tmp_path / "crops.npy"
    np.save(crops, np.zeros((3, 2, 32, 32), dtype=np.float32))
    emb = tmp_path / "emb"
    assert cli.dispatch(["embed", str(crops), "--checkpoint", str(run / "checkpoint-best"), "--out", str(emb)]) == 0
    assert np.load(emb / "features.npy").shape == (3, 8, 32, 32)

    # resume continues the schedule in place
    assert cli.dispatch(["train", video, "--config", str(small_config), "--out", str(run), "--resume",
                         "--set", "train.epochs=3"]) == 0
    with open(run / "log.csv") as fh:
        assert [int(r["epoch"]) for r in csv.DictReader(fh)] == [1, 2, 3]


def test_attribute_needs_checkpoint(capsys, synth_video):
    assert cli.dispatch(["attribute", str(synth_video / "video.tif"), "--dry-run"]) == 2
    assert "input.checkpoint" in capsys.readouterr().err


def test_missing_file_exits_1(capsys, tmp_path, small_config):
    assert cli.dispatch(["train", str(tmp_path / "nope.tif"), "--config", str(small_config),
                         "--out", str(tmp_path / "r")]) == 1
    assert "error" in capsys.readouterr().err


def test_probe_to_csv_path(tmp_path, small_config):
    rng = np.random.default_rng(0)
    y = np.arange(30) % 2
    x = (rng.standard_normal((30, 2, 16, 16)) + y[:, None, None, None]).astype(np.float32)
    np.save(tmp_path / "x.npy", x)
    np.save(tmp_path / "y.npy", y)
    out = tmp_path / "res" / "baseline.csv"
    assert cli.dispatch(["probe", "--crops", str(tmp_path / "x.npy"), "--labels", str(tmp_path / "y.npy"),
                         "--config", str(small_config), "--set", "probe.mode=baseline", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["mode"] for r in rows} == {"baseline"}
    _manifest_ok(out.parent, "baseline.manifest.json")
    assert (out.parent / "baseline.config.resolved.yaml").exists()


def test_eval_seg(tmp_path):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    m = np.zeros((32, 32), dtype=np.uint16)
    m[2:12, 2:12] = 1
    m[20:30, 20:30] = 2
    p = m.copy()
    p[20:30, 20:30] = 0
    tifffile.imwrite(gt / "a.tif", m)
    tifffile.imwrite(pred / "a.tif", p)
    np.save(gt / "b.npy", m)
    np.save(pred / "b.npy", m)
    assert cli.dispatch(["eval-seg", str(pred), str(gt), "--set", "eval.min_size=0",
                         "--out", str(tmp_path / "seg.csv")]) == 0
    with open(tmp_path / "seg.csv") as fh:
        rows = {r["file"]: r for r in csv.DictReader(fh)}
    assert float(rows["a.tif"]["f1"]) == pytest.approx(2 / 3)
    assert float(rows["b.npy"]["f1"]) == 1.0
    assert float(rows["ALL"]["f1"]) == pytest.approx(2 * 3 / 7)


def test_eval_seg_missing_prediction(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    np.save(tmp_path / "g" / "x.npy", np.ones((4, 4)))
    assert cli.dispatch(["eval-seg", str(tmp_path / "p"), str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == 1


def test_rerun_from_resolved_config(tmp_path, small_config, synth_video):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["train", str(synth_video / "video.tif"), "--config", str(small_config), "--deterministic"]
    assert cli.dispatch(argv + ["--out", str(a)]) == 0
    assert cli.dispatch(["train", "--config", str(a / "config.resolved.yaml"), "--out", str(b)]) == 0
    assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "config.resolved.yaml").read_bytes() == (b / "config.resolved.yaml").read_bytes()


def test_ablate_head_on_generated_video(tmp_path, small_config):
    out = tmp_path / "abl"
    assert cli.dispatch(["ablate-head", "--config", str(small_config), "--set", "ablation.seeds=[0]",
                         "--set", "train.epochs=1", "--out", str(out)]) == 0
    with open(out / "metrics.csv") as fh:
        assert {r["head"] for r in csv.DictReader(fh)} == {"equivariant", "plain"}


def test_ablate_augment_on_generated_video(tmp_path, small_config):
    out = tmp_path / "aug"
    assert cli.dispatch(["ablate-augment", "--config", str(small_config), "--set", "ablation.seeds=[0]",
                         "--set", "ablation.levels=[0,4]", "--set", "train.epochs=1", "--out", str(out)]) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["level"] for r in rows} == {"0", "4"}
    assert {"validation", "mitotic"} <= {r["region"] for r in rows}


def test_console_script():
    import shutil
    import subprocess
    import sys
    exe = shutil.which("tap")
    cmd = [exe] if exe else [sys.executable, "-m", "timearrow.cli"]
    res = subprocess.run(cmd + ["synth", "--set", "synth.T=0", "--dry-run"], capture_output=True, text=True)
    assert res.returncode == 2 and "synth.T" in res.stderr
