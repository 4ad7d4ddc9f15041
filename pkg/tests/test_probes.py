import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from timearrow.downstream.probes import (LinearProbe, ProbeSpec, budget_size, dense_probe, embed,
                                         label_budget_sweep, nested_budget_indices, train_probe)
from timearrow.models import ExtractorConfig, HeadConfig, TimeArrowNet


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = TimeArrowNet(ExtractorConfig(1, 4, 4), HeadConfig(hidden=(8, 8)))
    # calibrate batch-norm statistics so the untrained extractor responds to the toy inputs
    model.train()
    with torch.no_grad():
        x, _ = _toy(40, seed=9)
        model.extractor.apply(lambda m: setattr(m, "momentum", None) if isinstance(m, torch.nn.BatchNorm2d) else None)
        model.extractor(torch.as_tensor(x.reshape(-1, 1, 16, 16)))
    return model.eval()


def _toy(n=20, size=16, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.1 * rng.standard_normal((n, 2, size, size)) + y[:, None, None, None]
    return x.astype(np.float32), y


@pytest.mark.parametrize("crop,expected", [((2, 96, 96), 64), ((5, 192, 192), 160)])
def test_default_feature_sizes(crop, expected):
    torch.manual_seed(0)
    model = TimeArrowNet()
    feats = embed(model, np.zeros((1, *crop), dtype=np.float32))
    assert feats.shape == (1, expected, *crop[1:])
    assert LinearProbe(expected, 2).fc.weight.numel() + 2 == expected * 2 + 2


def test_linear_probe_parameter_count():
    assert sum(p.numel() for p in LinearProbe(64, 2).parameters()) == 130


def test_single_frame_images_accepted(tiny):
    assert embed(tiny, np.zeros((3, 16, 16))).shape == (3, 4, 16, 16)


@pytest.mark.parametrize("mode", ["linear", "fixed", "finetune", "baseline"])
def test_separable_toy_is_fit(tiny, mode):
    x, y = _toy()
    spec = ProbeSpec(mode, epochs=60, lr=1e-2, batch_size=10, resnet_width=8)
    probe, metrics = train_probe(spec, x, y, tiny, seed=0, test_images=x, test_labels=y)
    assert metrics["train_accuracy"] == 1.0 and metrics["accuracy"] == 1.0
    assert np.array_equal(probe.predict(x), y)


def test_probe_is_deterministic(tiny):
    x, y = _toy()
    spec = ProbeSpec("fixed", epochs=3, resnet_width=8)
    a, _ = train_probe(spec, x, y, tiny, seed=4)
    b, _ = train_probe(spec, x, y, tiny, seed=4)
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))


def test_checkpoint_required(tiny):
    x, y = _toy()
    with pytest.raises(ValueError, match="checkpoint"):
        train_probe(ProbeSpec("linear"), x, y, None)
    with pytest.raises(ValueError, match="single class"):
        train_probe(ProbeSpec("linear"), x, np.zeros(len(x)), tiny)


def test_mode_aliases():
    assert ProbeSpec("small_classifier_on_fixed").mode == "fixed"
    assert ProbeSpec("supervised_baseline").input == "raw_images"
    with pytest.raises(ValueError):
        ProbeSpec("knn")


def test_budget_sizes():
    assert budget_size(0.1, 200) == 20
    assert budget_size(1.0, 200) == 200
    assert budget_size(50, 200) == 50
    with pytest.raises(ValueError):
        budget_size(500, 200)


@given(st.integers(0, 1000), st.integers(30, 200))
def test_budget_subsets_nested_and_stratified(seed, n):
    labels = np.random.default_rng(seed).integers(0, 2, n)
    labels[:2] = [0, 1]
    subsets = nested_budget_indices(labels, [0.1, 0.3, 1.0], seed)
    for small, big in zip(subsets, subsets[1:]):
        assert set(small) <= set(big)
    assert len(subsets[-1]) == n
    for s in subsets:
        assert set(labels[s]) == {0, 1}


def test_unsorted_budgets_rejected():
    with pytest.raises(ValueError):
        nested_budget_indices(np.arange(20) % 2, [0.5, 0.1])


def test_sweep_rows(tiny):
    x, y = _toy(40)
    xt, yt = _toy(20, seed=1)
    rows = label_budget_sweep(ProbeSpec(epochs=2, resnet_width=8), ["linear", "baseline"], [10, 20], [0, 1, 2],
                              x, y, xt, yt, tiny)
    assert len(rows) == 12
    assert {(r["budget"], r["mode"], r["seed"]) for r in rows} == {
        (b, m, s) for b in (10, 20) for m in ("linear", "baseline") for s in range(3)}
    assert all(r["n_train"] == r["budget"] for r in rows)
    assert all(0 <= r["accuracy"] <= 1 for r in rows)


def test_dense_probe_segments_bright_squares(tiny):
    rng = np.random.default_rng(0)
    masks = np.zeros((8, 32, 32), dtype=np.uint8)
    for m in masks:
        r, c = rng.integers(2, 20, 2)
        m[r:r + 10, c:c + 10] = 1
    x = (masks[:, None].astype(np.float32) + 0.05 * rng.standard_normal((8, 1, 32, 32))).astype(np.float32)
    spec = ProbeSpec("baseline", epochs=80, lr=1e-2, batch_size=8, unet_width=4, unet_depth=1)
    probe, metrics = dense_probe(spec, x, masks, tiny, test_images=x, test_masks=masks, min_size=20)
    assert metrics["f1"] >= 0.9
    assert probe.predict_proba(x).shape == (8, 32, 32)


def test_dense_probe_validation(tiny):
    with pytest.raises(ValueError, match="align"):
        dense_probe(ProbeSpec("baseline"), np.zeros((2, 8, 8)), np.zeros((3, 8, 8)))
    with pytest.raises(ValueError, match="empty"):
        dense_probe(ProbeSpec("baseline"), np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
