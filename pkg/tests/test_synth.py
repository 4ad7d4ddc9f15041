import numpy as np
import pytest
from scipy import ndimage, stats
from sklearn.metrics import roc_auc_score

from timearrow.synth import (SynthConfig, ceiling_accuracy, event_montage, generate, make_probe_datasets,
                             read_annotations, read_events, region_annotations, write_synth)

# scipy.stats.poisson.interval(0.99, 20)
POISSON_99 = (10, 32)


def test_deterministic():
    a, b = generate(SynthConfig(seed=5)), generate(SynthConfig(seed=5))
    assert a.video.frames.tobytes() == b.video.frames.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert [(e.t, e.row, e.col) for e in a.events] == [(e.t, e.row, e.col) for e in b.events]
    c = generate(SynthConfig(seed=6))
    assert a.video.frames.tobytes() != c.video.frames.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_default_event_count_in_poisson_interval(seed):
    res = generate(SynthConfig(seed=seed))
    assert res.video.shape == (100, 256, 256)
    assert POISSON_99[0] <= len(res.events) <= POISSON_99[1]


def test_events_inside_video():
    cfg = SynthConfig(seed=1)
    res = generate(cfg)
    for ev in res.events:
        assert 0 <= ev.t and ev.t + ev.duration <= cfg.T
        assert np.all(ev.children >= 0) and np.all(ev.children[..., 0] <= cfg.H - 1)
        assert np.all(ev.children[..., 1] <= cfg.W - 1)
        masks = ev.child_masks((cfg.H, cfg.W), cfg.mask_radius)
        assert masks.shape == (ev.duration, cfg.H, cfg.W) and masks.any(axis=(1, 2)).all()
        assert np.all(res.masks[ev.t:ev.t + ev.duration][masks] == 1)


def _energy(frames):
    return (np.asarray(frames, dtype=np.float64) ** 2).sum(axis=(1, 2))


def test_zero_rate_is_time_symmetric():
    res = generate(SynthConfig(division_rate=0.0, seed=2))
    assert res.events == [] and not res.masks.any()
    d = np.diff(_energy(res.video.frames))
    # forward and reversed energy increments have the same law: mean indistinguishable from zero
    assert abs(d.mean()) < 3 * d.std() / np.sqrt(len(d))


def test_divisions_break_symmetry():
    res = generate(SynthConfig(seed=2))
    ev = res.events[0]
    e = _energy(res.video.frames)
    assert e[ev.t + ev.duration - 1] - e[ev.t - 1] != 0


def _n_peaks(img, thr=0.3):
    mx = ndimage.maximum_filter(img, size=5)
    return int(((img == mx) & (img > thr)).sum())


def test_single_division_reverses_to_merge():
    res = generate(SynthConfig(T=30, H=96, W=96, n_blobs=1, division_rate=0.05, seed=2))
    assert len(res.events) == 1
    ev = res.events[0]
    f = res.video.frames
    before, after = _n_peaks(f[ev.t - 1]), _n_peaks(f[ev.t + ev.duration - 1])
    assert (before, after) == (1, 2)
    rev = f[::-1]
    t_after_rev, t_before_rev = len(f) - ev.t - ev.duration, len(f) - ev.t
    assert _n_peaks(rev[t_after_rev]) == 2 and _n_peaks(rev[t_before_rev]) == 1  # merge when reversed
    m = event_montage(res)
    assert m.dtype == np.uint8 and m.shape[0] == 96
    tiles = m.shape[1] // 48
    top = [m[:48, 48 * i:48 * (i + 1)] for i in range(tiles)]
    bottom = [m[48:, 48 * i:48 * (i + 1)] for i in range(tiles)]
    assert all(np.array_equal(a, b) for a, b in zip(top, bottom[::-1]))


def test_asymmetry_certificate_auc():
    res = generate(SynthConfig(seed=0))
    f = res.video.frames
    anns = region_annotations(res, n_per_type=60, seed=0)
    half = 12

    def energy(a):
        t = min(a.t, len(f) - 2)
        r0, c0 = max(a.row - half, 0), max(a.col - half, 0)
        d = f[t + 1, r0:r0 + 2 * half, c0:c0 + 2 * half] - f[t, r0:r0 + 2 * half, c0:c0 + 2 * half]
        return float((d.astype(np.float64) ** 2).mean())

    ev = [energy(a) for a in anns if a.kind == "mitotic"]
    bg = [energy(a) for a in anns if a.kind == "background"]
    auc = roc_auc_score([1] * len(ev) + [0] * len(bg), ev + bg)
    assert auc > 0.9


def test_density_rejected():
    with pytest.raises(ValueError, match="density"):
        SynthConfig(n_blobs=400)
    with pytest.raises(ValueError):
        SynthConfig(division_duration=100)
    with pytest.raises(ValueError):
        SynthConfig(noise_sigma=0)


def test_probe_datasets_counts_and_masks():
    res = generate(SynthConfig(seed=0))
    events = res.events[:20]
    assert len(events) == 20
    data = make_probe_datasets(res.video, events, res.masks, crop=(2, 96, 96), negative_ratio=5, seed=0)
    assert data.crops.shape == (120, 2, 96, 96) and data.masks.shape == (120, 96, 96)
    assert (data.labels == 1).sum() == 20 and (data.labels == 0).sum() == 100
    assert all(data.masks[i].any() for i in np.flatnonzero(data.labels == 1))


def test_probe_datasets_need_events():
    res = generate(SynthConfig(division_rate=0.0, seed=1))
    with pytest.raises(ValueError, match="events"):
        make_probe_datasets(res.video, [], res.masks)


def test_write_and_read(tmp_path):
    res = generate(SynthConfig(T=30, H=96, W=96, n_blobs=1, division_rate=0.05, seed=2))
    paths = write_synth(res, tmp_path, n_annotations=5)
    assert all(p.exists() for p in paths.values())
    events = read_events(paths["events"])
    assert len(events) == len(res.events)
    anns = read_annotations(paths["annotations"])
    assert {a.kind for a in anns} <= {"background", "interphase", "mitotic"}


def test_ceiling_is_chance_without_events():
    res = generate(SynthConfig(T=30, H=96, W=96, n_blobs=3, division_rate=0.0, seed=2))
    assert ceiling_accuracy(res, (32, 32), n=200) == 0.5
    res = generate(SynthConfig(seed=0))
    c = ceiling_accuracy(res, (96, 96), n=2000)
    assert 0.5 < c < 0.85
