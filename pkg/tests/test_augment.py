import numpy as np
import pytest
from hypothesis import given, strategies as st

from timearrow.augment import (_TRANSFORMS, AugmentConfig, augment_level, augment_pair,
                               augmentation_ablation_suite, rotate)
from timearrow.sampler import PatchPair

JOINT = ("flip", "rotate", "scale", "elastic", "intensity_joint")


def _pair(h=20, w=20, m=4, same=False, seed=0, label=0):
    rng = np.random.default_rng(seed)
    a = rng.random((h + 2 * m, w + 2 * m), dtype=np.float32)
    b = a.copy() if same else rng.random((h + 2 * m, w + 2 * m), dtype=np.float32)
    return PatchPair(a, b, label, (0, 0, 1, 0, 0), m)


def test_disabled_is_centre_crop():
    p = _pair()
    out = augment_pair(p, AugmentConfig.none(), 5)
    assert np.array_equal(out.x1, p.x1[4:-4, 4:-4]) and np.array_equal(out.x2, p.x2[4:-4, 4:-4])
    assert out.margin == 0


def test_joint_only_keeps_identical_inputs_identical():
    cfg = AugmentConfig(**{t: t in JOINT for t in _TRANSFORMS}, apply_probability=1.0)
    for i in range(20):
        out = augment_pair(_pair(same=True, seed=i), cfg, i)
        assert np.array_equal(out.x1, out.x2)


def test_right_angle_rotation_matches_index_permutation():
    img = np.arange(12 * 12, dtype=np.float32).reshape(12, 12)
    img[0, :3] = 1000  # break symmetry
    assert np.array_equal(rotate(img, 90), np.rot90(img, 1))
    assert np.array_equal(rotate(img, 180), np.rot90(img, 2))
    assert np.array_equal(rotate(img, 270), np.rot90(img, 3))
    cfg = AugmentConfig(**{t: t == "rotate" for t in _TRANSFORMS}, rotation_range=(90.0, 90.0),
                        apply_probability=1.0)
    p = PatchPair(img, img[::-1].copy(), 1, (0, 0, 1, 0, 0), 0)
    out = augment_pair(p, cfg, 0)
    assert np.array_equal(out.x1, np.rot90(img)) and np.array_equal(out.x2, np.rot90(img[::-1]))


def test_rotation_non_square_falls_back_to_interpolation():
    p = _pair(h=10, w=16, m=0)
    cfg = AugmentConfig(**{t: t == "rotate" for t in _TRANSFORMS}, rotation_range=(90.0, 90.0),
                        apply_probability=1.0)
    out = augment_pair(p, cfg, 0)
    assert out.x1.shape == (10, 16) and np.all(np.isfinite(out.x1))


configs = st.builds(
    lambda flags, p, seed: AugmentConfig(**dict(zip(_TRANSFORMS, flags)), apply_probability=p, seed=seed),
    st.lists(st.booleans(), min_size=len(_TRANSFORMS), max_size=len(_TRANSFORMS)),
    st.floats(0, 1), st.integers(0, 100))


@given(configs, st.integers(0, 1), st.integers(0, 1000))
def test_label_invariance_and_determinism(cfg, label, index):
    p = _pair(label=label, seed=index % 7)
    a, b = augment_pair(p, cfg, index), augment_pair(p, cfg, index)
    assert a.label == label
    assert a.x1.tobytes() == b.x1.tobytes() and a.x2.tobytes() == b.x2.tobytes()
    assert a.x1.shape == (20, 20)


@given(st.lists(st.booleans(), min_size=len(JOINT), max_size=len(JOINT)), st.integers(0, 1000))
def test_joint_equality_property(flags, index):
    cfg = AugmentConfig(**{t: dict(zip(JOINT, flags)).get(t, False) for t in _TRANSFORMS},
                        apply_probability=1.0, seed=index)
    out = augment_pair(_pair(same=True, seed=index), cfg, index)
    assert np.max(np.abs(out.x1 - out.x2)) <= 1e-6


def test_independent_translation_shifts_within_margin():
    cfg = AugmentConfig(**{t: t == "translate" for t in _TRANSFORMS}, apply_probability=1.0,
                        translate_fraction=0.2)
    p = _pair(h=20, w=20, m=4, same=True)
    differing = 0
    for i in range(30):
        out = augment_pair(p, cfg, i)
        found = [(dy, dx) for dy in range(-4, 5) for dx in range(-4, 5)
                 if np.array_equal(out.x1, p.x1[4 + dy:24 + dy, 4 + dx:24 + dx])]
        assert found
        differing += not np.array_equal(out.x1, out.x2)
    assert differing > 20


def test_translation_exceeding_margin_rejected():
    cfg = AugmentConfig(**{t: t == "translate" for t in _TRANSFORMS}, translate_fraction=0.5)
    with pytest.raises(ValueError, match="margin"):
        augment_pair(_pair(m=2), cfg, 0)


def test_noise_and_intensity_change_values_but_not_shape():
    cfg = AugmentConfig(**{t: t in ("noise", "intensity_independent") for t in _TRANSFORMS}, apply_probability=1.0,
                        noise_sigma=(0.05, 0.05))
    p = _pair(same=True)
    out = augment_pair(p, cfg, 1)
    assert not np.array_equal(out.x1, out.x2)
    resid = out.x1 - out.x2
    assert 0.01 < resid.std() < 1.0


def test_ablation_suite_validation():
    levels = [AugmentConfig.none(), augment_level(1), augment_level(4)]
    assert len(augmentation_ablation_suite(levels)) == 3
    with pytest.raises(ValueError, match="duplicate"):
        augmentation_ablation_suite([augment_level(1), augment_level(1)])
    with pytest.raises(ValueError):
        augmentation_ablation_suite([augment_level(4), augment_level(1)])
    with pytest.raises(ValueError):
        augmentation_ablation_suite([])


def test_levels_are_cumulative():
    sets = [augment_level(i).enabled for i in range(5)]
    assert sets[0] == frozenset() and sets[4] == frozenset(_TRANSFORMS)
    assert all(a < b for a, b in zip(sets, sets[1:]))
    with pytest.raises(ValueError):
        augment_level(5)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(apply_probability=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(rotation_range=(10.0, 0.0))
