import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ap_threshold_sweep, brute_force_matching, flood_fill_labels, random_labels, same_partition
from timearrow.downstream.metrics import (average_precision, connected_components, instances_from_probability,
                                          iou_matrix, match_and_score, remove_small_objects)


def test_diagonal_connectivity():
    m = np.array([[1, 0], [0, 1]])
    assert connected_components(m, 4).max() == 2
    assert connected_components(m, 8).max() == 1
    assert connected_components(m).max() == 1


def test_full_foreground_single_component():
    assert connected_components(np.ones((9, 7))).max() == 1


def test_components_match_flood_fill_1000_cases():
    rng = np.random.default_rng(0)
    for i in range(1000):
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.7)
        conn = 4 if i % 2 else 8
        assert same_partition(connected_components(mask, conn), flood_fill_labels(mask, conn))


def test_components_3d_match_flood_fill():
    rng = np.random.default_rng(1)
    for _ in range(50):
        mask = rng.random((4, 10, 10)) < 0.4
        assert same_partition(connected_components(mask), flood_fill_labels(mask, 6))


def test_bad_connectivity():
    with pytest.raises(ValueError):
        connected_components(np.ones((3, 3)), 6)


def test_size_filter_boundary():
    prob = np.zeros((40, 40))
    prob[2:10, 2:10] = 1.0  # 64 px
    prob[20:27, 20:29] = 1.0  # 63 px
    inst = instances_from_probability(prob, 0.5, min_size=64)
    assert inst.max() == 1 and (inst > 0).sum() == 64
    assert instances_from_probability(np.zeros((8, 8)), 0.5, 64).max() == 0


def test_remove_small_objects_relabels():
    lab = np.array([[1, 1, 0, 2], [1, 1, 0, 0], [0, 0, 3, 3]])
    out = remove_small_objects(lab, 2)
    assert sorted(np.unique(out).tolist()) == [0, 1, 2]


def test_matching_examples():
    gt = random_labels(np.random.default_rng(3), max_objects=3)
    while gt.max() == 0:
        gt = random_labels(np.random.default_rng(4), max_objects=3)
    assert match_and_score(gt, gt).f1 == 1.0
    res = match_and_score(np.zeros_like(gt), gt)
    assert res.f1 == 0.0 and res.recall == 0.0
    a = np.zeros((10, 10), int)
    b = np.zeros((10, 10), int)
    a[0:4, 0:5] = 1  # 20 px
    b[0:4, 3:10] = 1  # 28 px, overlap 8 px -> IoU 8 / 40 = 0.2
    b2 = np.zeros((10, 10), int)
    b2[0:4, 0:7] = 1  # overlap 20, union 28 -> 0.714
    assert match_and_score(a, b, 0.5).f1 == 0.0
    assert match_and_score(a, b2, 0.5).f1 == 1.0


def test_iou_04_is_not_a_match():
    a = np.zeros((1, 10), int)
    b = np.zeros((1, 10), int)
    a[0, 0:4] = 1
    b[0, 2:7] = 1  # overlap 2, union 7
    c = np.zeros((1, 10), int)
    c[0, 0:2] = 1
    d = np.zeros((1, 10), int)
    d[0, 0:5] = 1  # overlap 2, union 5 -> exactly 0.4
    assert iou_matrix(c, d)[0, 0] == pytest.approx(0.4)
    assert match_and_score(c, d, 0.5).f1 == 0.0


def test_matching_matches_brute_force_1000_cases():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pred, gt = random_labels(rng), random_labels(rng)
        thr = float(rng.choice([0.1, 0.25, 0.5]))
        res = match_and_score(pred, gt, thr)
        best, counts, n_p, n_g = brute_force_matching(pred, gt, thr)
        assert res.n_pred == n_p and res.n_gt == n_g
        assert res.total_iou == pytest.approx(best, abs=1e-9)
        assert res.n_matched in counts
        assert all(iou >= thr for _, _, iou in res.pairs)


def test_f1_symmetry_and_monotone_threshold():
    rng = np.random.default_rng(11)
    for _ in range(200):
        pred, gt = random_labels(rng), random_labels(rng)
        assert match_and_score(pred, gt).f1 == pytest.approx(match_and_score(gt, pred).f1)
        counts = [match_and_score(pred, gt, t).n_matched for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    rng = np.random.default_rng(0)
    labels = rng.random(20000) < 0.5
    ap = average_precision(rng.random(20000), labels)
    assert abs(ap - labels.mean()) < 0.02
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_matches_threshold_sweep_1000_cases():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = 20
        labels = rng.random(n) < 0.4
        if not labels.any():
            labels[0] = True
        scores = np.round(rng.random(n), int(rng.integers(1, 3)))  # ties included
        assert average_precision(scores, labels) == pytest.approx(ap_threshold_sweep(scores, labels), abs=1e-12)


@given(arrays(np.int8, (6, 6), elements=st.integers(0, 3)), arrays(np.int8, (6, 6), elements=st.integers(0, 3)))
def test_iou_matrix_bounds(a, b):
    m = iou_matrix(a, b)
    assert m.shape == (int(a.max()), int(b.max()))
    assert np.all((m >= 0) & (m <= 1))
