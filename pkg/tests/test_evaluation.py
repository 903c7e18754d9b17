import itertools

import numpy as np
import pytest

from conceptseg.evaluation import (
    RegionSample,
    clustering_protocol,
    confusion_matrix,
    evaluate_clusters,
    hungarian_match,
    hungarian_matched_accuracy,
    majority_region_labels,
    match_clusters,
    miou,
    remap_predictions,
    retrieval_protocol,
)


def brute_force_best(cost):
    """Exhaustive optimal assignment value for a P x G matrix."""
    cost = np.asarray(cost)
    p, g = cost.shape
    best = -np.inf
    if p <= g:
        for perm in itertools.permutations(range(g), p):
            best = max(best, sum(cost[i, perm[i]] for i in range(p)))
    else:
        for perm in itertools.permutations(range(p), g):
            best = max(best, sum(cost[perm[j], j] for j in range(g)))
    return best


def test_hungarian_diagonal_dominant_identity():
    cost = np.eye(3) * 10 + np.random.default_rng(0).uniform(0, 1, (3, 3))
    rows, cols = hungarian_match(cost)
    np.testing.assert_array_equal(rows, [0, 1, 2])
    np.testing.assert_array_equal(cols, [0, 1, 2])


def test_hungarian_matches_bruteforce_4x4_small_integers():
    rng = np.random.default_rng(1)
    for _ in range(500):
        cost = rng.integers(0, 4, (4, 4)).astype(float)
        rows, cols = hungarian_match(cost)
        assert cost[rows, cols].sum() == brute_force_best(cost)


def test_hungarian_rectangular_vs_bruteforce():
    rng = np.random.default_rng(2)
    for shape in [(2, 3), (3, 2), (4, 6), (5, 3)]:
        for _ in range(100):
            cost = rng.uniform(0, 1, shape)
            rows, cols = hungarian_match(cost)
            assert len(rows) == min(shape)
            assert abs(cost[rows, cols].sum() - brute_force_best(cost)) < 1e-12


def test_hungarian_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf, 1.0], [0.0, 2.0]]))


def test_confusion_counts_and_ignore():
    pred = np.array([0, 0, 1, 1, 1])
    gt = np.array([1, 1, 0, 0, 255])
    conf = confusion_matrix(pred, gt, 2, 2, ignore_index=255)
    np.testing.assert_array_equal(conf, [[0, 2], [2, 0]])
    assert conf.sum() == 4  # ignore pixel excluded


def test_miou_identical_masks():
    m = np.array([[0, 1], [2, 1]])
    report = miou(m, m)
    assert report.mean_iou == 1.0
    assert report.pixel_accuracy == 1.0


def test_miou_disjoint_single_class():
    pred = np.array([1, 1, 0, 0])
    gt = np.array([0, 0, 1, 1])
    report = miou(pred, gt)
    assert report.per_class_iou[0] == 0.0
    assert report.per_class_iou[1] == 0.0


def test_miou_hand_counted_toy():
    # 3x3 grids: prediction puts class 1 on 6 pixels, GT has 4, overlap 3
    # TP=3, FP=3, FN=1 -> IoU = 3/7
    pred = np.array([[1, 1, 1],
                     [1, 1, 1],
                     [0, 0, 0]])
    gt = np.array([[1, 1, 1],
                   [0, 0, 0],
                   [1, 0, 0]])
    report = miou(pred, gt)
    assert report.per_class_iou[1] == pytest.approx(3 / 7)


def test_miou_relabeling_invariance():
    rng = np.random.default_rng(3)
    pred = rng.integers(0, 4, 60)
    gt = rng.integers(0, 4, 60)
    base = miou(pred, gt, num_classes=4)
    perm = np.array([2, 3, 0, 1])
    swapped = miou(perm[pred], perm[gt], num_classes=4)
    assert swapped.mean_iou == pytest.approx(base.mean_iou)
    assert swapped.pixel_accuracy == pytest.approx(base.pixel_accuracy)


def test_miou_shape_mismatch():
    with pytest.raises(ValueError):
        miou(np.zeros(4), np.zeros(5))


def test_match_and_remap_clusters():
    pred = np.array([2, 2, 2, 0, 0, 1])
    gt = np.array([0, 0, 0, 1, 1, 2])
    report, mapping = evaluate_clusters(pred, gt)
    assert mapping == {2: 0, 0: 1, 1: 2}
    assert report.mean_iou == 1.0
    assert hungarian_matched_accuracy(pred, gt) == 1.0


def test_remap_fills_unmatched():
    out = remap_predictions(np.array([0, 1, 2]), {0: 5})
    np.testing.assert_array_equal(out, [5, -1, -1])


def test_majority_region_labels():
    sample = RegionSample(
        embeddings=np.zeros((2, 3)),
        region_mask=np.array([[0, 0, 1], [0, 1, 1]]),
        gt_mask=np.array([[4, 4, 2], [7, 2, 2]]),
    )
    np.testing.assert_array_equal(majority_region_labels(sample), [4, 2])


def make_separable_samples(rng, n_images=6, classes=3, d=8, basis=None):
    q = np.linalg.qr(np.random.default_rng(99).normal(size=(d, d)))[0] if basis is None else basis
    samples = []
    for _ in range(n_images):
        present = rng.choice(classes, size=2, replace=False)
        emb = q[present] + rng.normal(scale=1e-3, size=(2, d))
        region_mask = np.repeat(np.arange(2), 8).reshape(4, 4)
        gt = present[region_mask]
        samples.append(RegionSample(embeddings=emb, region_mask=region_mask,
                                    gt_mask=gt))
    return samples


def test_retrieval_protocol_self_bank_is_perfect():
    rng = np.random.default_rng(4)
    samples = make_separable_samples(rng)
    bank = np.vstack([s.embeddings for s in samples])
    labels = np.concatenate([majority_region_labels(s) for s in samples])
    report = retrieval_protocol(bank, labels, samples, k=1)
    assert report.mean_iou == 1.0  # every query finds itself in the bank


def test_retrieval_protocol_separable_classes():
    rng = np.random.default_rng(5)
    train = make_separable_samples(rng, n_images=8)
    val = make_separable_samples(rng, n_images=5)
    bank = np.vstack([s.embeddings for s in train])
    labels = np.concatenate([majority_region_labels(s) for s in train])
    report = retrieval_protocol(bank, labels, val, k=3)
    assert report.mean_iou == 1.0


def test_clustering_protocol_perfect_groups():
    rng = np.random.default_rng(6)
    samples = make_separable_samples(rng, n_images=10, classes=3)
    mean, std, reports = clustering_protocol(samples, num_classes=3, restarts=5, seed=7)
    assert mean == pytest.approx(1.0)
    assert std == pytest.approx(0.0)
    assert len(reports) == 5


def test_clustering_protocol_respects_fixed_background():
    rng = np.random.default_rng(8)
    d = 6
    q = np.linalg.qr(rng.normal(size=(d, d)))[0]
    emb = np.vstack([q[0], q[1]]) + rng.normal(scale=1e-3, size=(2, d))
    region_mask = np.repeat(np.arange(2), 6).reshape(3, 4)
    gt = np.where(region_mask == 0, 0, 1)  # region 0 is true background
    s = RegionSample(embeddings=emb, region_mask=region_mask, gt_mask=gt,
                     region_classes=np.array([0, -1]))
    mean, std, _ = clustering_protocol([s], num_classes=1, restarts=2, seed=9,
                                       class_offset=1)
    assert mean == pytest.approx(1.0)
