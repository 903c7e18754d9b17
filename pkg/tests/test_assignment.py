import numpy as np
import pytest

from conceptseg import autodiff as ad
from conceptseg.assignment import (
    AssignmentMatrix,
    assign,
    hard_assign,
    soft_assign,
    upsample_soft,
)


def cos_oracle(x, c):
    return float(np.dot(x, c) / (np.linalg.norm(x) * np.linalg.norm(c)))


def test_soft_assign_identical_vector_is_one():
    v = np.array([[0.3, -1.2, 0.7]])
    s = soft_assign(v, v).data
    np.testing.assert_allclose(s, [[1.0]], atol=1e-9)


def test_soft_assign_orthogonal_is_zero():
    s = soft_assign(np.array([[1.0, 0.0]]), np.array([[0.0, 5.0]])).data
    np.testing.assert_allclose(s, [[0.0]], atol=1e-12)


def test_soft_assign_hand_value():
    # x=(1,0), c=(1,1) -> 1/sqrt(2)
    s = soft_assign(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])).data
    np.testing.assert_allclose(s, [[1 / np.sqrt(2)]], atol=1e-9)


def test_soft_assign_matches_pairwise_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    c = rng.normal(size=(3, 4))
    s = soft_assign(x, c).data
    for i in range(5):
        for j in range(3):
            assert abs(s[i, j] - cos_oracle(x[i], c[j])) < 1e-9


def test_soft_assign_zero_row_warns_and_guards():
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    c = np.array([[1.0, 1.0]])
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        s = soft_assign(x, c).data
    assert s[0, 0] == 0.0


def test_soft_assign_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        soft_assign(np.ones((2, 3)), np.ones((2, 4)))


def test_hard_assign_identity_rows():
    labels, active = hard_assign(np.eye(3))
    np.testing.assert_array_equal(labels, [0, 1, 2])
    assert active == (0, 1, 2)


def test_hard_assign_single_dominant_concept():
    s = np.array([[0.9, 0.1], [0.8, 0.3], [0.99, -0.5]])
    labels, active = hard_assign(s)
    assert active == (0,)
    assert len(active) == 1


def test_hard_assign_matches_row_scan():
    rng = np.random.default_rng(12)
    s = rng.normal(size=(6, 3))
    labels, active = hard_assign(s)
    for i in range(6):
        best, arg = -np.inf, -1
        for j in range(3):
            if s[i, j] > best:
                best, arg = s[i, j], j
        assert labels[i] == arg
    assert set(active) == set(labels.tolist())


def test_hard_assign_tie_breaks_low_index():
    labels, _ = hard_assign(np.array([[0.5, 0.5, 0.2]]))
    assert labels[0] == 0


def test_scale_invariance_of_hard_assignment():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 5))
    c = rng.normal(size=(4, 5))
    base, _ = hard_assign(soft_assign(x, c).data)
    x2 = x * rng.uniform(0.1, 10.0, size=(8, 1))
    c2 = c * rng.uniform(0.1, 10.0, size=(4, 1))
    scaled, _ = hard_assign(soft_assign(x2, c2).data)
    np.testing.assert_array_equal(base, scaled)


def test_upsample_identity_and_constant():
    rng = np.random.default_rng(5)
    grid = rng.normal(size=(3, 4, 2))
    np.testing.assert_array_equal(upsample_soft(grid, 3, 4), grid)
    const = np.full((2, 2, 3), 0.4)
    np.testing.assert_array_equal(upsample_soft(const, 8, 6), np.full((8, 6, 3), 0.4))


def test_upsample_ramp_matches_bilinear_oracle():
    expected = np.array([
        [0.00, 0.25, 0.75, 1.00],
        [0.50, 0.75, 1.25, 1.50],
        [1.50, 1.75, 2.25, 2.50],
        [2.00, 2.25, 2.75, 3.00],
    ])
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    out = upsample_soft(ramp, 4, 4)
    np.testing.assert_allclose(out[..., 0], expected, atol=1e-15)


def test_upsample_rejects_downscale():
    with pytest.raises(ad.ShapeError):
        upsample_soft(np.zeros((4, 4, 2)), 2, 8)


def test_upsample_then_argmax_on_constant_field():
    # spatially constant S: upsampling commutes with argmax
    s = np.tile(np.array([0.2, 0.9, 0.1]), (3, 3, 1))
    up = upsample_soft(s, 7, 7)
    labels_after = up.reshape(-1, 3).argmax(axis=1)
    assert (labels_after == 1).all()


def test_assign_composition_and_active_set():
    rng = np.random.default_rng(9)
    c = rng.normal(size=(4, 6))
    x = np.vstack([np.tile(c[0], (5, 1)), np.tile(c[2], (4, 1))])
    x += rng.normal(scale=1e-3, size=x.shape)
    result = assign(x, c, grid_hw=(3, 3), target_hw=(6, 6))
    assert isinstance(result, AssignmentMatrix)
    assert result.soft.shape == (36, 4)
    assert result.active_concepts == (0, 2)
    assert result.num_regions == 2
