"""Eigenbasis rotations, rotated variances, curvature weights, and the
log-determinant slack bound."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwclust.errors import ValidationError
from dwclust.model import ClusterModel, RegularizationConfig
from dwclust.rotation import (
    BetaWeights,
    RotationSet,
    beta_from_variances,
    diagonalize,
    hadamard_slack,
    haar_rotations,
    rotated_variances,
)


def single_cluster_model(cov) -> ClusterModel:
    cov = np.asarray(cov, dtype=np.float64)
    return ClusterModel(proportions=np.array([1.0]),
                        means=np.zeros((1, cov.shape[0])),
                        covariances=cov[None])


def random_spd(rng, d, scale=1.0) -> np.ndarray:
    g = rng.normal(size=(d, d)) * scale
    return g @ g.T + 1e-3 * np.eye(d)


# ---------------------------------------------------------------------------
# containers


def test_rotation_set_rejects_non_orthonormal_rows():
    with pytest.raises(ValidationError):
        RotationSet(rotations=np.array([[[1.0, 1.0], [0.0, 1.0]]]),
                    rotated_variances=np.ones((1, 2)))


def test_rotation_set_rejects_negative_variances():
    with pytest.raises(ValidationError):
        RotationSet(rotations=np.eye(2)[None],
                    rotated_variances=np.array([[1.0, -1.0]]))


def test_beta_weights_must_be_positive():
    with pytest.raises(ValidationError):
        BetaWeights(beta=np.array([[1.0, 0.0]]))


# ---------------------------------------------------------------------------
# diagonalize


def test_diagonalize_already_diagonal():
    rs = diagonalize(single_cluster_model(np.diag([4.0, 1.0])),
                     RegularizationConfig())
    assert np.allclose(rs.rotated_variances[0], [4.0, 1.0])
    assert np.allclose(np.abs(rs.rotations[0]), np.eye(2))


def test_diagonalize_symmetric_pair():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    rs = diagonalize(single_cluster_model(cov), RegularizationConfig())
    assert np.allclose(rs.rotated_variances[0], [3.0, 1.0])
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    assert np.allclose(np.abs(rs.rotations[0]),
                       [[inv_sqrt2, inv_sqrt2], [inv_sqrt2, inv_sqrt2]])
    assert np.allclose(rs.rotations[0] @ cov @ rs.rotations[0].T,
                       np.diag([3.0, 1.0]), atol=1e-9)


def test_diagonalize_regularized_singular_matrix():
    cov = np.array([[192800.0, 0.0], [0.0, 0.0]])
    rs = diagonalize(single_cluster_model(cov),
                     RegularizationConfig(sigma_n_sq=0.5))
    assert np.allclose(rs.rotated_variances[0], [192800.5, 0.5])
    assert np.allclose(np.abs(rs.rotations[0]), np.eye(2))


def test_diagonalize_variances_sorted_descending():
    rng = np.random.default_rng(0)
    rs = diagonalize(single_cluster_model(random_spd(rng, 4)),
                     RegularizationConfig())
    v = rs.rotated_variances[0]
    assert np.all(np.diff(v) <= 0.0)


def test_diagonalize_sign_convention_and_determinism():
    rng = np.random.default_rng(1)
    model = single_cluster_model(random_spd(rng, 3))
    rs_a = diagonalize(model, RegularizationConfig())
    rs_b = diagonalize(model, RegularizationConfig())
    assert np.array_equal(rs_a.rotations, rs_b.rotations)
    for row in rs_a.rotations[0]:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        assert row[nz[0]] > 0.0


@given(st.integers(min_value=0, max_value=2 ** 32 - 1),
       st.integers(min_value=1, max_value=5),
       st.sampled_from([0.0, 0.5]))
@settings(max_examples=40, deadline=None)
def test_diagonalize_reconstructs_covariance(seed, d, sigma):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, d)
    reg = RegularizationConfig(sigma_n_sq=sigma)
    rs = diagonalize(single_cluster_model(cov), reg)
    a = rs.rotations[0]
    assert np.abs(a @ a.T - np.eye(d)).max() < 1e-9
    target = cov + sigma * np.eye(d)
    rebuilt = a.T @ np.diag(rs.rotated_variances[0]) @ a
    rel = np.linalg.norm(rebuilt - target) / np.linalg.norm(target)
    assert rel < 1e-8


# ---------------------------------------------------------------------------
# rotated variances and curvature weights


def test_rotated_variances_for_external_rotations():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    rs = rotated_variances(single_cluster_model(cov), np.eye(2)[None],
                           RegularizationConfig())
    assert np.allclose(rs.rotated_variances[0], [2.0, 2.0])


def test_beta_reciprocal():
    rs = RotationSet(rotations=np.eye(2)[None],
                     rotated_variances=np.array([[4.0, 1.0]]))
    beta = beta_from_variances(rs, RegularizationConfig())
    assert np.allclose(beta.beta, [[0.25, 1.0]])


def test_beta_floor_engages_on_zero_variance():
    rs = RotationSet(rotations=np.eye(2)[None],
                     rotated_variances=np.array([[1.0, 0.0]]))
    beta = beta_from_variances(rs, RegularizationConfig(variance_floor=1e-12))
    assert beta.beta[0, 1] == pytest.approx(1e12)


def test_beta_for_regularized_singular_pair():
    rs = RotationSet(rotations=np.eye(2)[None],
                     rotated_variances=np.array([[192800.5, 0.5]]))
    beta = beta_from_variances(rs, RegularizationConfig())
    assert beta.beta[0, 0] == pytest.approx(5.1867e-6, rel=1e-4)
    assert beta.beta[0, 1] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# log-determinant slack


def test_slack_zero_at_eigenbasis():
    rng = np.random.default_rng(2)
    model = single_cluster_model(random_spd(rng, 3, scale=2.0))
    reg = RegularizationConfig()
    assert abs(hadamard_slack(model, diagonalize(model, reg), reg)) < 1e-9


def test_slack_identity_rotation_hand_value():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    model = single_cluster_model(cov)
    reg = RegularizationConfig()
    rs = rotated_variances(model, np.eye(2)[None], reg)
    expected = np.log(4.0) - np.log(3.0)
    assert hadamard_slack(model, rs, reg) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.28768, abs=1e-5)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_slack_non_negative_for_random_rotations(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 5))
    model = single_cluster_model(random_spd(rng, d))
    reg = RegularizationConfig()
    rs = rotated_variances(model, haar_rotations(1, d, rng), reg)
    assert hadamard_slack(model, rs, reg) >= -1e-9


def test_slack_eigenbasis_is_minimal():
    rng = np.random.default_rng(3)
    model = single_cluster_model(random_spd(rng, 3))
    reg = RegularizationConfig()
    at_eigen = hadamard_slack(model, diagonalize(model, reg), reg)
    for _ in range(25):
        rs = rotated_variances(model, haar_rotations(1, 3, rng), reg)
        assert at_eigen <= hadamard_slack(model, rs, reg) + 1e-9


def test_slack_weighs_clusters_by_proportion():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    model = ClusterModel(proportions=np.array([0.25, 0.75]),
                         means=np.zeros((2, 2)),
                         covariances=np.stack([cov, cov]))
    reg = RegularizationConfig()
    rs = rotated_variances(model, np.stack([np.eye(2), np.eye(2)]), reg)
    per_cluster = np.log(4.0) - np.log(3.0)
    assert hadamard_slack(model, rs, reg) == pytest.approx(per_cluster,
                                                           rel=1e-12)


def test_slack_skips_empty_clusters():
    model = ClusterModel(proportions=np.array([1.0, 0.0]),
                         means=np.zeros((2, 2)),
                         covariances=np.stack([np.eye(2), np.zeros((2, 2))]),
                         empty_clusters=(1,))
    reg = RegularizationConfig()
    rs = rotated_variances(model, np.stack([np.eye(2), np.eye(2)]), reg)
    assert hadamard_slack(model, rs, reg) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# random rotations


def test_haar_rotations_orthonormal_and_deterministic():
    a = haar_rotations(3, 4, np.random.default_rng(7))
    b = haar_rotations(3, 4, np.random.default_rng(7))
    assert np.array_equal(a, b)
    for q in a:
        assert np.abs(q @ q.T - np.eye(4)).max() < 1e-9


def test_haar_rotations_differ_across_clusters():
    a = haar_rotations(2, 3, np.random.default_rng(0))
    assert not np.allclose(a[0], a[1])
