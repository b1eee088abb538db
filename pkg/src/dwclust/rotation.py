"""Per-cluster orthonormal rotations and curvature weights.

Rotating each cluster into the eigenbasis of its regularized covariance makes
the coordinate variances multiply to the determinant, which is the tightest
case of Hadamard's inequality: for any orthonormal A,

    sum_d log diag(A M A^T)_d >= log det M,

with equality when A diagonalizes M. The curvature weights beta_id = 1 /
sigma_id^2 are the slopes of the tangents of log at the current variances;
they turn the log-det objective into a weighted least-squares problem that
the per-host solver can handle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import ClusterModel, RegularizationConfig, regularized_log_determinants

ORTHONORMAL_ATOL = 1e-9


@dataclass(frozen=True)
class RotationSet:
    """Per-cluster rotations (J, D, D) with the rotated coordinate variances
    (J, D) of the model that produced them. Rows of each rotation are the
    basis vectors, so y = A @ x is the rotated sample."""

    rotations: np.ndarray
    rotated_variances: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.rotations, dtype=np.float64)
        v = np.asarray(self.rotated_variances, dtype=np.float64)
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValidationError(f"rotations must be (J, D, D), got {a.shape}")
        if v.shape != a.shape[:2]:
            raise ValidationError(
                f"rotated_variances shape {v.shape} does not match rotations {a.shape}"
            )
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
            raise ValidationError("rotation set contains non-finite entries")
        if np.any(v < -1e-9):
            raise ValidationError("rotated variances must be non-negative")
        eye = np.eye(a.shape[1])
        for i in range(a.shape[0]):
            if not np.allclose(a[i] @ a[i].T, eye, atol=1e-8):
                raise ValidationError(f"rotation {i} is not orthonormal")
        object.__setattr__(self, "rotations", a)
        object.__setattr__(self, "rotated_variances", v)

    @property
    def n_clusters(self) -> int:
        return self.rotations.shape[0]

    @property
    def n_features(self) -> int:
        return self.rotations.shape[1]


@dataclass(frozen=True)
class BetaWeights:
    """Per-cluster, per-coordinate least-squares weights (J, D); finite,
    positive, and capped by the variance floor."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 2:
            raise ValidationError(f"beta must be (J, D), got {b.shape}")
        if not np.all(np.isfinite(b)) or np.any(b <= 0.0):
            raise ValidationError("beta weights must be finite and positive")
        object.__setattr__(self, "beta", b)


def _fix_eigenvector_signs(basis: np.ndarray) -> np.ndarray:
    """Make the first non-negligible component of each row positive so the
    eigendecomposition is reproducible bit-for-bit across runs."""

    fixed = basis.copy()
    for r in range(fixed.shape[0]):
        row = fixed[r]
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        anchor = nz[0] if nz.size else 0
        if row[anchor] < 0.0:
            fixed[r] = -row
    return fixed


def diagonalize(model: ClusterModel, reg: RegularizationConfig) -> RotationSet:
    """Eigendecompose each regularized covariance S_i + sigma_n^2 I.

    Rows of the returned rotations are eigenvectors ordered by descending
    eigenvalue, signs fixed deterministically; rotated_variances are the
    eigenvalues in the same order.
    """

    reg_cov = model.regularized_covariances(reg)
    j, d = model.n_clusters, model.n_features
    rotations = np.empty((j, d, d))
    variances = np.empty((j, d))
    for i in range(j):
        eigvals, eigvecs = np.linalg.eigh(reg_cov[i])
        order = np.argsort(eigvals)[::-1]
        basis = eigvecs[:, order].T  # rows are eigenvectors
        rotations[i] = _fix_eigenvector_signs(basis)
        variances[i] = np.clip(eigvals[order], 0.0, None)
    return RotationSet(rotations=rotations, rotated_variances=variances)


def rotated_variances(model: ClusterModel, rotations: np.ndarray,
                      reg: RegularizationConfig) -> RotationSet:
    """RotationSet for externally supplied rotations (e.g. the random initial
    ones): variances are diag(A_i (S_i + sigma_n^2 I) A_i^T)."""

    a = np.asarray(rotations, dtype=np.float64)
    reg_cov = model.regularized_covariances(reg)
    rotated = np.einsum("ide,iec,ifc->idf", a, reg_cov, a, optimize=True)
    diag = np.clip(np.diagonal(rotated, axis1=1, axis2=2).copy(), 0.0, None)
    return RotationSet(rotations=a, rotated_variances=diag)


def beta_from_variances(rotation_set: RotationSet, reg: RegularizationConfig) -> BetaWeights:
    """beta_id = 1 / max(sigma_id^2, variance_floor)."""

    floored = np.clip(rotation_set.rotated_variances, reg.variance_floor, None)
    return BetaWeights(beta=1.0 / floored)


def hadamard_slack(model: ClusterModel, rotation_set: RotationSet,
                   reg: RegularizationConfig) -> float:
    """Proportion-weighted gap sum_i p_i (sum_d log sigma_id^2 - log det M_i)
    between the rotated-coordinate code length and the determinant bound.
    Non-negative for any orthonormal rotations; zero at the eigenbasis."""

    logdets = regularized_log_determinants(model, reg)
    floored = np.clip(rotation_set.rotated_variances, reg.variance_floor, None)
    slack = 0.0
    for i in range(model.n_clusters):
        if i in model.empty_clusters:
            continue
        slack += model.proportions[i] * (
            float(np.log(floored[i]).sum()) - logdets[i]
        )
    return float(slack)


def haar_rotations(n_clusters: int, n_features: int, rng: np.random.Generator) -> np.ndarray:
    """Independent Haar-distributed orthogonal matrices via QR with the sign
    of diag(R) absorbed, one per cluster."""

    out = np.empty((n_clusters, n_features, n_features))
    for i in range(n_clusters):
        g = rng.standard_normal((n_features, n_features))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))[None, :]
        out[i] = q
    return out
