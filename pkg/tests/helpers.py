"""Shared test utilities: the synthetic two-cluster families used across the
suite, and hand-rolled reference implementations of the host subproblem that
are kept deliberately independent of the package internals (they recompute
objectives and optimal centers from the raw formula, term by term)."""

import itertools

import numpy as np

from dwclust.dataeval import MixtureComponent, MixtureSpec
from dwclust.localsolver import DualVariables, SolveParams, transform_shard
from dwclust.rotation import RotationSet, haar_rotations

# Two strongly correlated zero-mean components whose ellipses cross at the
# origin; separating them requires the covariance structure, not the means.
CORR_COV_A = np.array([[80000.0, 52000.0], [52000.0, 35600.0]])
CORR_COV_B = np.array([[192800.0, -118800.0], [-118800.0, 74000.0]])
# Rank-one variant of the second component: all its variance on one axis.
SINGULAR_COV_B = np.array([[192800.0, 0.0], [0.0, 0.0]])


def two_component_spec(cov_a, cov_b, count, mean_b=(0.0, 0.0)) -> MixtureSpec:
    return MixtureSpec(components=(
        MixtureComponent(mean=np.zeros(2), cov=np.asarray(cov_a, dtype=float),
                         count=count),
        MixtureComponent(mean=np.asarray(mean_b, dtype=float),
                         cov=np.asarray(cov_b, dtype=float), count=count),
    ))


def host_objective_reference(rotated, assignments, mu, beta, lam_mu, lam_p,
                             p_target, n_total) -> float:
    """Host subproblem value computed term by term with plain loops.

    rotated is (J, n, D): the shard seen through each cluster's basis.
    The four terms: weighted squared residuals, the center multipliers paid
    on mu, the same multipliers credited against the assigned rotated mass,
    and the proportion multipliers paid per unit of assigned mass.
    """

    value = 0.0
    for i in range(beta.shape[0]):
        resid = rotated[i] - mu[i]
        value += float(assignments[:, i] @ ((resid * resid) @ beta[i])) / n_total
        value -= float(lam_mu[i] @ (assignments[:, i] @ rotated[i])) \
            / (p_target[i] * n_total)
        value += float(lam_mu[i] @ mu[i])
        value += float(lam_p[i]) * float(assignments[:, i].sum()) / n_total
    return value


def best_center_reference(rotated_i, a_col, beta_i, lam_mu_i, lo, hi,
                          n_total) -> np.ndarray:
    """Coordinatewise box-constrained argmin of the quadratic in mu.

    Derived from the raw coefficients: curvature 2 beta_d mass / N and slope
    at zero -2 beta_d s1_d / N + lam_d. With zero mass only the linear
    multiplier term remains, so the optimum sits at the box end it favors
    (either end when it vanishes; the midpoint is used for determinism).
    """

    mass = float(a_col.sum())
    if mass == 0.0:
        mid = 0.5 * (lo + hi)
        return np.where(lam_mu_i > 0.0, lo, np.where(lam_mu_i < 0.0, hi, mid))
    s1 = a_col @ rotated_i
    curvature = 2.0 * beta_i * mass / n_total
    slope_at_zero = -2.0 * beta_i * s1 / n_total + lam_mu_i
    return np.clip(-slope_at_zero / curvature, lo, hi)


def exhaustive_minimum_reference(rotated, lo, hi, beta, lam_mu, lam_p,
                                 p_target, n_total) -> float:
    """Ground-truth subproblem minimum: every hard labeling, each priced at
    its own best box-constrained centers. Hard labelings suffice because the
    objective is linear in each assignment row once the centers are fixed."""

    n = rotated.shape[1]
    j = beta.shape[0]
    best = np.inf
    for labels in itertools.product(range(j), repeat=n):
        a = np.eye(j)[list(labels)]
        mu = np.stack([
            best_center_reference(rotated[i], a[:, i], beta[i], lam_mu[i],
                                  lo[i], hi[i], n_total)
            for i in range(j)
        ])
        value = host_objective_reference(rotated, a, mu, beta, lam_mu, lam_p,
                                         p_target, n_total)
        best = min(best, value)
    return best


def random_subproblem(rng, n_rows, n_clusters=2, n_features=2, n_hosts=2,
                      host_id=0, dual_scale=1.0):
    """A seeded random host instance: Haar rotations, log-uniform curvature
    weights, Gaussian multipliers, and a Dirichlet proportion target."""

    samples = rng.normal(size=(n_rows, n_features)) * rng.uniform(0.5, 3.0)
    rotation_set = RotationSet(
        rotations=haar_rotations(n_clusters, n_features, rng),
        rotated_variances=np.ones((n_clusters, n_features)),
    )
    from dwclust.rotation import BetaWeights
    beta = BetaWeights(
        beta=np.exp(rng.uniform(-1.5, 1.5, size=(n_clusters, n_features)))
    )
    duals = DualVariables(
        lambda_mu=dual_scale * rng.normal(size=(n_clusters, n_hosts, n_features)),
        lambda_p=dual_scale * rng.normal(size=n_clusters),
    )
    p_target = rng.dirichlet(np.full(n_clusters, 4.0))
    params = SolveParams(
        round_id=0,
        rotation_set=rotation_set,
        beta=beta,
        proportions_target=p_target,
        duals=duals,
        n_total=n_rows * n_hosts,
    )
    cache = transform_shard(samples, rotation_set)
    return cache, params, host_id
