"""Per-host subproblem: given rotations, curvature weights and multipliers,
pick soft assignments for the local shard and a local center guess per cluster.

For host k the objective is, over its shard rows n and coordinates d,

    f(a, mu_hat) = sum_{i,n,d} (a_ni / N) beta_id (y_nid - mu_hat_id)^2
                 + sum_{i,d} lambda_mu[i,k,d] * mu_hat_id
                 + sum_i lambda_p[i] * (sum_n a_ni) / N
                 - sum_{i,d} (lambda_mu[i,k,d] / (p_i N)) * sum_n a_ni y_nid

with y_nid the shard rotated by cluster i's basis, a row-stochastic, and each
mu_hat_id confined to the rotated shard's bounding box (no optimal center can
leave it). The function is linear in a for fixed mu_hat and quadratic in
mu_hat for fixed a, so block-coordinate descent with exact steps converges
finitely and every step is non-increasing; that descent is asserted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import NumericalError, ValidationError
from .model import require_valid_assignment
from .rotation import BetaWeights, RotationSet

MAX_SWEEPS = 50
SWEEP_TOL = 1e-10
DESCENT_SLACK = 1e-9
ENUM_LIMIT = 256  # largest J^n for which the subproblem is solved exhaustively


@dataclass(frozen=True)
class DualVariables:
    """Multipliers for the relaxed coupling constraints: lambda_mu is
    (J, K, D) for the center-consistency constraints, lambda_p is (J,) for
    the global proportion constraints."""

    lambda_mu: np.ndarray
    lambda_p: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.lambda_mu, dtype=np.float64)
        p = np.asarray(self.lambda_p, dtype=np.float64)
        if mu.ndim != 3:
            raise ValidationError(f"lambda_mu must be (J, K, D), got {mu.shape}")
        if p.shape != (mu.shape[0],):
            raise ValidationError(
                f"lambda_p shape {p.shape} does not match J={mu.shape[0]}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(p))):
            raise ValidationError("dual variables contain non-finite entries")
        object.__setattr__(self, "lambda_mu", mu)
        object.__setattr__(self, "lambda_p", p)

    @classmethod
    def zeros(cls, n_clusters: int, n_hosts: int, n_features: int) -> "DualVariables":
        return cls(
            lambda_mu=np.zeros((n_clusters, n_hosts, n_features)),
            lambda_p=np.zeros(n_clusters),
        )


@dataclass(frozen=True)
class SolveParams:
    """Everything a host needs for one solve round. proportions_target is the
    fixed proportion vector of the outer problem (strictly positive, sums to
    one); n_total is the global sample count N, which every cost term is
    normalized by."""

    round_id: int
    rotation_set: RotationSet
    beta: BetaWeights
    proportions_target: np.ndarray
    duals: DualVariables
    n_total: int

    def __post_init__(self):
        if self.round_id < 0:
            raise ValidationError("round_id must be >= 0")
        if self.n_total < 1:
            raise ValidationError("n_total must be >= 1")
        p = np.asarray(self.proportions_target, dtype=np.float64)
        j = self.rotation_set.n_clusters
        d = self.rotation_set.n_features
        if p.shape != (j,):
            raise ValidationError(f"proportions_target shape {p.shape}, expected ({j},)")
        if np.any(p <= 0.0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError("proportions_target must be strictly positive and sum to 1")
        if self.beta.beta.shape != (j, d):
            raise ValidationError("beta shape does not match rotation set")
        if self.duals.lambda_mu.shape[0] != j or self.duals.lambda_mu.shape[2] != d:
            raise ValidationError("dual variable shapes do not match rotation set")
        object.__setattr__(self, "proportions_target", p)

    @property
    def n_hosts(self) -> int:
        return self.duals.lambda_mu.shape[1]


@dataclass(frozen=True)
class LocalSolveResult:
    """Host answer for one round: subproblem value, center guesses, and the
    moment statistics of the final local assignments. local_assignments and
    row_costs ride along only when the coordinator asks to collect them."""

    f_star: float
    cluster_mass: np.ndarray           # (J,)
    mu_hat: np.ndarray                 # (J, D)
    rotated_first_moment: np.ndarray   # (J, D)  sum_n a_ni y_nid
    raw_first_moment: np.ndarray       # (J, D)  sum_n a_ni x_n
    raw_second_moment: np.ndarray      # (J, D, D)  sum_n a_ni x_n x_n^T
    local_assignments: np.ndarray | None = None
    row_costs: np.ndarray | None = None


@dataclass(frozen=True)
class ShardCache:
    """Rotated copies of one host's shard plus the per-cluster coordinate
    boxes that confine the center guesses."""

    samples: np.ndarray   # (n, D)
    rotated: np.ndarray   # (J, n, D)  rows rotated by each cluster's basis
    box_min: np.ndarray   # (J, D)
    box_max: np.ndarray   # (J, D)

    @property
    def n_rows(self) -> int:
        return self.samples.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.rotated.shape[0]


def transform_shard(samples, rotation_set: RotationSet) -> ShardCache:
    """Rotate the shard by every cluster basis and record the coordinate
    bounding boxes of the rotated rows."""

    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"shard must be a non-empty 2-D matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("shard contains non-finite entries")
    if x.shape[1] != rotation_set.n_features:
        raise ValidationError(
            f"shard has {x.shape[1]} features, rotations expect {rotation_set.n_features}"
        )
    rotated = np.einsum("ide,ne->ind", rotation_set.rotations, x, optimize=True)
    return ShardCache(
        samples=x,
        rotated=rotated,
        box_min=rotated.min(axis=1),
        box_max=rotated.max(axis=1),
    )


def assignment_costs(cache: ShardCache, params: SolveParams, mu_hat: np.ndarray,
                     host_id: int) -> np.ndarray:
    """Per-row, per-cluster marginal cost of assignment mass:

        c_ni = sum_d [beta_id (y_nid - mu_hat_id)^2
                      - lambda_mu[i,k,d] y_nid / p_i] / N + lambda_p[i] / N.
    """

    beta = params.beta.beta
    lam_mu = params.duals.lambda_mu[:, host_id, :]
    lam_p = params.duals.lambda_p
    p_t = params.proportions_target
    n_total = params.n_total

    j = cache.n_clusters
    costs = np.empty((cache.n_rows, j))
    for i in range(j):
        resid_sq = (cache.rotated[i] - mu_hat[i]) ** 2
        costs[:, i] = resid_sq @ beta[i] - cache.rotated[i] @ (lam_mu[i] / p_t[i])
    costs /= n_total
    costs += lam_p / n_total
    return costs


def _mu_step(cache: ShardCache, params: SolveParams, assignments: np.ndarray,
             host_id: int, with_duals: bool = True) -> np.ndarray:
    """Exact minimizer over the center guesses for fixed assignments: the
    box-clamped weighted mean, shifted by the multiplier when with_duals.
    Zero-mass clusters take the box end favored by the multiplier (the
    objective is then linear in mu_hat), midpoint when it vanishes."""

    beta = params.beta.beta
    lam_mu = params.duals.lambda_mu[:, host_id, :] if with_duals else None
    n_total = params.n_total

    mass = assignments.sum(axis=0)
    mu = np.empty_like(beta)
    for i in range(cache.n_clusters):
        lo, hi = cache.box_min[i], cache.box_max[i]
        if mass[i] > 0.0:
            s1 = assignments[:, i] @ cache.rotated[i]
            numer = beta[i] * s1 / n_total
            if with_duals:
                numer = numer - 0.5 * lam_mu[i]
            mu[i] = np.clip(numer / (beta[i] * mass[i] / n_total), lo, hi)
        else:
            lam = lam_mu[i] if with_duals else np.zeros_like(lo)
            mid = 0.5 * (lo + hi)
            mu[i] = np.where(lam > 0.0, lo, np.where(lam < 0.0, hi, mid))
    return mu


def _objective(cache: ShardCache, params: SolveParams, assignments: np.ndarray,
               mu_hat: np.ndarray, host_id: int) -> float:
    """All four terms of the host objective."""

    beta = params.beta.beta
    lam_mu = params.duals.lambda_mu[:, host_id, :]
    lam_p = params.duals.lambda_p
    p_t = params.proportions_target
    n_total = params.n_total

    value = 0.0
    for i in range(cache.n_clusters):
        resid_sq = (cache.rotated[i] - mu_hat[i]) ** 2
        value += (assignments[:, i] @ resid_sq) @ beta[i] / n_total
        s1 = assignments[:, i] @ cache.rotated[i]
        value -= (lam_mu[i] @ s1) / (p_t[i] * n_total)
    value += float((lam_mu * mu_hat).sum())
    value += float(lam_p @ assignments.sum(axis=0)) / n_total
    if not np.isfinite(value):
        raise NumericalError("host objective is non-finite")
    return float(value)


def _statistics(cache: ShardCache, assignments: np.ndarray) -> dict:
    x = cache.samples
    mass = assignments.sum(axis=0)
    rot_first = np.einsum("ni,ind->id", assignments, cache.rotated, optimize=True)
    raw_first = assignments.T @ x
    raw_second = np.einsum("ni,nd,ne->ide", assignments, x, x, optimize=True)
    for arr in (mass, rot_first, raw_first, raw_second):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("host statistics are non-finite")
    return dict(
        cluster_mass=mass,
        rotated_first_moment=rot_first,
        raw_first_moment=raw_first,
        raw_second_moment=raw_second,
    )


def _descend(cache: ShardCache, params: SolveParams, assignments: np.ndarray,
             mu_hat: np.ndarray, host_id: int):
    """Alternate exact a-steps and mu_hat-steps until the objective change
    falls below SWEEP_TOL * (1 + |f|) or MAX_SWEEPS, asserting descent."""

    f = _objective(cache, params, assignments, mu_hat, host_id)
    for _ in range(MAX_SWEEPS):
        costs = assignment_costs(cache, params, mu_hat, host_id)
        labels = np.argmin(costs, axis=1)  # ties resolve to the lowest index
        new_a = np.zeros_like(assignments)
        new_a[np.arange(labels.size), labels] = 1.0
        f_a = _objective(cache, params, new_a, mu_hat, host_id)
        if f_a > f + DESCENT_SLACK * (1.0 + abs(f)):
            raise NumericalError(f"assignment step increased objective: {f} -> {f_a}")
        assignments = new_a

        mu_hat = _mu_step(cache, params, assignments, host_id)
        f_mu = _objective(cache, params, assignments, mu_hat, host_id)
        if f_mu > f_a + DESCENT_SLACK * (1.0 + abs(f_a)):
            raise NumericalError(f"center step increased objective: {f_a} -> {f_mu}")

        if abs(f - f_mu) < SWEEP_TOL * (1.0 + abs(f)):
            f = f_mu
            break
        f = f_mu
    return assignments, mu_hat, f


@lru_cache(maxsize=32)
def _label_table(n_rows: int, n_clusters: int) -> np.ndarray:
    """All hard labelings of n_rows rows, lexicographic order, as an
    (n_clusters^n_rows, n_rows) integer array."""

    table = np.array(
        list(itertools.product(range(n_clusters), repeat=n_rows)), dtype=np.intp
    )
    table.setflags(write=False)
    return table


def _enumerate_exact(cache: ShardCache, params: SolveParams, host_id: int):
    """Exhaustive search over hard assignments for micro shards. The
    objective is linear in a for fixed mu_hat, so some vertex of the
    row-simplices attains the minimum; every vertex is priced at once with
    its exact center step. Ties resolve to the lexicographically first
    labeling (argmin's first occurrence)."""

    n, j = cache.n_rows, cache.n_clusters
    beta = params.beta.beta
    lam_mu = params.duals.lambda_mu[:, host_id, :]
    lam_p = params.duals.lambda_p
    p_t = params.proportions_target
    n_total = params.n_total

    onehot = np.eye(j)[_label_table(n, j)]      # (M, n, J)
    mass = onehot.sum(axis=1)                   # (M, J)
    mu = np.empty((onehot.shape[0], j, beta.shape[1]))
    value = mass @ lam_p / n_total              # (M,)
    for i in range(j):
        a_i = onehot[:, :, i]                   # (M, n)
        y = cache.rotated[i]                    # (n, D)
        s1 = a_i @ y                            # (M, D)
        lo, hi = cache.box_min[i], cache.box_max[i]
        numer = beta[i] * s1 / n_total - 0.5 * lam_mu[i]
        denom = beta[i][None, :] * mass[:, i: i + 1] / n_total
        with np.errstate(divide="ignore", invalid="ignore"):
            interior = np.clip(numer / denom, lo, hi)
        mid = 0.5 * (lo + hi)
        empty = np.where(lam_mu[i] > 0.0, lo, np.where(lam_mu[i] < 0.0, hi, mid))
        mu_i = np.where(mass[:, i: i + 1] > 0.0, interior, empty[None, :])
        mu[:, i, :] = mu_i
        resid_sq = (y[None, :, :] - mu_i[:, None, :]) ** 2
        value += np.einsum("mn,mn->m", a_i, resid_sq @ beta[i]) / n_total
        value -= (s1 @ lam_mu[i]) / (p_t[i] * n_total)
        value += mu_i @ lam_mu[i]
    if not np.all(np.isfinite(value)):
        raise NumericalError("enumerated subproblem values are non-finite")
    best = int(np.argmin(value))
    return onehot[best], mu[best], float(value[best])


def solve_local(cache: ShardCache, params: SolveParams, host_id: int,
                warm_assignments, collect: bool = False) -> LocalSolveResult:
    """Host subproblem solve: exhaustive on micro shards, block-coordinate
    descent otherwise.

    The descent route starts from the warm assignments with centers
    re-derived by a mu_hat-step (centers from a previous round would be stale
    after a rotation update), plus one guard restart whose centers are the
    plain per-cluster shard means (no multiplier shift); the lower of the two
    objectives wins, the warm route on ties. Deterministic throughout.
    """

    a0 = require_valid_assignment(warm_assignments)
    if a0.shape != (cache.n_rows, cache.n_clusters):
        raise ValidationError(
            f"warm assignments shape {a0.shape}, expected {(cache.n_rows, cache.n_clusters)}"
        )

    if cache.n_clusters ** cache.n_rows <= ENUM_LIMIT:
        a_best, mu_best, f_best = _enumerate_exact(cache, params, host_id)
    else:
        mu0 = _mu_step(cache, params, a0, host_id)
        a_best, mu_best, f_best = _descend(cache, params, a0, mu0, host_id)

        lam_mu_k = params.duals.lambda_mu[:, host_id, :]
        if np.any(lam_mu_k != 0.0):
            # restart from multiplier-free shard means; identical to the warm
            # route when all multipliers vanish, so skipped then
            mu_r = _mu_step(cache, params, a0, host_id, with_duals=False)
            a_r, mu_r, f_r = _descend(cache, params, a0, mu_r, host_id)
            if f_r < f_best:
                a_best, mu_best, f_best = a_r, mu_r, f_r

    stats = _statistics(cache, a_best)
    return LocalSolveResult(
        f_star=f_best,
        mu_hat=mu_best,
        local_assignments=a_best if collect else None,
        row_costs=assignment_costs(cache, params, mu_best, host_id) if collect else None,
        **stats,
    )


def evaluate_assignments(cache: ShardCache, params: SolveParams, host_id: int,
                         assignments, collect: bool = False) -> LocalSolveResult:
    """Price a given assignment block without optimizing it: one exact
    mu_hat-step, then the objective and statistics of that point. Used to
    seed a run and to price a repaired primal."""

    a = require_valid_assignment(assignments)
    if a.shape != (cache.n_rows, cache.n_clusters):
        raise ValidationError(
            f"assignments shape {a.shape}, expected {(cache.n_rows, cache.n_clusters)}"
        )
    mu = _mu_step(cache, params, a, host_id)
    f = _objective(cache, params, a, mu, host_id)
    stats = _statistics(cache, a)
    return LocalSolveResult(
        f_star=f,
        mu_hat=mu,
        local_assignments=a if collect else None,
        row_costs=assignment_costs(cache, params, mu, host_id) if collect else None,
        **stats,
    )


def local_dual_terms(result: LocalSolveResult, params: SolveParams):
    """Subgradient pieces reported by a host: the center-consistency residual
    g_mu_id = mu_hat_id - rotated_first_moment_id / (p_i N), and the mass
    fraction g_mass_i = cluster_mass_i / N."""

    p_t = params.proportions_target
    n_total = params.n_total
    g_mu = result.mu_hat - result.rotated_first_moment / (p_t[:, None] * n_total)
    g_mass = result.cluster_mass / n_total
    return g_mu, g_mass


def strip_collected(result: LocalSolveResult) -> LocalSolveResult:
    """Statistics-only view of a result (what default RESULT messages carry)."""

    if result.local_assignments is None and result.row_costs is None:
        return result
    return replace(result, local_assignments=None, row_costs=None)
