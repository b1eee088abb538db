"""Core data model: datasets, shard layouts, soft assignments, mixture moments,
and the coding-cost objective that the whole package minimizes.

The objective for J clusters with proportions p and covariances S_i is

    2*H(p) + sum_i p_i * log det(S_i + sigma_n^2 * I)

with H the natural-log entropy. It is the per-sample description length of a
two-part code (cluster index twice, then the residual under a Gaussian model),
so smaller is better and the additive noise floor sigma_n^2 keeps it finite
for degenerate clusters. All moments are population moments weighted by the
soft assignment matrix; there is no Bessel correction anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

# Feasibility tolerance for row-stochastic assignment matrices.
ROW_SUM_ATOL = 1e-9


def _as_float_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class Dataset:
    """Sample matrix with optional generating labels.

    samples : (N, D) float64, finite.
    labels : optional (N,) int array recording the generating component.
    """

    samples: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        samples = _as_float_matrix(self.samples, "samples")
        object.__setattr__(self, "samples", samples)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (samples.shape[0],):
                raise ValidationError(
                    f"labels shape {labels.shape} does not match {samples.shape[0]} samples"
                )
            object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ShardLayout:
    """Partition of row indices across hosts.

    indices : tuple of 1-D int arrays, one per host. Every host is non-empty,
    the arrays are disjoint, and together they cover range(n_total).
    """

    indices: tuple

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValidationError("shard layout needs at least one host")
        arrays = tuple(np.asarray(ix, dtype=np.int64) for ix in self.indices)
        for k, ix in enumerate(arrays):
            if ix.ndim != 1 or ix.size == 0:
                raise ValidationError(f"host {k} shard is empty or not 1-D")
        merged = np.concatenate(arrays)
        n = merged.size
        seen = np.sort(merged)
        if not np.array_equal(seen, np.arange(n)):
            raise ValidationError("shards must be disjoint and cover all rows exactly once")
        object.__setattr__(self, "indices", arrays)

    @property
    def n_hosts(self) -> int:
        return len(self.indices)

    @property
    def n_total(self) -> int:
        return sum(ix.size for ix in self.indices)

    def shard_sizes(self) -> tuple:
        return tuple(ix.size for ix in self.indices)


@dataclass(frozen=True)
class RegularizationConfig:
    """Additive noise floor sigma_n^2 and the variance floor used inside
    log/det evaluations. sigma_n_sq >= 0, variance_floor > 0."""

    sigma_n_sq: float = 0.0
    variance_floor: float = 1e-12

    def __post_init__(self):
        if not (np.isfinite(self.sigma_n_sq) and self.sigma_n_sq >= 0.0):
            raise ValidationError(f"sigma_n_sq must be finite and >= 0, got {self.sigma_n_sq}")
        if not (np.isfinite(self.variance_floor) and self.variance_floor > 0.0):
            raise ValidationError(f"variance_floor must be finite and > 0, got {self.variance_floor}")


@dataclass(frozen=True)
class ClusterModel:
    """Mixture moments: proportions (J,), means (J, D), covariances (J, D, D).

    Clusters with exactly zero assigned mass are listed in empty_clusters and
    carry zero rows in means/covariances; they contribute nothing to the
    objective.
    """

    proportions: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    empty_clusters: tuple = ()

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        j = p.shape[0]
        if mu.shape[0] != j or cov.shape[0] != j:
            raise ValidationError("proportions, means and covariances disagree on J")
        if cov.shape[1] != cov.shape[2] or cov.shape[1] != mu.shape[1]:
            raise ValidationError("covariances must be (J, D, D) matching means (J, D)")
        for arr, name in ((p, "proportions"), (mu, "means"), (cov, "covariances")):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contain non-finite entries")
        if np.any(p < -ROW_SUM_ATOL) or abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError("proportions must be a probability vector")
        object.__setattr__(self, "proportions", p)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "empty_clusters", tuple(int(i) for i in self.empty_clusters))

    @property
    def n_clusters(self) -> int:
        return self.proportions.shape[0]

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def regularized_covariances(self, reg: RegularizationConfig) -> np.ndarray:
        eye = np.eye(self.n_features)
        return self.covariances + reg.sigma_n_sq * eye[None, :, :]


@dataclass(frozen=True)
class AssignmentDiagnostics:
    """Outcome of validate_assignment: feasibility verdict plus per-row
    evidence for the rows that break it."""

    ok: bool
    n_rows: int
    n_clusters: int
    max_row_sum_error: float
    min_entry: float
    max_entry: float
    cluster_mass: np.ndarray
    bad_rows: tuple = field(default_factory=tuple)


def validate_assignment(assignments, atol: float = ROW_SUM_ATOL) -> AssignmentDiagnostics:
    """Check membership of the feasible set: entries in [0, 1] and every row
    summing to 1, both within atol. Returns diagnostics naming violating rows
    rather than raising; callers that need hard failure check .ok."""

    a = _as_float_matrix(assignments, "assignments")
    row_sums = a.sum(axis=1)
    row_err = np.abs(row_sums - 1.0)
    entry_low = a.min(axis=1)
    entry_high = a.max(axis=1)
    bad = (row_err > atol) | (entry_low < -atol) | (entry_high > 1.0 + atol)
    return AssignmentDiagnostics(
        ok=not bool(bad.any()),
        n_rows=a.shape[0],
        n_clusters=a.shape[1],
        max_row_sum_error=float(row_err.max(initial=0.0)),
        min_entry=float(a.min(initial=0.0)),
        max_entry=float(a.max(initial=0.0)),
        cluster_mass=a.sum(axis=0),
        bad_rows=tuple(int(i) for i in np.flatnonzero(bad)),
    )


def require_valid_assignment(assignments, atol: float = ROW_SUM_ATOL) -> np.ndarray:
    """validate_assignment, but raising ValidationError on failure."""

    a = _as_float_matrix(assignments, "assignments")
    diag = validate_assignment(a, atol=atol)
    if not diag.ok:
        head = diag.bad_rows[:5]
        raise ValidationError(
            f"assignment matrix infeasible: rows {head}"
            f"{'...' if len(diag.bad_rows) > 5 else ''} violate simplex constraints "
            f"(max row-sum error {diag.max_row_sum_error:.3e}, "
            f"entry range [{diag.min_entry:.3e}, {diag.max_entry:.3e}])"
        )
    return a


def entropy(proportions) -> float:
    """Natural-log entropy of a proportion vector; 0*log(0) counts as 0."""

    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError(f"proportions must be 1-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < -1e-12):
        raise ValidationError("proportions must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValidationError(f"proportions sum to {p.sum()}, expected 1")
    p = np.clip(p, 0.0, None)
    nz = p > 0.0
    return float(-(p[nz] * np.log(p[nz])).sum())


def mixture_moments(samples, assignments) -> ClusterModel:
    """Soft-assignment mixture moments.

    For each cluster i with mass m_i = sum_n a_ni: p_i = m_i / N, mean is the
    a-weighted sample mean, covariance the a-weighted population covariance
    about that mean. Zero-mass clusters come back flagged with zero rows.
    """

    x = _as_float_matrix(samples, "samples")
    a = require_valid_assignment(assignments)
    if a.shape[0] != x.shape[0]:
        raise ValidationError(
            f"assignments have {a.shape[0]} rows but samples have {x.shape[0]}"
        )
    n, d = x.shape
    j = a.shape[1]

    mass = a.sum(axis=0)
    proportions = mass / n
    empty = np.flatnonzero(mass <= 0.0)

    means = np.zeros((j, d))
    covariances = np.zeros((j, d, d))
    occupied = np.flatnonzero(mass > 0.0)
    if occupied.size:
        raw_first = a.T @ x  # (J, D)
        raw_second = np.einsum("ni,nd,ne->ide", a, x, x, optimize=True)  # (J, D, D)
        means[occupied] = raw_first[occupied] / mass[occupied, None]
        mu = means[occupied]
        covariances[occupied] = (
            raw_second[occupied] / mass[occupied, None, None]
            - mu[:, :, None] * mu[:, None, :]
        )
        # symmetrize away einsum roundoff
        covariances[occupied] = 0.5 * (
            covariances[occupied] + covariances[occupied].transpose(0, 2, 1)
        )
    return ClusterModel(
        proportions=proportions,
        means=means,
        covariances=covariances,
        empty_clusters=tuple(int(i) for i in empty),
    )


def regularized_log_determinants(model: ClusterModel, reg: RegularizationConfig) -> np.ndarray:
    """log det(S_i + sigma_n^2 I) per cluster, with eigenvalues floored at
    variance_floor. A cluster whose regularized matrix has a materially
    negative eigenvalue signals corrupted moments and raises. Empty clusters
    yield 0 (they never enter the objective)."""

    out = np.zeros(model.n_clusters)
    reg_cov = model.regularized_covariances(reg)
    for i in range(model.n_clusters):
        if i in model.empty_clusters:
            continue
        eigs = np.linalg.eigvalsh(reg_cov[i])
        tol = 1e-8 * max(1.0, float(np.abs(eigs).max()))
        if eigs[0] < -tol:
            raise NumericalError(
                f"cluster {i}: regularized covariance has negative eigenvalue {eigs[0]:.3e}"
            )
        out[i] = float(np.log(np.clip(eigs, reg.variance_floor, None)).sum())
    return out


def coding_objective(model: ClusterModel, reg: RegularizationConfig) -> float:
    """2*H(p) + sum_i p_i log det(S_i + sigma_n^2 I); empty clusters add 0."""

    logdets = regularized_log_determinants(model, reg)
    value = 2.0 * entropy(model.proportions) + float(
        (model.proportions * logdets).sum()
    )
    if not np.isfinite(value):
        raise NumericalError("coding objective is non-finite")
    return value


def model_assignment_scores(samples, means, rotations, beta, log_dets,
                            log_props, active) -> np.ndarray:
    """Per-row description length of assigning each sample to each cluster at
    a fixed model: log det of the regularized covariance plus the squared
    eigenbasis distance weighted by inverse variances, minus twice the log
    proportion. Inactive (empty) clusters score +inf so argmin never picks
    them."""

    x = _as_float_matrix(samples, "samples")
    means = np.asarray(means, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    log_dets = np.asarray(log_dets, dtype=np.float64)
    log_props = np.asarray(log_props, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    scores = np.full((x.shape[0], rotations.shape[0]), np.inf)
    for i in range(rotations.shape[0]):
        if not active[i]:
            continue
        z = (x - means[i]) @ rotations[i].T
        scores[:, i] = log_dets[i] + (beta[i] * z * z).sum(axis=1) \
            - 2.0 * log_props[i]
    return scores


@dataclass(frozen=True)
class SeedingPlan:
    """Reference points for the initial hard split, expressed in a lifted
    second-moment feature space.

    Clusters that differ mainly in covariance overlap heavily in raw
    coordinates, so seeding there collapses them onto one blurred center.
    Lifting each sample to (standardized coordinates, standardized entries of
    their outer product) separates such clusters by orientation and spread,
    and well-spread seeds in that space give a starting split that hard
    assignment refines instead of erasing. The plan stores the normalizers
    together with the seeds so every shard, on any host, maps its rows into
    the identical feature space.
    """

    center: np.ndarray       # (D,) per-coordinate mean
    scale: np.ndarray        # (D,) per-coordinate spread, floored away from 0
    quad_center: np.ndarray  # (D*(D+1)/2,) mean of upper-triangle products
    quad_scale: np.ndarray   # (D*(D+1)/2,) spread of upper-triangle products
    seeds: np.ndarray        # (J, D + D*(D+1)/2) seed rows in lifted space

    def __post_init__(self):
        for name in ("center", "scale", "quad_center", "quad_scale", "seeds"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"seeding plan {name} contains non-finite entries")
        d = self.center.shape[0]
        q = d * (d + 1) // 2
        if self.seeds.ndim != 2 or self.seeds.shape[1] != d + q:
            raise ValidationError(
                f"seeds shape {self.seeds.shape} does not match dimension {d}"
            )

    @property
    def n_clusters(self) -> int:
        return self.seeds.shape[0]

    def features(self, samples) -> np.ndarray:
        """Map raw rows to the lifted feature space of this plan."""

        x = _as_float_matrix(samples, "samples")
        u = (x - self.center) / self.scale
        iu, ju = np.triu_indices(x.shape[1])
        quad = u[:, iu] * u[:, ju]
        quad = (quad - self.quad_center) / self.quad_scale
        return np.hstack([u, quad])

    def assign(self, samples) -> np.ndarray:
        """Hard labels: index of the nearest seed in lifted space."""

        z = self.features(samples)
        d2 = ((z[:, None, :] - self.seeds[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1).astype(np.int64)


def _floored_std(x: np.ndarray) -> np.ndarray:
    return np.clip(x.std(axis=0), 1e-12, None)


def _pick_spread_rows(z: np.ndarray, n_picks: int, rng: np.random.Generator) -> list:
    """Distance-squared-weighted row picks: first uniform, later ones
    proportional to squared distance from the chosen set."""

    picks = [int(rng.integers(z.shape[0]))]
    for _ in range(n_picks - 1):
        d2 = np.min([((z - z[p]) ** 2).sum(axis=1) for p in picks], axis=0)
        total = float(d2.sum())
        if total <= 0.0:  # all rows identical: any row does
            picks.append(int(rng.integers(z.shape[0])))
            continue
        picks.append(int(rng.choice(z.shape[0], p=d2 / total)))
    return picks


def build_seeding_plan(samples, n_clusters: int, rng: np.random.Generator,
                       reg: RegularizationConfig,
                       n_candidates: int = 16,
                       refine_rounds: int = 2) -> SeedingPlan:
    """Fit normalizers on a sample of rows and choose seeds in lifted space.

    Draws n_candidates seed sets by distance-squared-weighted sampling,
    refines each with a few mean-update rounds in lifted space, and keeps the
    set whose hard split of the sample has the lowest coding objective. A
    single draw can split the sample by magnitude instead of shape (extreme
    rows dominate lifted distances), so scoring the splits by the objective
    they are meant to serve is what makes a restart land reliably.
    """

    x = _as_float_matrix(samples, "samples")
    if x.shape[0] < n_clusters:
        raise ValidationError(
            f"need at least {n_clusters} rows to seed, got {x.shape[0]}"
        )
    center = x.mean(axis=0)
    scale = _floored_std(x)
    u = (x - center) / scale
    iu, ju = np.triu_indices(x.shape[1])
    quad_raw = u[:, iu] * u[:, ju]
    quad_center = quad_raw.mean(axis=0)
    quad_scale = _floored_std(quad_raw)
    z = np.hstack([u, (quad_raw - quad_center) / quad_scale])

    best_seeds = None
    best_score = math.inf
    for _ in range(n_candidates):
        picks = _pick_spread_rows(z, n_clusters, rng)
        seeds = z[np.asarray(picks, dtype=np.int64)].copy()
        labels = None
        for _ in range(refine_rounds + 1):
            d2 = ((z[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            for i in range(n_clusters):
                rows = labels == i
                if rows.any():
                    seeds[i] = z[rows].mean(axis=0)
        counts = np.bincount(labels, minlength=n_clusters)
        if np.any(counts == 0):
            score = math.inf
        else:
            split = mixture_moments(x, np.eye(n_clusters)[labels])
            score = coding_objective(split, reg)
        if best_seeds is None or score < best_score:
            best_seeds = seeds
            best_score = score
    return SeedingPlan(
        center=center,
        scale=scale,
        quad_center=quad_center,
        quad_scale=quad_scale,
        seeds=best_seeds,
    )
