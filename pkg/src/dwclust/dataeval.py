"""Synthetic mixture generation, shard placement policies, and evaluation
tools: permutation-minimal miss rate, an exhaustive enumeration oracle for
micro instances, a duality-gap probe across sample sizes, and an
unregularized EM baseline that reports its own failure modes honestly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .coordinator import ClusteringResult, CoordinatorConfig, run_clustering
from .errors import NumericalError, ValidationError
from .model import ClusterModel, Dataset, RegularizationConfig, ShardLayout
from .transport import InProcessTransport

ORACLE_CASE_CAP = 10 ** 6
MISS_RATE_MAX_CLUSTERS = 8


@dataclass(frozen=True)
class MixtureComponent:
    """One generating component: mean (D,), symmetric PSD covariance (D, D)
    (singular allowed), and a positive sample count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError(
                f"component shapes inconsistent: mean {mean.shape}, cov {cov.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValidationError("component parameters must be finite")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValidationError("covariance must be symmetric")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.linalg.eigvalsh(cov).min() < -1e-8 * scale:
            raise ValidationError("covariance must be positive semidefinite")
        if int(self.count) < 1:
            raise ValidationError("component count must be >= 1")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "count", int(self.count))


@dataclass(frozen=True)
class MixtureSpec:
    """Ordered tuple of components; rows are generated grouped in this order."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) == 0:
            raise ValidationError("mixture needs at least one component")
        dims = {c.mean.size for c in comps}
        if len(dims) != 1:
            raise ValidationError("components disagree on dimensionality")
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def n_features(self) -> int:
        return self.components[0].mean.size

    @property
    def n_samples(self) -> int:
        return sum(c.count for c in self.components)

    def with_total(self, n_total: int) -> "MixtureSpec":
        """Same mixture rescaled to n_total samples, original count ratios
        preserved by largest remainder (every component keeps >= 1)."""

        if n_total < self.n_components:
            raise ValidationError("n_total smaller than the number of components")
        weights = np.array([c.count for c in self.components], dtype=np.float64)
        counts = _largest_remainder(weights / weights.sum(), n_total)
        counts = np.maximum(counts, 1)
        while counts.sum() > n_total:
            counts[int(np.argmax(counts))] -= 1
        comps = tuple(
            MixtureComponent(mean=c.mean, cov=c.cov, count=int(n))
            for c, n in zip(self.components, counts)
        )
        return MixtureSpec(components=comps)


def _largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    raw = fractions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def generate_mixture(spec: MixtureSpec, seed: int) -> Dataset:
    """Draw the spec's samples, rows grouped by component in spec order and
    labels recording the generating component. Covariances are factored by
    symmetric eigendecomposition so singular components generate exactly on
    their degenerate support."""

    rng = np.random.default_rng(seed)
    blocks = []
    labels = []
    for idx, comp in enumerate(spec.components):
        w, v = np.linalg.eigh(comp.cov)
        factor = v * np.sqrt(np.clip(w, 0.0, None))[None, :]
        z = rng.standard_normal((comp.count, comp.mean.size))
        blocks.append(comp.mean + z @ factor.T)
        labels.append(np.full(comp.count, idx, dtype=np.int64))
    return Dataset(samples=np.concatenate(blocks, axis=0),
                   labels=np.concatenate(labels))


def shard_dataset(dataset: Dataset, n_hosts: int, policy: str,
                  fractions=None) -> ShardLayout:
    """Row placement across hosts.

    by-cluster: one generating component per host (requires labels and
    n_hosts equal to the number of components). interleaved: round-robin by
    row index. fractions: per-component host shares, a column-stochastic
    (n_hosts, n_components) matrix, split contiguously within each component
    by largest remainder. contiguous: n_hosts equal blocks in row order (the
    label-free stand-in for by-cluster when rows are grouped).
    """

    n = dataset.n_samples
    if n_hosts < 1 or n_hosts > n:
        raise ValidationError(f"n_hosts={n_hosts} incompatible with {n} rows")

    if policy == "interleaved":
        return ShardLayout(indices=tuple(
            np.arange(k, n, n_hosts, dtype=np.int64) for k in range(n_hosts)
        ))

    if policy == "contiguous":
        bounds = np.linspace(0, n, n_hosts + 1).astype(np.int64)
        if np.any(np.diff(bounds) == 0):
            raise ValidationError("contiguous blocks would leave a host empty")
        return ShardLayout(indices=tuple(
            np.arange(bounds[k], bounds[k + 1], dtype=np.int64)
            for k in range(n_hosts)
        ))

    if dataset.labels is None:
        raise ValidationError(f"policy {policy!r} needs generating labels")
    labels = dataset.labels
    components = int(labels.max()) + 1

    if policy == "by-cluster":
        if n_hosts != components:
            raise ValidationError(
                f"by-cluster needs one host per component ({components}), got {n_hosts}"
            )
        return ShardLayout(indices=tuple(
            np.flatnonzero(labels == k).astype(np.int64) for k in range(n_hosts)
        ))

    if policy == "fractions":
        f = np.asarray(fractions, dtype=np.float64)
        if f.shape != (n_hosts, components):
            raise ValidationError(
                f"fractions must be ({n_hosts}, {components}), got {f.shape}"
            )
        if np.any(f < 0.0) or not np.allclose(f.sum(axis=0), 1.0, atol=1e-9):
            raise ValidationError("fraction columns must be non-negative and sum to 1")
        per_host = [[] for _ in range(n_hosts)]
        for c in range(components):
            rows = np.flatnonzero(labels == c)
            counts = _largest_remainder(f[:, c], rows.size)
            offset = 0
            for k in range(n_hosts):
                per_host[k].append(rows[offset:offset + counts[k]])
                offset += counts[k]
        merged = tuple(
            np.concatenate(chunks).astype(np.int64) if chunks else np.empty(0, np.int64)
            for chunks in per_host
        )
        return ShardLayout(indices=merged)

    raise ValidationError(f"unknown shard policy {policy!r}")


@dataclass(frozen=True)
class PipelineResult:
    """run_clustering output plus labels and soft assignments restored to the
    dataset's original row order."""

    result: ClusteringResult
    labels: np.ndarray
    soft_assignments: np.ndarray


def cluster_dataset(dataset: Dataset, layout: ShardLayout,
                    config: CoordinatorConfig) -> PipelineResult:
    """Convenience wrapper: build in-process hosts from the layout, run the
    coordinator, and undo the shard permutation on the outputs."""

    shards = [dataset.samples[ix] for ix in layout.indices]
    transport = InProcessTransport(shards)
    try:
        result = run_clustering(transport, config)
    finally:
        transport.shutdown()
    order = np.concatenate(layout.indices)
    labels = np.empty(dataset.n_samples, dtype=np.int64)
    labels[order] = result.labels
    soft = np.empty_like(result.soft_assignments)
    soft[order] = result.soft_assignments
    return PipelineResult(result=result, labels=labels, soft_assignments=soft)


def miss_rate(predicted, truth) -> float:
    """Fraction of misclassified samples, minimized over all cluster label
    permutations (capped at 8 clusters; the factorial search is exact)."""

    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValidationError(
            f"label vectors must match: {pred.shape} vs {true.shape}"
        )
    if pred.size == 0:
        raise ValidationError("empty label vectors")
    if pred.min() < 0 or true.min() < 0:
        raise ValidationError("labels must be non-negative integers")
    j = int(max(pred.max(), true.max())) + 1
    if j > MISS_RATE_MAX_CLUSTERS:
        raise ValidationError(
            f"miss_rate supports up to {MISS_RATE_MAX_CLUSTERS} clusters, got {j}"
        )
    best = pred.size
    for perm in itertools.permutations(range(j)):
        table = np.asarray(perm, dtype=np.int64)
        best = min(best, int((table[pred] != true).sum()))
    return best / pred.size


def brute_force_oracle(samples, n_clusters: int, reg: RegularizationConfig,
                       case_cap: int = ORACLE_CASE_CAP):
    """Global minimum of the coding objective over all hard assignments by
    exhaustive enumeration (J^N cases, capped). Returns (labels, objective);
    ties resolve to the first case in lexicographic label order."""

    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n_clusters ** n > case_cap:
        raise ValidationError(
            f"{n_clusters}^{n} assignments exceed the enumeration cap {case_cap}"
        )
    cases = np.array(
        list(itertools.product(range(n_clusters), repeat=n)), dtype=np.int64
    )
    m = cases.shape[0]
    onehot = np.zeros((m, n, n_clusters))
    onehot[np.arange(m)[:, None], np.arange(n)[None, :], cases] = 1.0

    mass = onehot.sum(axis=1)                                   # (M, J)
    first = np.einsum("mnj,nd->mjd", onehot, x, optimize=True)  # (M, J, D)
    outer = x[:, :, None] * x[:, None, :]                       # (N, D, D)
    second = np.einsum("mnj,nde->mjde", onehot, outer, optimize=True)

    safe_mass = np.where(mass > 0.0, mass, 1.0)
    means = first / safe_mass[:, :, None]
    covs = second / safe_mass[:, :, None, None] \
        - means[:, :, :, None] * means[:, :, None, :]
    covs = 0.5 * (covs + covs.transpose(0, 1, 3, 2))
    covs += reg.sigma_n_sq * np.eye(d)[None, None, :, :]

    eigs = np.linalg.eigvalsh(covs)                             # (M, J, D)
    logdets = np.log(np.clip(eigs, reg.variance_floor, None)).sum(axis=-1)

    p = mass / n
    occupied = mass > 0.0
    ent = -np.where(occupied, p * np.log(np.where(occupied, p, 1.0)), 0.0).sum(axis=1)
    values = 2.0 * ent + np.where(occupied, p * logdets, 0.0).sum(axis=1)
    if not np.all(np.isfinite(values)):
        raise NumericalError("oracle objective produced non-finite values")

    best = int(np.argmin(values))
    return cases[best].copy(), float(values[best])


@dataclass(frozen=True)
class GapEntry:
    n_samples: int
    primal_value: float
    dual_value: float
    relative_gap: float


@dataclass(frozen=True)
class GapReport:
    entries: tuple


def duality_gap_probe(spec: MixtureSpec, sizes, seed: int,
                      config: CoordinatorConfig) -> GapReport:
    """Run the full pipeline at several sample sizes of the same mixture
    (by-cluster placement, one host per component) and report the final
    quadratic primal value, dual bound, and relative gap per size."""

    entries = []
    child_seeds = np.random.SeedSequence(seed).generate_state(len(list(sizes)))
    for n_total, child in zip(sizes, child_seeds):
        sized = spec.with_total(int(n_total))
        data = generate_mixture(sized, seed=int(child))
        layout = shard_dataset(data, sized.n_components, "by-cluster")
        run_config = CoordinatorConfig(
            **{**_config_dict(config), "seed": int(child)}
        )
        outcome = cluster_dataset(data, layout, run_config)
        entries.append(GapEntry(
            n_samples=int(n_total),
            primal_value=outcome.result.primal_value,
            dual_value=outcome.result.dual_value,
            relative_gap=outcome.result.duality_gap_estimate,
        ))
    return GapReport(entries=tuple(entries))


def _config_dict(config: CoordinatorConfig) -> dict:
    return {
        "n_clusters": config.n_clusters,
        "regularization": config.regularization,
        "max_outer_rounds": config.max_outer_rounds,
        "dual_rounds": config.dual_rounds,
        "step_size_initial": config.step_size_initial,
        "tolerance": config.tolerance,
        "proportion_mode": config.proportion_mode,
        "proportion_step": config.proportion_step,
        "proportion_fd_delta": config.proportion_fd_delta,
        "rounding_mode": config.rounding_mode,
        "restarts": config.restarts,
        "seed": config.seed,
        "min_outer_rounds": config.min_outer_rounds,
    }


@dataclass(frozen=True)
class EMBaselineResult:
    converged: bool
    n_iterations: int
    log_likelihood: float
    labels: np.ndarray | None
    model: ClusterModel | None
    failure_reason: str | None = None


def em_baseline(samples, n_clusters: int, seed: int, max_iterations: int = 200,
                tol: float = 1e-6) -> EMBaselineResult:
    """Textbook Gaussian-mixture EM with no covariance regularization,
    deliberately: on degenerate data the responsibilities concentrate, a
    covariance collapses, and the likelihood diverges. That failure is
    reported as converged=False instead of being patched."""

    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    rng = np.random.default_rng(seed)
    means = x[rng.choice(n, size=n_clusters, replace=False)].copy()
    base_cov = np.cov(x, rowvar=False, bias=True).reshape(d, d)
    covs = np.repeat(base_cov[None, :, :], n_clusters, axis=0)
    weights = np.full(n_clusters, 1.0 / n_clusters)

    prev_ll = -np.inf
    for iteration in range(1, max_iterations + 1):
        log_resp = np.empty((n, n_clusters))
        try:
            for i in range(n_clusters):
                sign, logdet = np.linalg.slogdet(covs[i])
                if sign <= 0:
                    raise np.linalg.LinAlgError("non-positive covariance determinant")
                solved = np.linalg.solve(covs[i], (x - means[i]).T).T
                maha = ((x - means[i]) * solved).sum(axis=1)
                log_resp[:, i] = (
                    np.log(weights[i]) - 0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)
                )
        except np.linalg.LinAlgError as exc:
            return EMBaselineResult(False, iteration, float(prev_ll), None, None,
                                    failure_reason=f"singular covariance: {exc}")
        if not np.all(np.isfinite(log_resp)):
            return EMBaselineResult(False, iteration, float(prev_ll), None, None,
                                    failure_reason="non-finite log densities")

        shift = log_resp.max(axis=1, keepdims=True)
        resp = np.exp(log_resp - shift)
        norm = resp.sum(axis=1, keepdims=True)
        ll = float((np.log(norm[:, 0]) + shift[:, 0]).sum())
        resp /= norm

        mass = resp.sum(axis=0)
        if np.any(mass <= 0.0):
            return EMBaselineResult(False, iteration, float(prev_ll), None, None,
                                    failure_reason="a component lost all mass")
        weights = mass / n
        means = (resp.T @ x) / mass[:, None]
        for i in range(n_clusters):
            centered = x - means[i]
            covs[i] = (resp[:, i, None] * centered).T @ centered / mass[i]
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            return EMBaselineResult(False, iteration, float(prev_ll), None, None,
                                    failure_reason="non-finite parameters")

        if np.isfinite(prev_ll) and abs(ll - prev_ll) < tol * (1.0 + abs(ll)):
            labels = np.argmax(resp, axis=1).astype(np.int64)
            model = ClusterModel(proportions=weights, means=means, covariances=covs)
            return EMBaselineResult(True, iteration, ll, labels, model)
        prev_ll = ll

    labels = np.argmax(resp, axis=1).astype(np.int64)
    model = ClusterModel(proportions=weights, means=means, covariances=covs)
    return EMBaselineResult(False, max_iterations, float(prev_ll), labels, model,
                            failure_reason="iteration cap reached")
