"""Coordinator: drives the outer bounding loop and the inner dual rounds
against a set of hosts, recovers feasible assignments, and rounds them to
labels.

Each restart starts from a hard split seeded in a lifted second-moment
feature space (hosts rebuild it locally from a broadcast plan, so no
assignment matrix travels). Each outer round then rotates every cluster into
the eigenbasis of its regularized covariance, re-linearizes the log objective
into per-coordinate weights, runs a fixed number of dual subgradient rounds
over the decomposed per-host problems, and evaluates the candidate model of
the best inner round. Candidates are adopted only if they do not increase the
coding objective, so the reported trace is non-increasing even though the
inner solver is approximate. Every restart ends with a collect-enabled
recovery phase that materializes three assignment candidates (the ergodic
average, the best single round, and the adopted model's own cheapest-cluster
split), repairs cluster masses row-by-row, prices each exactly, and keeps the
best. The reported primal/dual pair is certified: the winner is priced under
the recovery phase's best multipliers and the dual is re-tightened by one
descent pass from the winner itself, so the gap estimate cannot go negative
beyond floating-point noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .localsolver import DualVariables, SolveParams
from .model import (
    ClusterModel,
    RegularizationConfig,
    build_seeding_plan,
    coding_objective,
    mixture_moments,
    require_valid_assignment,
)
from .rotation import (
    BetaWeights,
    RotationSet,
    beta_from_variances,
    diagonalize,
    haar_rotations,
)
from .transport import Transport, broadcast_and_collect, seeding_plan_to_payload

ADOPT_SLACK = 1e-12
MASS_ATOL = 1e-9


@dataclass(frozen=True)
class CoordinatorConfig:
    """Knobs for a clustering run. Defaults are the reference settings used
    by the experiment suite; seeds are mandatory everywhere, so identical
    (data, config) pairs reproduce identical results bit-for-bit."""

    n_clusters: int = 2
    regularization: RegularizationConfig = field(default_factory=RegularizationConfig)
    max_outer_rounds: int = 50
    dual_rounds: int = 30
    step_size_initial: float = 1.0
    tolerance: float = 1e-6
    proportion_mode: str = "fixed-uniform"
    proportion_step: float = 0.05
    proportion_fd_delta: float = 0.01
    rounding_mode: str = "randomized"
    restarts: int = 3
    seed: int = 0
    min_outer_rounds: int = 3

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValidationError("n_clusters must be >= 2 (a single cluster is degenerate)")
        if self.max_outer_rounds < 1 or self.dual_rounds < 1 or self.restarts < 1:
            raise ValidationError("round and restart counts must be >= 1")
        if self.step_size_initial <= 0.0 or self.tolerance <= 0.0:
            raise ValidationError("step size and tolerance must be positive")
        if self.proportion_mode not in ("fixed-uniform", "optimize"):
            raise ValidationError(f"unknown proportion_mode {self.proportion_mode!r}")
        if self.rounding_mode not in ("randomized", "argmax"):
            raise ValidationError(f"unknown rounding_mode {self.rounding_mode!r}")


@dataclass(frozen=True)
class TraceRecord:
    """One outer round: adopted coding objective, the candidate's quadratic
    primal estimate (mass-repaired statistics priced at the constraint-implied
    centers), the round's best dual value, and their relative gap. The
    estimate prices centers without the per-host box, so the per-round gap can
    dip slightly negative; the certified pair lives on the final result."""

    outer_round: int
    objective: float
    primal_value: float
    dual_value: float
    gap: float


@dataclass(frozen=True)
class ClusteringResult:
    """Final output of run_clustering, in host-concatenated row order.

    primal_value is the Lagrangian value of the materialized assignments under
    the recovery phase's best multipliers (a feasible point, exact center
    step per host); dual_value keeps, per host, the better of that round's
    optimum and a descent pass started from those same assignments. The first
    certifiably upper-bounds the second, so duality_gap_estimate is
    non-negative up to floating-point noise."""

    labels: np.ndarray
    soft_assignments: np.ndarray
    model: ClusterModel
    objective: float
    primal_value: float
    dual_value: float
    duality_gap_estimate: float
    proportions_target: np.ndarray
    n_outer_rounds: int
    restart_index: int
    trace: tuple


@dataclass(frozen=True)
class _HostStats:
    """Moment statistics of one host's assignment block; linear in the
    assignments, which is what makes averaging and repairing exact."""

    mass: np.ndarray        # (J,)
    raw_first: np.ndarray   # (J, D)
    raw_second: np.ndarray  # (J, D, D)


def uniform_proportions(n_clusters: int) -> np.ndarray:
    return np.full(n_clusters, 1.0 / n_clusters)


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""

    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u * idx > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.clip(v - theta, 0.0, None)


def initialize_state(sample_rows, config: CoordinatorConfig,
                     rng: np.random.Generator):
    """Seeded start from a summary of the data: a hard split of the pooled
    sample rows (one-hot nearest seed in lifted feature space) together with
    one Haar-random rotation per cluster, plus the seeding plan itself so
    hosts can rebuild the same split on their full shards.

    The random rotations give callers a symmetry-breaking pricing basis for
    the degenerate case where no usable model exists yet; the main loop
    re-derives rotations from the seeded model right away.
    """

    sample_rows = np.asarray(sample_rows, dtype=np.float64)
    plan = build_seeding_plan(sample_rows, config.n_clusters, rng,
                              config.regularization)
    assignments = np.eye(config.n_clusters)[plan.assign(sample_rows)]
    rotations = haar_rotations(config.n_clusters, sample_rows.shape[1], rng)
    return assignments, rotations, plan


def dual_step(duals: DualVariables, results, params: SolveParams, t: int,
              config: CoordinatorConfig) -> DualVariables:
    """Subgradient update with the alpha_0 / sqrt(t) schedule.

    The center-consistency step is scaled per coordinate by the curvature
    2 * beta_id * mass_ik / N of the inner problem, which makes the default
    step size dimensionless (a unit step solves the fixed-assignment dual
    exactly); the proportion step uses the raw residual, whose units are
    already mass fractions.
    """

    alpha = config.step_size_initial / math.sqrt(t)
    beta = params.beta.beta
    p_t = params.proportions_target
    n_total = params.n_total

    lam_mu = duals.lambda_mu.copy()
    total_mass = np.zeros(beta.shape[0])
    for k, res in enumerate(results):
        g_mu = res.mu_hat - res.rotated_first_moment / (p_t[:, None] * n_total)
        scale = 2.0 * beta * (res.cluster_mass[:, None] / n_total)
        lam_mu[:, k, :] += alpha * scale * g_mu
        total_mass += res.cluster_mass
    lam_p = duals.lambda_p + alpha * (total_mass / n_total - p_t)
    new = DualVariables(lambda_mu=lam_mu, lambda_p=lam_p)
    return new


def dual_value(results, params: SolveParams) -> float:
    """Lower bound from one dual round: sum of host optima minus the
    proportion multipliers' offset, valid for the multipliers the hosts
    actually solved with."""

    total = sum(res.f_star for res in results)
    total -= float(params.duals.lambda_p @ params.proportions_target)
    if not np.isfinite(total):
        raise NumericalError("dual value is non-finite")
    return float(total)


def recover_primal(history, proportions_target, config: CoordinatorConfig,
                   row_costs=None) -> np.ndarray:
    """Feasible assignments from a dual-round history.

    Averages the last ceil(dual_rounds / 2) matrices, then repairs cluster
    masses to exactly p_i * N by greedily moving mass along rows: cheapest
    rows first by the cost difference (recipient minus donor) when per-row
    costs are given, else by how little the row favors the donor already.
    The result is row-stochastic with masses within 1e-9 of target.
    """

    if len(history) == 0:
        raise ValidationError("empty result history")
    window = min(len(history), math.ceil(config.dual_rounds / 2))
    stacked = np.stack([np.asarray(h, dtype=np.float64) for h in history[-window:]])
    avg = require_valid_assignment(stacked.mean(axis=0)).copy()

    n, j = avg.shape
    p_t = np.asarray(proportions_target, dtype=np.float64)
    if p_t.shape != (j,):
        raise ValidationError("proportions_target does not match history width")
    targets = p_t * n

    masses = avg.sum(axis=0)
    for donor in range(j):
        surplus = masses[donor] - targets[donor]
        if surplus <= MASS_ATOL:
            continue
        for recipient in range(j):
            deficit = targets[recipient] - masses[recipient]
            if deficit <= MASS_ATOL or recipient == donor:
                continue
            move_total = min(surplus, deficit)
            if row_costs is not None:
                penalty = row_costs[:, recipient] - row_costs[:, donor]
            else:
                penalty = avg[:, donor] - avg[:, recipient]
            order = np.argsort(penalty, kind="stable")
            for row in order:
                if move_total <= MASS_ATOL:
                    break
                available = avg[row, donor]
                if available <= 0.0:
                    continue
                delta = min(available, move_total)
                avg[row, donor] -= delta
                avg[row, recipient] += delta
                move_total -= delta
                surplus -= delta
            masses = avg.sum(axis=0)
            if surplus <= MASS_ATOL:
                break

    masses = avg.sum(axis=0)
    if np.abs(masses - targets).max() > MASS_ATOL:
        raise NumericalError(
            f"mass repair failed: residual {np.abs(masses - targets).max():.3e}"
        )
    return require_valid_assignment(avg)


def round_assignments(soft_assignments, mode: str, seed: int) -> np.ndarray:
    """Labels from soft assignments: seeded categorical draw per row, or
    argmax with ties to the lowest index."""

    a = require_valid_assignment(soft_assignments)
    if mode == "argmax":
        return np.argmax(a, axis=1).astype(np.int64)
    if mode != "randomized":
        raise ValidationError(f"unknown rounding mode {mode!r}")
    rng = np.random.default_rng(seed)
    u = rng.random(a.shape[0])
    cum = np.cumsum(a, axis=1)
    cum /= cum[:, -1:]
    return np.asarray((cum > u[:, None]).argmax(axis=1), dtype=np.int64)


# ---------------------------------------------------------------------------
# statistics plumbing


def _stats_of(result) -> _HostStats:
    return _HostStats(
        mass=result.cluster_mass.copy(),
        raw_first=result.raw_first_moment.copy(),
        raw_second=result.raw_second_moment.copy(),
    )


def _repair_matrix(masses: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Column-stochastic J x J map that moves surplus cluster mass to
    deficit clusters proportionally; applying it to every assignment row
    hits the targets exactly while keeping rows on the simplex."""

    j = masses.size
    r = np.eye(j)
    surplus = masses - targets
    donors = np.flatnonzero(surplus > MASS_ATOL)
    recipients = np.flatnonzero(surplus < -MASS_ATOL)
    if donors.size == 0 or recipients.size == 0:
        return r
    total_deficit = float(-surplus[recipients].sum())
    weights = -surplus[recipients] / total_deficit
    for i in donors:
        f_i = surplus[i] / masses[i]
        r[i, i] = 1.0 - f_i
        r[recipients, i] = f_i * weights
    return r


def _apply_repair(stats, repair: np.ndarray):
    return [
        _HostStats(
            mass=repair @ st.mass,
            raw_first=np.einsum("ji,id->jd", repair, st.raw_first),
            raw_second=np.einsum("ji,ide->jde", repair, st.raw_second),
        )
        for st in stats
    ]


def _model_from_stats(stats, n_total: int) -> ClusterModel:
    mass = sum(st.mass for st in stats)
    raw_first = sum(st.raw_first for st in stats)
    raw_second = sum(st.raw_second for st in stats)
    j, d = raw_first.shape
    proportions = mass / n_total
    means = np.zeros((j, d))
    covs = np.zeros((j, d, d))
    empty = []
    for i in range(j):
        if mass[i] <= 0.0:
            empty.append(i)
            continue
        means[i] = raw_first[i] / mass[i]
        cov = raw_second[i] / mass[i] - np.outer(means[i], means[i])
        covs[i] = 0.5 * (cov + cov.T)
    return ClusterModel(
        proportions=np.clip(proportions, 0.0, None) / max(proportions.sum(), 1e-300),
        means=means,
        covariances=covs,
        empty_clusters=tuple(empty),
    )


def _quadratic_primal(stats, rotation_set: RotationSet, beta: BetaWeights,
                      proportions_target: np.ndarray, n_total: int) -> float:
    """Quadratic objective of the feasible point implied by the statistics:
    centers fixed at the coupling-constraint values, so this upper-bounds the
    decomposed problem's optimum and pairs with the round's dual value."""

    b = beta.beta
    total = 0.0
    for st in stats:
        for i in range(b.shape[0]):
            a_i = rotation_set.rotations[i]
            s1r = a_i @ st.raw_first[i]
            s2r = np.einsum("de,ef,df->d", a_i, st.raw_second[i], a_i)
            c = s1r / (proportions_target[i] * n_total)
            total += float(b[i] @ (s2r - 2.0 * c * s1r + c * c * st.mass[i])) / n_total
    if not np.isfinite(total):
        raise NumericalError("quadratic primal is non-finite")
    return total


# ---------------------------------------------------------------------------
# the run itself


class _RoundCounter:
    def __init__(self):
        self.value = 0

    def next(self) -> int:
        self.value += 1
        return self.value


@dataclass
class _PhaseOutcome:
    best_dual: float
    best_duals: DualVariables | None   # multipliers the best round solved with
    best_fstars: list | None           # that round's per-host optima
    window_stats: list     # per in-window round: list of per-host _HostStats
    history: list          # collected global assignment matrices, round order
    last_costs: np.ndarray | None


def _run_dual_phase(transport: Transport, counter: _RoundCounter,
                    rotation_set: RotationSet, beta: BetaWeights,
                    p_target: np.ndarray, n_total: int, slices,
                    config: CoordinatorConfig, collect: bool,
                    first_solve_extra: dict | None = None) -> _PhaseOutcome:
    """T dual subgradient rounds from zero multipliers. Statistics of the
    last ceil(T/2) rounds are kept per round for candidate selection; when
    collecting, those rounds also return per-row assignments (and the last
    round row costs). first_solve_extra, if given, is merged into the first
    round's SOLVE payload (used to ship the seeding plan once)."""

    t_rounds = config.dual_rounds
    window = math.ceil(t_rounds / 2)
    duals = DualVariables.zeros(beta.beta.shape[0], transport.n_hosts,
                                beta.beta.shape[1])
    best_dual = -math.inf
    best_duals = None
    best_fstars = None
    window_stats = []
    history = []
    last_costs = None
    for t in range(1, t_rounds + 1):
        in_window = t > t_rounds - window
        params = SolveParams(
            round_id=counter.next(),
            rotation_set=rotation_set,
            beta=beta,
            proportions_target=p_target,
            duals=duals,
            n_total=n_total,
        )
        want_rows = collect and in_window
        payload = {"collect": want_rows}
        if t == 1 and first_solve_extra:
            payload.update(first_solve_extra)
        results = broadcast_and_collect(transport, params, solve_payload=payload)
        round_dual = dual_value(results, params)
        if round_dual > best_dual:
            best_dual = round_dual
            best_duals = duals
            best_fstars = [res.f_star for res in results]
        if in_window:
            window_stats.append([_stats_of(res) for res in results])
            if want_rows:
                history.append(np.concatenate(
                    [res.local_assignments for res in results], axis=0
                ))
                if t == t_rounds:
                    last_costs = np.concatenate(
                        [res.row_costs for res in results], axis=0
                    )
        duals = dual_step(duals, results, params, t, config)
    return _PhaseOutcome(
        best_dual=best_dual,
        best_duals=best_duals,
        best_fstars=best_fstars,
        window_stats=window_stats,
        history=history,
        last_costs=last_costs,
    )


def _evaluate_global(transport: Transport, counter: _RoundCounter,
                     rotation_set: RotationSet, beta: BetaWeights,
                     p_target: np.ndarray, n_total: int, slices,
                     assignments: np.ndarray, duals: DualVariables | None = None,
                     refine: bool = False):
    """Price a full assignment matrix: ship each host its block, return the
    per-host (statistics, results). Hosts take one exact center step given the
    block, so under the supplied multipliers the summed f_star is the
    Lagrangian value of a feasible point. With refine=True the hosts instead
    descend from the block, which can only lower each f_star."""

    params = SolveParams(
        round_id=counter.next(),
        rotation_set=rotation_set,
        beta=beta,
        proportions_target=p_target,
        duals=duals if duals is not None else DualVariables.zeros(
            beta.beta.shape[0], transport.n_hosts, beta.beta.shape[1]),
        n_total=n_total,
    )
    payloads = [
        {"assignments": assignments[sl].tolist(), "evaluate_only": not refine}
        for sl in slices
    ]
    results = broadcast_and_collect(transport, params, per_host_solve=payloads)
    return [_stats_of(res) for res in results], results


def _model_assign_package(model: ClusterModel, rotation_set: RotationSet,
                          beta: BetaWeights, reg: RegularizationConfig) -> dict:
    floored = np.clip(rotation_set.rotated_variances, reg.variance_floor, None)
    active = [int(i not in model.empty_clusters)
              for i in range(model.n_clusters)]
    log_props = np.where(
        np.asarray(active, dtype=bool),
        np.log(np.clip(model.proportions, 1e-300, None)),
        0.0,
    )
    return {
        "means": model.means.tolist(),
        "rotations": rotation_set.rotations.tolist(),
        "beta": beta.beta.tolist(),
        "log_dets": np.log(floored).sum(axis=1).tolist(),
        "log_props": log_props.tolist(),
        "active": active,
    }


def _materialize_from_model(transport: Transport, counter: _RoundCounter,
                            rotation_set: RotationSet, beta: BetaWeights,
                            p_target: np.ndarray, n_total: int,
                            model: ClusterModel, reg: RegularizationConfig):
    """One-hot assignments of every row to its cheapest cluster under the
    model's description-length scores, computed host-side from a broadcast
    model package and collected in host order; returns (assignments, scores)
    so a mass repair can move the least-committed rows."""

    params = SolveParams(
        round_id=counter.next(),
        rotation_set=rotation_set,
        beta=beta,
        proportions_target=p_target,
        duals=DualVariables.zeros(beta.beta.shape[0], transport.n_hosts,
                                  beta.beta.shape[1]),
        n_total=n_total,
    )
    payload = {
        "assign_model": _model_assign_package(model, rotation_set, beta, reg),
        "evaluate_only": True,
        "collect": True,
    }
    results = broadcast_and_collect(transport, params, solve_payload=payload)
    split = np.concatenate([res.local_assignments for res in results], axis=0)
    scores = np.concatenate([res.row_costs for res in results], axis=0)
    return split, scores


def _best_window_round(window_stats, n_total, reg):
    """Pick the in-window dual round whose raw statistics give the lowest
    coding objective (ties break to the earliest round).

    The raw per-round assignments are row-stochastic, hence feasible for the
    outer problem; averaging rounds or repairing masses first blurs a sharp
    split across clusters, so selection works on each round as-is.
    """

    best = None
    for idx, stats in enumerate(window_stats):
        model = _model_from_stats(stats, n_total)
        objective = coding_objective(model, reg)
        if best is None or objective < best[0]:
            best = (objective, model, stats, idx)
    return best


def _feasible_quadratic(stats, rotation_set, beta, p_target, n_total):
    """Quadratic primal value of the statistics after proportional mass
    repair onto the target proportions; pairs with the phase's dual bound."""

    masses = sum(st.mass for st in stats)
    repaired = _apply_repair(stats, _repair_matrix(masses, p_target * n_total))
    return _quadratic_primal(repaired, rotation_set, beta, p_target, n_total)


def _restricted_value(transport, counter, model, p_probe, n_total, slices,
                      config):
    """Coding objective of the best inner round after one dual phase at probe
    proportions; used by the finite-difference proportion step."""

    reg = config.regularization
    rset = diagonalize(model, reg)
    beta = beta_from_variances(rset, reg)
    phase = _run_dual_phase(transport, counter, rset, beta, p_probe, n_total,
                            slices, config, collect=False)
    value, _, _, _ = _best_window_round(phase.window_stats, n_total, reg)
    return value


def optimize_proportions(transport, counter, model, p_target, n_total, slices,
                         config: CoordinatorConfig):
    """One projected finite-difference gradient step on the restricted
    optimum over the simplex, with the floor p_i >= 1 / (10 J). Probes
    re-solve the inner problem at perturbed proportions renormalized onto
    the simplex (the raw perturbation leaves the feasible set)."""

    j = p_target.size
    delta = config.proportion_fd_delta
    grad = np.zeros(j)
    for i in range(j):
        plus = p_target.copy()
        plus[i] += delta
        plus /= plus.sum()
        minus = np.clip(p_target.copy(), delta / 2 + 1e-9, None)
        minus[i] -= delta / 2
        minus /= minus.sum()
        g_plus = _restricted_value(transport, counter, model, plus, n_total,
                                   slices, config)
        g_minus = _restricted_value(transport, counter, model, minus, n_total,
                                    slices, config)
        grad[i] = (g_plus - g_minus) / (delta + delta / 2)
    stepped = project_to_simplex(p_target - config.proportion_step * grad)
    floor = 1.0 / (10.0 * j)
    stepped = np.clip(stepped, floor, None)
    return stepped / stepped.sum()


def _shard_slices(sizes):
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [slice(int(offsets[k]), int(offsets[k + 1])) for k in range(len(sizes))]


def _single_restart(transport: Transport, counter: _RoundCounter, n_total: int,
                    n_features: int, slices, sample_rows,
                    config: CoordinatorConfig, restart_index: int,
                    seed: int) -> ClusteringResult:
    reg = config.regularization
    j = config.n_clusters
    rng = np.random.default_rng(seed)
    a0, _, plan = initialize_state(sample_rows, config, rng)
    p_target = uniform_proportions(j)

    # model implied by the seeded split of the pooled sample; the first outer
    # round prices in its eigenbasis and the first adopted candidate replaces
    # it with a full-data model
    model = mixture_moments(sample_rows, a0)
    objective = math.inf

    seed_payload = {"seed_assign": seeding_plan_to_payload(plan)}
    trace = []
    for outer in range(1, config.max_outer_rounds + 1):
        rotation_set = diagonalize(model, reg)
        beta = beta_from_variances(rotation_set, reg)
        phase = _run_dual_phase(transport, counter, rotation_set, beta,
                                p_target, n_total, slices, config,
                                collect=False,
                                first_solve_extra=seed_payload if outer == 1 else None)
        cand_obj, cand_model, cand_stats, _ = _best_window_round(
            phase.window_stats, n_total, reg
        )
        primal_quad = _feasible_quadratic(cand_stats, rotation_set, beta,
                                          p_target, n_total)
        gap = (primal_quad - phase.best_dual) / (1.0 + abs(primal_quad))

        previous = objective
        if cand_obj <= objective + ADOPT_SLACK * (1.0 + abs(objective)):
            model = cand_model
            objective = cand_obj
        trace.append(TraceRecord(
            outer_round=outer,
            objective=objective,
            primal_value=primal_quad,
            dual_value=phase.best_dual,
            gap=gap,
        ))

        if config.proportion_mode == "optimize":
            p_target = optimize_proportions(transport, counter, model,
                                            p_target, n_total, slices, config)

        rel_change = abs(previous - objective) / (1.0 + abs(previous))
        if outer >= config.min_outer_rounds and rel_change < config.tolerance:
            break

    # final recovery phase: materialize the ergodic average, the best single
    # round, and the adopted model's own cheapest-cluster split; repair
    # masses row-by-row, price each exactly, keep the best
    rotation_set = diagonalize(model, reg)
    beta = beta_from_variances(rotation_set, reg)
    phase = _run_dual_phase(transport, counter, rotation_set, beta, p_target,
                            n_total, slices, config, collect=True)
    _, _, _, best_idx = _best_window_round(phase.window_stats, n_total, reg)
    candidates = [recover_primal(phase.history, p_target, config,
                                 row_costs=phase.last_costs)]
    if len(phase.history) > 1:
        candidates.append(recover_primal([phase.history[best_idx]], p_target,
                                         config, row_costs=phase.last_costs))
    model_split, model_scores = _materialize_from_model(
        transport, counter, rotation_set, beta, p_target, n_total, model, reg
    )
    candidates.append(recover_primal([model_split], p_target, config,
                                     row_costs=model_scores))

    soft = final_model = final_obj = final_results = None
    for candidate in candidates:
        stats, results = _evaluate_global(transport, counter, rotation_set,
                                          beta, p_target, n_total, slices,
                                          candidate, duals=phase.best_duals)
        cand_model = _model_from_stats(stats, n_total)
        cand_obj = coding_objective(cand_model, reg)
        if final_obj is None or cand_obj < final_obj:
            soft, final_model, final_obj, final_results = (
                candidate, cand_model, cand_obj, results
            )

    # The winner was priced with one exact center step under the best round's
    # multipliers, so its summed f_star is the Lagrangian value of a feasible
    # point there: a certified upper bound on that round's dual value. One
    # more descent pass from the winner can only find equal or better host
    # optima, so pairing the evaluation with the refined dual keeps the
    # reported gap honest and non-negative even when block-coordinate descent
    # had stalled above it during the phase.
    p_offset = float(phase.best_duals.lambda_p @ p_target)
    final_primal = sum(res.f_star for res in final_results) - p_offset
    _, refined = _evaluate_global(transport, counter, rotation_set, beta,
                                  p_target, n_total, slices, soft,
                                  duals=phase.best_duals, refine=True)
    final_dual = sum(
        min(held, res.f_star) for held, res in zip(phase.best_fstars, refined)
    ) - p_offset
    final_gap = (final_primal - final_dual) / (1.0 + abs(final_primal))

    # rounding gets its own deterministic stream, one step past the restart seed
    labels = round_assignments(soft, config.rounding_mode, seed=seed + 1)

    return ClusteringResult(
        labels=labels,
        soft_assignments=soft,
        model=final_model,
        objective=final_obj,
        primal_value=final_primal,
        dual_value=final_dual,
        duality_gap_estimate=final_gap,
        proportions_target=p_target,
        n_outer_rounds=len(trace),
        restart_index=restart_index,
        trace=tuple(trace),
    )


def run_clustering(transport: Transport, config: CoordinatorConfig) -> ClusteringResult:
    """Full run over an already-constructed transport: handshake, restarts,
    best result by coding objective (earliest restart wins ties). The caller
    owns transport shutdown. Row order of labels and soft assignments is
    host-concatenation order."""

    infos = transport.start()
    sizes = [s for s, _, _ in infos]
    dims = {d for _, d, _ in infos}
    if len(dims) != 1:
        raise ValidationError(f"hosts disagree on dimensionality: {sorted(dims)}")
    n_features = dims.pop()
    n_total = int(sum(sizes))
    if n_total < config.n_clusters:
        raise ValidationError("need at least as many samples as clusters")
    sample_rows = np.concatenate([sample for _, _, sample in infos], axis=0)

    slices = _shard_slices(sizes)
    counter = _RoundCounter()
    seeds = np.random.SeedSequence(config.seed).generate_state(config.restarts)

    best: ClusteringResult | None = None
    for r in range(config.restarts):
        result = _single_restart(transport, counter, n_total, n_features,
                                 slices, sample_rows, config, r, int(seeds[r]))
        if best is None or result.objective < best.objective:
            best = result
    return best
