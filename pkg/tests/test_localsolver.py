"""Host subproblem: shard rotation caches, per-row costs, the exact solve
(enumeration on micro shards, block-coordinate descent above), pricing of
fixed assignments, and the reported subgradient pieces.

Reference values come from helpers.py, which recomputes everything from the
raw formula with plain loops.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwclust.errors import ValidationError
from dwclust.localsolver import (
    ENUM_LIMIT,
    DualVariables,
    LocalSolveResult,
    SolveParams,
    assignment_costs,
    evaluate_assignments,
    local_dual_terms,
    solve_local,
    strip_collected,
    transform_shard,
)
from dwclust.model import RegularizationConfig
from dwclust.rotation import BetaWeights, RotationSet, diagonalize
from helpers import (
    best_center_reference,
    exhaustive_minimum_reference,
    host_objective_reference,
    random_subproblem,
)
from test_rotation import single_cluster_model


def identity_rotation_set(n_clusters, n_features) -> RotationSet:
    return RotationSet(
        rotations=np.broadcast_to(np.eye(n_features),
                                  (n_clusters, n_features, n_features)).copy(),
        rotated_variances=np.ones((n_clusters, n_features)),
    )


def plain_params(n_clusters, n_features, n_hosts=1, n_total=1, beta=None,
                 lambda_mu=None, lambda_p=None, proportions=None,
                 rotation_set=None, round_id=0) -> SolveParams:
    j, d = n_clusters, n_features
    return SolveParams(
        round_id=round_id,
        rotation_set=rotation_set or identity_rotation_set(j, d),
        beta=BetaWeights(beta=np.ones((j, d)) if beta is None else beta),
        proportions_target=(np.full(j, 1.0 / j) if proportions is None
                            else proportions),
        duals=DualVariables(
            lambda_mu=np.zeros((j, n_hosts, d)) if lambda_mu is None
            else lambda_mu,
            lambda_p=np.zeros(j) if lambda_p is None else lambda_p,
        ),
        n_total=n_total,
    )


# ---------------------------------------------------------------------------
# containers


def test_dual_variables_shape_checks():
    DualVariables.zeros(2, 3, 4)
    with pytest.raises(ValidationError):
        DualVariables(lambda_mu=np.zeros((2, 3)), lambda_p=np.zeros(2))
    with pytest.raises(ValidationError):
        DualVariables(lambda_mu=np.zeros((2, 3, 4)), lambda_p=np.zeros(3))
    with pytest.raises(ValidationError):
        DualVariables(lambda_mu=np.full((1, 1, 1), np.inf),
                      lambda_p=np.zeros(1))


def test_solve_params_validation():
    with pytest.raises(ValidationError):
        plain_params(2, 2, proportions=np.array([0.0, 1.0]))
    with pytest.raises(ValidationError):
        plain_params(2, 2, proportions=np.array([0.6, 0.6]))
    with pytest.raises(ValidationError):
        plain_params(2, 2, beta=np.ones((3, 2)))


# ---------------------------------------------------------------------------
# shard caches


def test_transform_identity_rotation_keeps_rows():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    cache = transform_shard(x, identity_rotation_set(2, 2))
    assert np.array_equal(cache.rotated[0], x)
    assert np.array_equal(cache.rotated[1], x)
    assert np.array_equal(cache.box_min[0], [1.0, 2.0])
    assert np.array_equal(cache.box_max[0], [3.0, 4.0])


def test_transform_coordinate_swap():
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    rs = RotationSet(rotations=swap[None], rotated_variances=np.ones((1, 2)))
    cache = transform_shard(np.array([[3.0, 5.0]]), rs)
    assert np.allclose(cache.rotated[0, 0], [5.0, 3.0])


def test_transform_by_eigenbasis():
    model = single_cluster_model(np.array([[2.0, 1.0], [1.0, 2.0]]))
    rs = diagonalize(model, RegularizationConfig())
    cache = transform_shard(np.array([[1.0, 1.0]]), rs)
    assert np.allclose(cache.rotated[0, 0], [np.sqrt(2.0), 0.0], atol=1e-12)


def test_transform_rejects_bad_shards():
    rs = identity_rotation_set(1, 2)
    with pytest.raises(ValidationError):
        transform_shard(np.zeros((0, 2)), rs)
    with pytest.raises(ValidationError):
        transform_shard(np.array([[1.0, np.nan]]), rs)
    with pytest.raises(ValidationError):
        transform_shard(np.zeros((3, 3)), rs)


# ---------------------------------------------------------------------------
# per-row costs


def test_cost_zero_at_perfect_fit():
    cache = transform_shard(np.array([[1.5, -2.0]]), identity_rotation_set(1, 2))
    params = plain_params(1, 2, proportions=np.array([1.0]))
    costs = assignment_costs(cache, params, np.array([[1.5, -2.0]]), host_id=0)
    assert costs[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_cost_is_squared_distance():
    cache = transform_shard(np.array([[2.0]]), identity_rotation_set(1, 1))
    params = plain_params(1, 1, proportions=np.array([1.0]))
    costs = assignment_costs(cache, params, np.array([[0.0]]), host_id=0)
    assert costs[0, 0] == pytest.approx(4.0)


def test_cost_proportion_penalty_dominates():
    rng = np.random.default_rng(0)
    cache = transform_shard(rng.normal(size=(5, 2)), identity_rotation_set(2, 2))
    params = plain_params(2, 2, n_total=5,
                          lambda_p=np.array([1e6, 0.0]))
    costs = assignment_costs(cache, params, np.zeros((2, 2)), host_id=0)
    assert np.all(np.argmin(costs, axis=1) == 1)
    assert np.all(costs[:, 0] > 1e5)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_cost_matches_plain_loop(seed):
    rng = np.random.default_rng(seed)
    cache, params, host_id = random_subproblem(rng, n_rows=5, n_clusters=3,
                                               n_features=2)
    mu = rng.normal(size=(3, 2))
    costs = assignment_costs(cache, params, mu, host_id)
    lam_mu = params.duals.lambda_mu[:, host_id, :]
    for n in range(cache.n_rows):
        for i in range(3):
            y = cache.rotated[i, n]
            expected = float(params.beta.beta[i] @ (y - mu[i]) ** 2)
            expected -= float(lam_mu[i] @ y) / params.proportions_target[i]
            expected /= params.n_total
            expected += params.duals.lambda_p[i] / params.n_total
            assert costs[n, i] == pytest.approx(expected, rel=1e-12, abs=1e-15)


# ---------------------------------------------------------------------------
# solve_local


def test_single_cluster_least_squares():
    x = np.array([[1.0], [2.0], [6.0]])
    cache = transform_shard(x, identity_rotation_set(1, 1))
    params = plain_params(1, 1, n_total=3, proportions=np.array([1.0]))
    res = solve_local(cache, params, host_id=0,
                      warm_assignments=np.ones((3, 1)))
    assert res.mu_hat[0, 0] == pytest.approx(3.0)
    assert np.allclose(res.cluster_mass, [3.0])
    assert res.f_star == pytest.approx(((x - 3.0) ** 2).sum() / 3.0)


def test_two_separated_groups_recovered_by_enumeration():
    x = np.array([[-5.0], [-5.2], [-4.8], [5.0], [5.2], [4.8]])
    cache = transform_shard(x, identity_rotation_set(2, 1))
    params = plain_params(2, 1, n_total=6)
    warm = np.tile([1.0, 0.0], (6, 1))  # deliberately wrong start
    res = solve_local(cache, params, host_id=0, warm_assignments=warm,
                      collect=True)
    labels = np.argmax(res.local_assignments, axis=1)
    assert len(set(labels[:3])) == 1 and len(set(labels[3:])) == 1
    assert labels[0] != labels[3]
    within = ((x[:3] - x[:3].mean()) ** 2).sum() + ((x[3:] - x[3:].mean()) ** 2).sum()
    assert res.f_star == pytest.approx(float(within) / 6.0)


def test_two_separated_groups_recovered_by_descent():
    # 12 rows exceeds the enumeration budget, so this exercises the
    # block-coordinate route
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.normal(-6.0, 0.3, size=(6, 1)),
                        rng.normal(6.0, 0.3, size=(6, 1))])
    assert 2 ** 12 > ENUM_LIMIT
    cache = transform_shard(x, identity_rotation_set(2, 1))
    params = plain_params(2, 1, n_total=12)
    warm = np.eye(2)[rng.integers(0, 2, size=12)]
    res = solve_local(cache, params, host_id=0, warm_assignments=warm,
                      collect=True)
    labels = np.argmax(res.local_assignments, axis=1)
    assert len(set(labels[:6])) == 1 and len(set(labels[6:])) == 1
    assert labels[0] != labels[6]


def test_mass_price_pushes_all_rows_to_cheap_cluster():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 2))
    cache = transform_shard(x, identity_rotation_set(2, 2))
    params = plain_params(2, 2, n_total=4, lambda_p=np.array([1e6, 0.0]))
    res = solve_local(cache, params, host_id=0,
                      warm_assignments=np.tile([1.0, 0.0], (4, 1)))
    assert np.allclose(res.cluster_mass, [0.0, 4.0])


def test_solution_respects_center_boxes():
    rng = np.random.default_rng(6)
    cache, params, host_id = random_subproblem(rng, n_rows=12, dual_scale=5.0)
    warm = np.eye(2)[rng.integers(0, 2, size=12)]
    res = solve_local(cache, params, host_id, warm)
    assert np.all(res.mu_hat >= cache.box_min - 1e-12)
    assert np.all(res.mu_hat <= cache.box_max + 1e-12)


def test_solve_never_lands_above_its_warm_start():
    rng = np.random.default_rng(7)
    for _ in range(10):
        cache, params, host_id = random_subproblem(rng, n_rows=14,
                                                   dual_scale=2.0)
        warm = np.eye(2)[rng.integers(0, 2, size=14)]
        priced = evaluate_assignments(cache, params, host_id, warm)
        solved = solve_local(cache, params, host_id, warm)
        assert solved.f_star <= priced.f_star + 1e-9 * (1.0 + abs(priced.f_star))


def test_solve_is_deterministic_and_local():
    rng = np.random.default_rng(8)
    samples = rng.normal(size=(10, 2))
    rs = identity_rotation_set(2, 2)
    params = plain_params(2, 2, n_hosts=2, n_total=20,
                          lambda_mu=rng.normal(size=(2, 2, 2)),
                          lambda_p=rng.normal(size=2))
    warm = np.eye(2)[rng.integers(0, 2, size=10)]
    res_a = solve_local(transform_shard(samples, rs), params, 0, warm,
                        collect=True)
    res_b = solve_local(transform_shard(samples.copy(), rs), params, 0,
                        warm.copy(), collect=True)
    assert res_a.f_star == res_b.f_star
    assert np.array_equal(res_a.local_assignments, res_b.local_assignments)
    assert np.array_equal(res_a.mu_hat, res_b.mu_hat)
    assert np.array_equal(res_a.raw_second_moment, res_b.raw_second_moment)


def test_micro_shards_match_exhaustive_reference():
    rng = np.random.default_rng(2024)
    for trial in range(20):
        n_rows = int(rng.integers(1, 9))
        cache, params, host_id = random_subproblem(
            rng, n_rows=n_rows,
            n_features=int(rng.integers(1, 4)),
            dual_scale=float(rng.uniform(0.0, 3.0)),
        )
        warm = np.eye(2)[rng.integers(0, 2, size=n_rows)]
        res = solve_local(cache, params, host_id, warm)
        expected = exhaustive_minimum_reference(
            cache.rotated, cache.box_min, cache.box_max, params.beta.beta,
            params.duals.lambda_mu[:, host_id, :], params.duals.lambda_p,
            params.proportions_target, params.n_total,
        )
        assert res.f_star == pytest.approx(expected, abs=1e-8), f"trial {trial}"


def test_three_cluster_micro_shards_match_reference():
    rng = np.random.default_rng(99)
    for _ in range(8):
        n_rows = int(rng.integers(1, 6))  # 3^5 = 243 stays enumerable
        cache, params, host_id = random_subproblem(rng, n_rows=n_rows,
                                                   n_clusters=3,
                                                   dual_scale=1.5)
        warm = np.eye(3)[rng.integers(0, 3, size=n_rows)]
        res = solve_local(cache, params, host_id, warm)
        expected = exhaustive_minimum_reference(
            cache.rotated, cache.box_min, cache.box_max, params.beta.beta,
            params.duals.lambda_mu[:, host_id, :], params.duals.lambda_p,
            params.proportions_target, params.n_total,
        )
        assert res.f_star == pytest.approx(expected, abs=1e-8)


def test_statistics_describe_final_assignments():
    rng = np.random.default_rng(11)
    cache, params, host_id = random_subproblem(rng, n_rows=7)
    warm = np.eye(2)[rng.integers(0, 2, size=7)]
    res = solve_local(cache, params, host_id, warm, collect=True)
    a = res.local_assignments
    x = cache.samples
    assert np.allclose(res.cluster_mass, a.sum(axis=0))
    assert np.allclose(res.raw_first_moment, a.T @ x)
    assert np.allclose(res.raw_second_moment,
                       np.einsum("ni,nd,ne->ide", a, x, x))
    assert np.allclose(res.rotated_first_moment,
                       np.einsum("ni,ind->id", a, cache.rotated))


# ---------------------------------------------------------------------------
# pricing fixed assignments


def test_evaluate_matches_reference_objective():
    rng = np.random.default_rng(12)
    for _ in range(10):
        cache, params, host_id = random_subproblem(rng, n_rows=6,
                                                   dual_scale=2.0)
        a = rng.dirichlet(np.ones(2), size=6)
        res = evaluate_assignments(cache, params, host_id, a)
        lam_mu = params.duals.lambda_mu[:, host_id, :]
        mu = np.stack([
            best_center_reference(cache.rotated[i], a[:, i],
                                  params.beta.beta[i], lam_mu[i],
                                  cache.box_min[i], cache.box_max[i],
                                  params.n_total)
            for i in range(2)
        ])
        assert np.allclose(res.mu_hat, mu, atol=1e-12)
        expected = host_objective_reference(
            cache.rotated, a, mu, params.beta.beta, lam_mu,
            params.duals.lambda_p, params.proportions_target, params.n_total,
        )
        assert res.f_star == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_objective_decomposes_into_row_costs():
    # f equals the assignment-weighted row costs plus the multiplier price
    # paid on the centers; ties assignment_costs to the solve value
    rng = np.random.default_rng(13)
    cache, params, host_id = random_subproblem(rng, n_rows=8, dual_scale=1.0)
    a = rng.dirichlet(np.ones(2), size=8)
    res = evaluate_assignments(cache, params, host_id, a, collect=True)
    lam_mu = params.duals.lambda_mu[:, host_id, :]
    rebuilt = float((a * res.row_costs).sum()) + float((lam_mu * res.mu_hat).sum())
    assert res.f_star == pytest.approx(rebuilt, rel=1e-12)


def test_evaluate_requires_feasible_rows():
    rng = np.random.default_rng(14)
    cache, params, host_id = random_subproblem(rng, n_rows=4)
    bad = np.full((4, 2), 0.9)
    with pytest.raises(ValidationError):
        evaluate_assignments(cache, params, host_id, bad)


# ---------------------------------------------------------------------------
# subgradient pieces


def test_dual_terms_vanish_for_unconstrained_single_cluster():
    x = np.random.default_rng(15).normal(size=(9, 2))
    cache = transform_shard(x, identity_rotation_set(1, 2))
    params = plain_params(1, 2, n_total=9, proportions=np.array([1.0]))
    res = solve_local(cache, params, 0, np.ones((9, 1)))
    g_mu, g_mass = local_dual_terms(res, params)
    assert np.allclose(g_mu, 0.0, atol=1e-12)
    assert np.allclose(g_mass, [1.0])


def test_dual_terms_match_direct_formula():
    rng = np.random.default_rng(16)
    cache, params, host_id = random_subproblem(rng, n_rows=3, dual_scale=1.0)
    warm = np.eye(2)[[0, 1, 0]]
    res = solve_local(cache, params, host_id, warm, collect=True)
    g_mu, g_mass = local_dual_terms(res, params)
    a = res.local_assignments
    for i in range(2):
        s1 = a[:, i] @ cache.rotated[i]
        expected = res.mu_hat[i] - s1 / (params.proportions_target[i]
                                         * params.n_total)
        assert np.allclose(g_mu[i], expected)
    assert np.allclose(g_mass, a.sum(axis=0) / params.n_total)


def test_mass_fraction_when_one_cluster_takes_all():
    x = np.array([[0.0], [0.1], [-0.1]])
    cache = transform_shard(x, identity_rotation_set(2, 1))
    params = plain_params(2, 1, n_total=12, lambda_p=np.array([0.0, 1e6]))
    res = solve_local(cache, params, 0, np.eye(2)[[0, 1, 0]])
    _, g_mass = local_dual_terms(res, params)
    assert np.allclose(g_mass, [3.0 / 12.0, 0.0])


# ---------------------------------------------------------------------------
# weak duality across hosts


def test_dual_total_never_exceeds_feasible_primal():
    """Sum of host optima minus the proportion offset lower-bounds the value
    of any coupled feasible point, for every multiplier draw."""

    rng = np.random.default_rng(17)
    j, d, k, n = 2, 2, 2, 6
    shards = [rng.normal(size=(n, d)) for _ in range(k)]
    rs = identity_rotation_set(j, d)
    caches = [transform_shard(s, rs) for s in shards]
    p_t = np.array([0.5, 0.5])
    n_total = n * k

    # feasible point: alternating hard labels (masses hit p * N exactly in
    # total), each host's center at its own scaled partial moment, which is
    # the value the relaxed consistency constraint ties it to
    a = np.eye(j)[np.arange(n) % j]
    mus = []
    for c in caches:
        s1 = np.stack([a[:, i] @ c.rotated[i] for i in range(j)])
        mu_k = s1 / (p_t[:, None] * n_total)
        assert np.all(mu_k >= c.box_min) and np.all(mu_k <= c.box_max)
        mus.append(mu_k)

    beta = np.exp(rng.uniform(-1.0, 1.0, size=(j, d)))
    primal = None
    for _ in range(12):
        duals = DualVariables(lambda_mu=rng.normal(size=(j, k, d)),
                              lambda_p=rng.normal(size=j))
        params = SolveParams(round_id=0, rotation_set=rs,
                             beta=BetaWeights(beta=beta),
                             proportions_target=p_t, duals=duals,
                             n_total=n_total)
        value = sum(
            host_objective_reference(c.rotated, a, mus[ki], beta,
                                     duals.lambda_mu[:, ki, :], duals.lambda_p,
                                     p_t, n_total)
            for ki, c in enumerate(caches)
        ) - float(duals.lambda_p @ p_t)
        if primal is None:
            primal = value  # the Lagrangian is multiplier-free when feasible
        else:
            assert value == pytest.approx(primal, rel=1e-9, abs=1e-9)
        dual_total = sum(
            solve_local(c, params, ki, a).f_star for ki, c in enumerate(caches)
        ) - float(duals.lambda_p @ p_t)
        assert dual_total <= primal + 1e-9 * (1.0 + abs(primal))


# ---------------------------------------------------------------------------
# payload trimming


def test_strip_collected_removes_row_level_arrays():
    rng = np.random.default_rng(18)
    cache, params, host_id = random_subproblem(rng, n_rows=5)
    warm = np.eye(2)[rng.integers(0, 2, size=5)]
    full = solve_local(cache, params, host_id, warm, collect=True)
    assert full.local_assignments is not None
    assert full.row_costs is not None
    lean = strip_collected(full)
    assert lean.local_assignments is None
    assert lean.row_costs is None
    assert lean.f_star == full.f_star
    already = solve_local(cache, params, host_id, warm)
    assert strip_collected(already) is already
