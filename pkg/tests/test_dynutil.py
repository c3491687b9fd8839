"""Tests for dynamic utilities: deterministic construction, comparison checks,
maximizer selection, and the linear switching-weight construction."""
import itertools

import numpy as np
import pytest

from treebsde.lattice import TimeGrid, build_tree
from treebsde.bsde import BSDEProblem, ProblemValidationError
from treebsde.duality import ConditionalDualValue
from treebsde.dynutil import (
    DegenerateUtilityError,
    EmptySelectionError,
    LinearUtilityCoeffs,
    StepSizeError,
    build_linear_utility,
    check_comparison,
    check_linear_comparison,
    deterministic_phi,
    make_comparison_pairs,
    riccati_polynomials,
    select_maximizer,
    static_utility,
    verify_tau_bound,
)


def steering_problem():
    """d'=2: first component integrates (u - y2), second integrates u."""
    def f(t, ctx, y, z, u):
        return np.stack([u - y[:, 1], u + 0.0 * y[:, 1]], axis=1)

    return BSDEProblem(
        value_dim=2, f=f,
        terminal=lambda ctx: np.zeros((ctx.b.shape[0], 2)),
        phi=lambda y: y[:, 0],
        control_values=(0.0, 1.0), lipschitz_L=1.0,
        deterministic_controls=True,
    )


def test_static_utility_is_phi():
    util = static_utility(lambda y: y[:, 0] + 2 * y[:, 1], 2)
    y = np.array([[1.0, 2.0], [0.0, -1.0]])
    np.testing.assert_array_equal(util.evaluate(3, y), [5.0, -2.0])


def test_deterministic_phi_level_zero_is_phi():
    val, seq = deterministic_phi(steering_problem(), TimeGrid(T=2.0, n=4), 0, [0.7, 0.1])
    assert val == 0.7
    assert seq == ()


def test_deterministic_phi_frozen_dynamics():
    problem = BSDEProblem(
        value_dim=2, f=lambda t, ctx, y, z, u: np.zeros_like(y),
        terminal=lambda ctx: np.zeros((ctx.b.shape[0], 2)),
        phi=lambda y: y[:, 0], control_values=(0.0, 1.0), lipschitz_L=0.0)
    val, _ = deterministic_phi(problem, TimeGrid(T=1.0, n=3), 3, [0.4, -0.2])
    assert val == pytest.approx(0.4, abs=1e-15)


def test_deterministic_phi_forward_dpp():
    problem = steering_problem()
    grid = TimeGrid(T=2.0, n=4)
    y = np.array([0.3, -0.1])
    full, _ = deterministic_phi(problem, grid, 4, y)
    times, dt = grid.times(), grid.dt
    from treebsde.bsde import NodeContext
    ctx = NodeContext(level=0, b=np.zeros((1, 1)))
    best = -np.inf
    for seq in itertools.product((0.0, 1.0), repeat=2):  # controls at levels 2, 3
        cur = y.reshape(1, 2)
        for j, uv in ((3, seq[1]), (2, seq[0])):
            cur = cur + np.asarray(problem.f(times[j], ctx, cur, None, np.full(1, uv))) * dt
        val, _ = deterministic_phi(problem, grid, 2, cur[0])
        best = max(best, val)
    assert full == pytest.approx(best, abs=1e-12)


def test_deterministic_phi_rejects_z_dependence():
    problem = BSDEProblem(
        value_dim=1, f=lambda t, ctx, y, z, u: z[:, :, 0],
        terminal=lambda ctx: np.zeros((ctx.b.shape[0], 1)),
        phi=lambda y: y[:, 0], control_values=(0.0,), lipschitz_L=1.0)
    with pytest.raises(ProblemValidationError, match="independent of z"):
        deterministic_phi(problem, TimeGrid(T=1.0, n=2), 1, [0.0])


def test_check_comparison_monotone_scalar():
    tree = build_tree(TimeGrid(T=0.5, n=2), d=1)
    problem = BSDEProblem(
        value_dim=1, f=lambda t, ctx, y, z, u: 0.5 * y,
        terminal=lambda ctx: ctx.b[:, :1].copy(),
        phi=lambda y: y[:, 0], control_values=(0.0,), lipschitz_L=0.5)
    util = static_utility(lambda y: y[:, 0], 1)
    eta = tree.values[2][:, :1]
    pairs = [(eta, eta + 0.3), (eta, eta), (eta, eta - 0.1)]
    report = check_comparison(util, problem, tree, 0, 2, pairs)
    assert report.checked == 2
    assert report.skipped == 1
    assert report.violations == ()
    assert report.worst_slack <= 1e-12


def test_check_comparison_detects_time_inconsistency():
    problem = steering_problem()
    tree = build_tree(TimeGrid(T=2.0, n=2), d=1)
    util = static_utility(lambda y: y[:, 0], 2)
    m = tree.node_count(2)
    eta = np.broadcast_to(np.array([0.0, 1.0]), (m, 2)).copy()
    eta_t = np.broadcast_to(np.array([0.5, 2.0]), (m, 2)).copy()
    report = check_comparison(util, problem, tree, 0, 2, [(eta, eta_t)])
    assert report.checked == 1
    assert len(report.violations) >= 1
    # the dominated terminal value yields the strictly better time-0 utility
    assert report.worst_slack == pytest.approx(1.5, abs=1e-12)


def test_select_maximizer_lexicographic_tie():
    util = static_utility(lambda y: y[:, 0] + y[:, 1], 2)
    y, top, ties = select_maximizer(util, np.array([[0.0, 1.0], [1.0, 0.0]]), 0, 0)
    np.testing.assert_array_equal(y, [1.0, 0.0])
    assert top == 1.0 and ties == 2


def test_select_maximizer_containers():
    util = static_utility(lambda y: -np.abs(y[:, 0] - 0.25), 1)
    cdv = ConditionalDualValue(
        level=1, y_points=np.array([[0.0], [0.25], [1.0]]),
        values=np.array([[0.0, 0.05, 0.5]]), cell=(0.25,))
    y, _, _ = select_maximizer(util, cdv, 1, 0, eps=0.1)
    np.testing.assert_array_equal(y, [0.25])
    with pytest.raises(EmptySelectionError):
        select_maximizer(util, cdv, 1, 0, eps=-1.0)
    with pytest.raises(ValueError, match="eps"):
        select_maximizer(util, cdv, 1, 0)


def test_degenerate_weights():
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, 0.0)
    with pytest.raises(DegenerateUtilityError, match="static value is 0"):
        build_linear_utility(coeffs, build_tree(TimeGrid(T=1.0, n=2), d=1))


def test_zero_dynamics_constant_weights():
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 2.0)
    tree = build_tree(TimeGrid(T=1.0, n=3), d=1)
    lin = build_linear_utility(coeffs, tree)
    for j in range(4):
        np.testing.assert_array_equal(lin.A1[j], np.ones(tree.node_count(j)))
        np.testing.assert_array_equal(lin.A2[j], 2 * np.ones(tree.node_count(j)))
        assert not lin.switch_flags[j].any()
    assert lin.min_monotone == 1.0
    np.testing.assert_array_equal(
        lin.utility.evaluate(2, np.array([[1.0, 1.0]] * 4)), np.full(4, 3.0))
    np.testing.assert_array_equal(lin.utility.phi(np.array([[2.0, 0.5]])), [3.0])


def test_matched_diagonal_beta_freezes_ratio():
    beta = np.array([[0.4, 0.0], [0.0, 0.4]])
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), beta, 0.5, 1.0)
    drift, sig = riccati_polynomials(np.zeros((2, 2)), beta, 1)
    assert np.all(drift == 0) and np.all(sig == 0)
    tree = build_tree(TimeGrid(T=0.25, n=4), d=1)
    lin = build_linear_utility(coeffs, tree)
    for j in range(5):
        np.testing.assert_array_equal(lin.ahat[j], np.full(tree.node_count(j), 0.5))


def test_linear_drift_exact_ratio_and_switch():
    # alpha[1,0] = 1 only: the ratio grows linearly in t and crosses 2 at t = 2
    alpha = np.array([[0.0, 0.0], [1.0, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(alpha, np.zeros((2, 2)), 0.0, 1.0)
    tree = build_tree(TimeGrid(T=2.5, n=10), d=1)
    lin = build_linear_utility(coeffs, tree, overshoot_limit=1.1)
    times = tree.grid.times()
    for j in range(8):
        np.testing.assert_allclose(lin.ahat[j], np.full(tree.node_count(j), times[j]),
                                   atol=1e-13)
        assert np.all(lin.parity[j] == 1)
    assert lin.switch_flags[8].all()
    assert np.all(lin.parity[8] == 2)
    np.testing.assert_allclose(lin.ahat[8], 0.5, atol=1e-13)
    np.testing.assert_allclose(lin.A1[8], 2.0, atol=1e-13)   # frozen after switch
    np.testing.assert_allclose(lin.A2[8], 1.0, atol=1e-13)   # continuity
    assert not lin.switch_flags[9].any() and not lin.switch_flags[10].any()
    np.testing.assert_allclose(lin.A1[10], 2.0, atol=1e-13)
    path = lin.path(0)
    assert path.switch_times == (pytest.approx(2.0),)
    assert path.overshoot == pytest.approx(0.0, abs=1e-13)


def test_switching_path_csv(tmp_path):
    alpha = np.array([[0.0, 0.0], [1.0, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(alpha, np.zeros((2, 2)), 0.0, 1.0)
    tree = build_tree(TimeGrid(T=2.5, n=10), d=1)
    lin = build_linear_utility(coeffs, tree, overshoot_limit=1.1)
    out = tmp_path / "path.csv"
    lin.path(0).to_csv(str(out))
    lines = out.read_text().splitlines()
    assert lines[0] == "t,Ahat,regime,A1,A2,is_switch"
    assert len(lines) == 12
    assert sum(int(line.split(",")[5]) for line in lines[1:]) == 1


def test_tree_children_match_ratio_sde_coefficients():
    alpha = np.array([[0.2, -0.1], [0.3, 0.1]])
    beta = np.array([[0.1, 0.2], [-0.2, 0.15]])
    coeffs = LinearUtilityCoeffs.from_constants(alpha, beta, 0.5, 1.0)
    dt = 1e-3
    tree = build_tree(TimeGrid(T=dt, n=1), d=1)
    lin = build_linear_utility(coeffs, tree)
    a0 = 0.5
    drift, sig = riccati_polynomials(alpha, beta, 1)
    d_exp = float(sum(c * a0 ** k for k, c in enumerate(reversed(drift))))
    s_exp = float(sum(c * a0 ** k for k, c in enumerate(reversed(sig))))
    plus, minus = lin.ahat[1][1], lin.ahat[1][0]
    assert (plus + minus) / 2 - a0 == pytest.approx(d_exp * dt, abs=5 * dt ** 1.5)
    assert (plus - minus) / (2 * np.sqrt(dt)) == pytest.approx(s_exp, abs=5 * np.sqrt(dt))


def test_step_size_guard():
    beta = np.array([[0.0, 0.0], [0.8, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), beta, 0.0, 1.0)
    with pytest.raises(StepSizeError, match="decrease dt"):
        build_linear_utility(coeffs, build_tree(TimeGrid(T=4.0, n=4), d=1))


def test_swap_normalization_consistency():
    alpha = np.array([[0.1, 0.0], [0.5, -0.1]])
    a_swapped = LinearUtilityCoeffs.from_constants(alpha, np.zeros((2, 2)), 2.0, 1.0)
    perm = alpha[[1, 0]][:, [1, 0]]
    a_plain = LinearUtilityCoeffs.from_constants(perm, np.zeros((2, 2)), 1.0, 2.0)
    tree = build_tree(TimeGrid(T=1.0, n=3), d=1)
    lin_s = build_linear_utility(a_swapped, tree, overshoot_limit=1.5)
    lin_p = build_linear_utility(a_plain, tree, overshoot_limit=1.5)
    assert lin_s.swapped and not lin_p.swapped
    for j in range(4):
        np.testing.assert_allclose(lin_s.A1[j], lin_p.A2[j], atol=1e-14)
        np.testing.assert_allclose(lin_s.A2[j], lin_p.A1[j], atol=1e-14)
    assert lin_s.A1[0][0] == 2.0 and lin_s.A2[0][0] == 1.0


def linear_problem_from(coeffs, alpha, beta):
    def f(t, ctx, y, z, u):
        cv = np.stack([0.1 * u, -0.05 * u], axis=1)
        return y @ alpha.T + z[:, :, 0] @ beta.T + cv

    return BSDEProblem(
        value_dim=2, f=f,
        terminal=lambda ctx: np.stack([ctx.b[:, 0], 0.5 * ctx.b[:, 0]], axis=1),
        phi=lambda y: coeffs.a1 * y[:, 0] + coeffs.a2 * y[:, 1],
        control_values=(0.0, 1.0), lipschitz_L=1.0)


def test_linear_comparison_exact_recursion():
    alpha = np.array([[0.2, -0.1], [0.3, 0.1]])
    beta = np.array([[0.1, 0.2], [-0.2, 0.15]])
    coeffs = LinearUtilityCoeffs(
        alpha=lambda t, b: alpha, beta=lambda t, b: beta,
        c=lambda t, b, u: np.stack([0.1 * np.asarray(u), -0.05 * np.asarray(u)],
                                   axis=-1),
        a1=0.5, a2=1.0, bound=0.3)
    tree = build_tree(TimeGrid(T=0.5, n=2), d=1)
    lin = build_linear_utility(coeffs, tree, overshoot_limit=1.0)
    problem = linear_problem_from(coeffs, alpha, beta)
    report = check_linear_comparison(lin, problem, tree, seed=3)
    assert report.pairs_checked == 5
    assert report.policies_per_pair == 2 ** 3
    assert report.violations == ()
    assert report.recursion_residual <= 1e-13
    assert report.min_monotone > 0


def test_make_comparison_pairs_premise():
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 2.0)
    tree = build_tree(TimeGrid(T=0.5, n=2), d=1)
    lin = build_linear_utility(coeffs, tree)
    problem = linear_problem_from(coeffs, np.zeros((2, 2)), np.zeros((2, 2)))
    for eta, eta_t in make_comparison_pairs(lin, problem, tree, count=3, seed=0):
        assert np.all(lin.utility.evaluate(2, eta) <= lin.utility.evaluate(2, eta_t) + 1e-12)


def test_tau_bound_zero_dynamics():
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 2.0)
    report = verify_tau_bound(coeffs, T=1.0, switch_indices=(1, 2), steps=16,
                              n_paths=200, seed=0)
    assert report.C_hat == 0.0 and report.m == 0
    for row in report.rows:
        assert row.frequency == 0.0 and row.passed and not row.vacuous
    assert report.failures == ()


def test_tau_bound_deterministic_ode_case():
    alpha = np.array([[0.0, 0.0], [1.0, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(alpha, np.zeros((2, 2)), 0.0, 1.0)
    report = verify_tau_bound(coeffs, T=1.0, switch_indices=(1, 2, 3), steps=64,
                              n_paths=100, seed=1)
    for row in report.rows:
        assert row.frequency == 0.0 and row.passed
    assert report.failures == ()
    assert report.overshoot == 0.0


def test_ensemble_switching_statistics():
    beta = np.array([[0.0, 0.0], [0.6, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), beta, 0.0, 1.0)
    grid = TimeGrid(T=4.0, n=4096)
    lin = build_linear_utility(coeffs, grid=grid, n_paths=300, seed=7)
    total_switches = sum(int(f.sum()) for f in lin.switch_flags)
    assert total_switches > 0
    assert lin.overshoot <= 0.1
    for j in range(1, grid.n + 1):
        sw = lin.switch_flags[j]
        if sw.any():
            post = np.abs(lin.ahat[j][sw])
            assert np.all((post >= 1 / 2.1 - 1e-12) & (post <= 0.5 + 1e-12))
        assert np.all(np.abs(lin.ahat[j]) <= 2.0 + lin.overshoot + 1e-12)
    path = lin.path(0)
    assert len(path.times) == grid.n + 1


def test_tau_bound_with_switches():
    beta = np.array([[0.0, 0.0], [0.6, 0.0]])
    coeffs = LinearUtilityCoeffs.from_constants(np.zeros((2, 2)), beta, 0.0, 1.0)
    report = verify_tau_bound(coeffs, T=4.0, switch_indices=(1, 2, 3, 4), steps=4096,
                              n_paths=400, seed=11)
    assert report.delta > 0 and report.m >= 1
    assert any(r.frequency > 0 for r in report.rows)
    assert all(r.passed for r in report.rows)
    assert all(r.passed for r in report.one_step)
    assert report.failures == ()
