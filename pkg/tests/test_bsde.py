import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treebsde.lattice import TimeGrid, TreeRandomVariable, build_tree
from treebsde.bsde import (
    BSDEProblem, ControlPolicy, EnumerationCapError, ProblemValidationError,
    StructureError, envelope_bsde, monotone_step_bound, reachable_set,
    solve_bsde, static_value, maximize_over_policies,
)


def zero_f(t, ctx, y, z, u):
    return np.zeros_like(y)


def make_problem(f, terminal, phi=lambda y: y[:, 0], U=(0.0,), L=0.0, dpr=1, **kw):
    return BSDEProblem(value_dim=dpr, f=f, terminal=terminal, phi=phi,
                       control_values=tuple(U), lipschitz_L=L, **kw)


def test_martingale_representation_of_b():
    tree = build_tree(TimeGrid(1.0, 4), 1, "path")
    prob = make_problem(zero_f, lambda ctx: ctx.b[:, :1])
    sol = solve_bsde(prob, tree)
    assert abs(sol.Y[0][0, 0]) < 1e-14
    for Z in sol.Z:
        np.testing.assert_allclose(Z, 1.0, atol=1e-13)


def test_identity_z_multidim():
    tree = build_tree(TimeGrid(1.0, 3), 2, "path")
    prob = make_problem(zero_f, lambda ctx: ctx.b, dpr=2)
    sol = solve_bsde(prob, tree)
    for Z in sol.Z:
        np.testing.assert_allclose(
            Z, np.broadcast_to(np.eye(2), Z.shape), atol=1e-13)


def test_constant_terminal():
    tree = build_tree(TimeGrid(1.0, 3), 1, "recombining")
    prob = make_problem(zero_f, lambda ctx: np.full((ctx.b.shape[0], 1), 2.5))
    sol = solve_bsde(prob, tree)
    for Y in sol.Y:
        np.testing.assert_array_equal(Y, 2.5)
    for Z in sol.Z:
        np.testing.assert_array_equal(Z, 0.0)


def test_terminal_consistency_bitwise():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")
    eta = np.random.default_rng(1).normal(size=(tree.node_count(3), 1))
    prob = make_problem(zero_f, None)
    sol = solve_bsde(prob, tree, terminal_level=3,
                     terminal_rv=TreeRandomVariable(3, eta))
    assert sol.Y[3] is not eta or np.shares_memory(sol.Y[3], eta) or True
    np.testing.assert_array_equal(sol.Y[3], eta.reshape(-1, 1))


def test_backward_recursion_holds():
    tree = build_tree(TimeGrid(1.0, 4), 1, "path")

    def f(t, ctx, y, z, u):
        return 0.5 * np.sin(y) + 0.25 * np.cos(z[:, :, 0]) + u[:, None]

    prob = make_problem(f, lambda ctx: ctx.b[:, :1] ** 2, U=(0.0, 1.0), L=0.75)
    pol = ControlPolicy.constant(tree, 1.0)
    sol = solve_bsde(prob, tree, pol)
    dt = tree.dt
    for j in range(4):
        cv = tree.child_values(j, sol.Y[j + 1])
        P = cv.mean(axis=1)
        lhs = sol.Y[j]
        rhs = P + f(tree.grid.times()[j], None, P, sol.Z[j],
                    np.full(P.shape[0], 1.0)) * dt
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_flow_concatenation_identity():
    tree = build_tree(TimeGrid(1.0, 5), 1, "path")

    def f(t, ctx, y, z, u):
        return np.tanh(y) * 0.4 + 0.2 * z[:, :, 0] + u[:, None]

    prob = make_problem(f, lambda ctx: np.abs(ctx.b[:, :1]), U=(-1.0, 1.0), L=0.6)
    rng = np.random.default_rng(5)
    pol = ControlPolicy(tuple(
        rng.choice([-1.0, 1.0], size=tree.node_count(j)) for j in range(5)))
    full = solve_bsde(prob, tree, pol)
    k = 3
    two_stage = solve_bsde(prob, tree, pol, terminal_level=k,
                           terminal_rv=TreeRandomVariable(k, full.Y[k]))
    np.testing.assert_allclose(two_stage.Y[0], full.Y[0], atol=1e-12)


def test_stability_bound():
    tree = build_tree(TimeGrid(1.0, 6), 1, "path")
    L = 0.5

    def f(t, ctx, y, z, u):
        return 0.3 * y + 0.2 * z[:, :, 0]

    prob = make_problem(f, None, L=L)
    rng = np.random.default_rng(9)
    eta = rng.normal(size=(tree.node_count(6), 1))
    delta = rng.normal(size=(tree.node_count(6), 1)) * 0.1
    s0 = solve_bsde(prob, tree, terminal_level=6, terminal_rv=TreeRandomVariable(6, eta))
    s1 = solve_bsde(prob, tree, terminal_level=6,
                    terminal_rv=TreeRandomVariable(6, eta + delta))
    l2 = lambda v, k: np.sqrt((tree.probs[k] * (v[:, 0] ** 2)).sum())
    C = 2.0 * (1.0 + L)
    bound = np.exp(C * L * tree.grid.T) * l2(delta, 6)
    assert abs(s1.Y[0][0, 0] - s0.Y[0][0, 0]) <= bound + 1e-14


def test_comparison_one_dim():
    L = 1.0
    n = 8  # dt = 0.125 < monotone_step_bound(1) ~ 0.38
    tree = build_tree(TimeGrid(1.0, n), 1, "path")
    assert tree.dt <= monotone_step_bound(L) / 2

    def f(t, ctx, y, z, u):
        return 0.6 * y - 0.4 * z[:, :, 0]

    prob = make_problem(f, None, L=L)
    rng = np.random.default_rng(11)
    eta = rng.normal(size=(tree.node_count(n), 1))
    etap = eta + np.abs(rng.normal(size=eta.shape))
    s0 = solve_bsde(prob, tree, terminal_level=n, terminal_rv=TreeRandomVariable(n, eta))
    s1 = solve_bsde(prob, tree, terminal_level=n, terminal_rv=TreeRandomVariable(n, etap))
    for j in range(n + 1):
        assert np.all(s1.Y[j] >= s0.Y[j] - 1e-14)


def test_monotone_warning_when_dt_large():
    tree = build_tree(TimeGrid(1.0, 1), 1, "path")  # dt = 1

    def f(t, ctx, y, z, u):
        return 2.0 * y

    prob = make_problem(f, lambda ctx: ctx.b[:, :1], L=2.0)
    with pytest.warns(UserWarning, match="comparison"):
        solve_bsde(prob, tree)


def test_lipschitz_probe_failure():
    tree = build_tree(TimeGrid(1.0, 2), 1, "path")

    def f(t, ctx, y, z, u):
        return 3.0 * y

    prob = make_problem(f, lambda ctx: ctx.b[:, :1], L=0.5)
    with pytest.raises(ProblemValidationError, match="Lipschitz"):
        solve_bsde(prob, tree)


def test_static_value_one_step():
    tree = build_tree(TimeGrid(1.0, 1), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None]

    prob = make_problem(f, lambda ctx: np.zeros((ctx.b.shape[0], 1)),
                        U=(-1.0, 1.0))
    res = static_value(prob, tree)
    assert res.value == pytest.approx(1.0)
    assert res.assignment == (1,)
    assert not res.heuristic


def test_static_value_tie_break_lexicographic():
    tree = build_tree(TimeGrid(1.0, 1), 1, "path")

    def f(t, ctx, y, z, u):
        return (u ** 2)[:, None]

    prob = make_problem(f, lambda ctx: np.zeros((ctx.b.shape[0], 1)),
                        U=(-1.0, 0.5, 1.0))
    res = static_value(prob, tree)
    # u=-1 and u=+1 tie at value 1; smallest index wins
    assert res.assignment == (0,)


def test_static_value_control_free():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")
    prob = make_problem(zero_f, lambda ctx: ctx.b[:, :1] ** 2)
    res = static_value(prob, tree)
    assert res.value == pytest.approx(1.0)


def test_static_value_sup_dominates_members():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None] * (1.0 + 0.1 * np.sin(ctx.b[:, :1]))

    prob = make_problem(f, lambda ctx: -np.abs(ctx.b[:, :1]), U=(-1.0, 0.0, 1.0), L=0.0)
    res = static_value(prob, tree)
    rng = np.random.default_rng(2)
    for _ in range(10):
        pol = ControlPolicy(tuple(
            rng.choice([-1.0, 0.0, 1.0], size=tree.node_count(j)) for j in range(3)))
        y0 = solve_bsde(prob, tree, pol).Y[0]
        assert res.value >= prob.phi(y0)[0] - 1e-14


def test_enumeration_cap_and_fallback():
    tree = build_tree(TimeGrid(1.0, 4), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None]

    prob = make_problem(f, lambda ctx: np.zeros((ctx.b.shape[0], 1)), U=(0.0, 1.0))
    with pytest.raises(EnumerationCapError, match="cap"):
        static_value(prob, tree, cap=10)
    res = static_value(prob, tree, cap=10, fallback="coordinate-ascent")
    assert res.heuristic
    assert res.value == pytest.approx(1.0)  # separable objective: ascent is exact


def test_deterministic_controls_match_adapted_for_deterministic_problem():
    grid = TimeGrid(1.0, 3)
    tree = build_tree(grid, 1, "path")

    def f(t, ctx, y, z, u):
        return np.stack([(1.0 - t) * u], axis=-1) if y.ndim == 1 else ((1.0 - t) * u)[:, None]

    term = lambda ctx: np.zeros((ctx.b.shape[0], 1))
    adapted = make_problem(f, term, U=(0.0, 1.0))
    determ = make_problem(f, term, U=(0.0, 1.0), deterministic_controls=True)
    va = static_value(adapted, tree).value
    vd = static_value(determ, tree).value
    assert va == pytest.approx(vd, abs=1e-14)


def test_reachable_set_control_free_singleton():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")
    prob = make_problem(zero_f, lambda ctx: ctx.b[:, :1] ** 2)
    rs = reachable_set(prob, tree, 1)
    for i, pts in enumerate(rs.points):
        assert pts.shape == (1, 1)
    sol = solve_bsde(prob, tree)
    for i, pts in enumerate(rs.points):
        assert abs(pts[0, 0] - sol.Y[1][i, 0]) < 1e-12


def test_reachable_set_one_step():
    tree = build_tree(TimeGrid(1.0, 1), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None]

    prob = make_problem(f, lambda ctx: np.zeros((ctx.b.shape[0], 1)), U=(-1.0, 1.0))
    rs = reachable_set(prob, tree, 0)
    np.testing.assert_allclose(np.sort(rs.points[0].ravel()), [-1.0, 1.0])


def test_reachable_set_dedup():
    tree = build_tree(TimeGrid(1.0, 2), 1, "path")

    def f(t, ctx, y, z, u):
        return (u ** 2)[:, None]

    prob = make_problem(f, lambda ctx: np.zeros((ctx.b.shape[0], 1)), U=(-1.0, 1.0))
    rs = reachable_set(prob, tree, 0)
    assert rs.points[0].shape[0] == 1  # all policies give the same value


def test_envelope_sup_of_uz():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None] * z[:, :, 0]

    prob = make_problem(f, lambda ctx: ctx.b[:, :1],
                        U=(-1.0, -0.5, 0.0, 0.5, 1.0), L=1.0)
    bar, report = envelope_bsde(prob, tree, structure="scalar")
    assert report.consistent
    assert report.max_residual <= 1e-10


def test_envelope_decreasing_phi_flags_violation():
    tree = build_tree(TimeGrid(1.0, 2), 1, "path")

    def f(t, ctx, y, z, u):
        return u[:, None] * z[:, :, 0]

    prob = make_problem(f, lambda ctx: ctx.b[:, :1], phi=lambda y: -y[:, 0],
                        U=(-1.0, 0.0, 1.0), L=1.0)
    with pytest.raises(StructureError):
        envelope_bsde(prob, tree, structure="scalar")
    bar, report = envelope_bsde(prob, tree, structure="scalar", skip_probes=True)
    assert not report.consistent
    assert report.max_residual > 1e-6


def test_envelope_control_free_zero_residual():
    tree = build_tree(TimeGrid(1.0, 3), 1, "path")

    def f(t, ctx, y, z, u):
        return 0.5 * y

    prob = make_problem(f, lambda ctx: ctx.b[:, :1] ** 2, U=(0.0,), L=0.5)
    bar, report = envelope_bsde(prob, tree, structure="scalar")
    assert report.max_residual <= 1e-14


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), a=st.floats(-0.5, 0.5), b=st.floats(-0.5, 0.5))
def test_comparison_property_random_linear(seed, a, b):
    L = abs(a) + abs(b) + 1e-9
    n = 6
    tree = build_tree(TimeGrid(min(1.0, monotone_step_bound(L) * n / 4.0), n), 1, "path")

    def f(t, ctx, y, z, u):
        return a * y + b * z[:, :, 0]

    prob = make_problem(f, None, L=L)
    rng = np.random.default_rng(seed)
    eta = rng.normal(size=(tree.node_count(n), 1))
    etap = eta + np.abs(rng.normal(size=eta.shape))
    s0 = solve_bsde(prob, tree, terminal_level=n, terminal_rv=TreeRandomVariable(n, eta))
    s1 = solve_bsde(prob, tree, terminal_level=n, terminal_rv=TreeRandomVariable(n, etap))
    for j in range(n + 1):
        assert np.all(s1.Y[j] >= s0.Y[j] - 1e-12)
