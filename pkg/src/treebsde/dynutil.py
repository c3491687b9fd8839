"""Dynamic utility functions with a two-component linear weight construction.

A dynamic utility assigns to each (time level, node) a function of the value
vector, reducing the two-dimensional control problem to a scalar one. This
module provides:

  * deterministic_phi: the utility built from a deterministic generator by
    enumerating deterministic controls on [0, t] (Z = 0 branch);
  * check_comparison: a node-wise order-preservation diagnostic between two
    terminal variables under max-over-policies evaluation;
  * select_maximizer: the lexicographically largest candidate among the
    utility maximizers over a nodal/reachable set;
  * build_linear_utility: weights Phi(t,y) = A^1_t y_1 + A^2_t y_2 where the
    ratio of the active to the frozen weight follows a cubic-drift /
    quadratic-volatility SDE, restarted by inversion each time |ratio| hits 2
    (regime switching). On a tree the children weights are constructed so the
    contracted scalar recursion holds exactly; on an Euler ensemble the
    truncated SDE is simulated with Rademacher increments.
  * verify_tau_bound: Monte Carlo check of the switching-time tail bound
    P(tau_n < T) <= (2n)^m / 2^n with m*delta < T <= (m+1)*delta, delta = 1/(2C),
    C fitted from a pilot simulation of the one-regime truncated SDE;
  * check_linear_comparison: order preservation of the contracted scalar
    process for the declared linear generator, plus the exact-recursion residual.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from treebsde.lattice import ScenarioTree, TimeGrid, TreeRandomVariable
from treebsde.bsde import (
    BSDEProblem,
    ControlPolicy,
    EnumerationCapError,
    NodeContext,
    ProblemValidationError,
    StructureError,
    maximize_over_policies,
    solve_bsde,
)


class DegenerateUtilityError(ValueError):
    """Both initial weights vanish: the static value is 0 and no construction is needed."""


class EmptySelectionError(ValueError):
    """Maximizer selection over an empty candidate set."""


class StepSizeError(ValueError):
    """Euler step too coarse for the requested regime-band overshoot."""


@dataclass(frozen=True)
class DynamicUtility:
    """evaluate(level, y, nodes=None) -> (k,) utility values; phi is the t=0 slice.

    y has shape (k, d'); rows align with all nodes at the level (nodes=None) or
    with the given node indices. Every construction satisfies
    evaluate(0, y) == phi(y) exactly.
    """

    evaluate: object
    phi: object
    value_dim: int


def static_utility(phi, value_dim: int) -> DynamicUtility:
    """The time-independent utility Phi(t, y) = phi(y) (control group in tests)."""
    def evaluate(level, y, nodes=None):
        return np.asarray(phi(np.asarray(y, dtype=float).reshape(-1, value_dim)),
                          dtype=float).reshape(-1)
    return DynamicUtility(evaluate=evaluate, phi=phi, value_dim=value_dim)


# ---------------------------------------------------------------------------
# deterministic construction


def _probe_deterministic(problem: BSDEProblem, seed: int = 0) -> None:
    rng = np.random.default_rng(np.random.Philox(seed))
    dpr = problem.value_dim
    for _ in range(8):
        y = rng.normal(size=(1, dpr))
        z = rng.normal(size=(1, dpr, 1))
        u = np.full(1, problem.control_values[0])
        ctx0 = NodeContext(level=0, b=np.zeros((1, 1)))
        ctxb = NodeContext(level=0, b=rng.normal(size=(1, 1)))
        f0 = np.asarray(problem.f(0.3, ctx0, y, np.zeros_like(z), u))
        fz = np.asarray(problem.f(0.3, ctx0, y, z, u))
        fb = np.asarray(problem.f(0.3, ctxb, y, np.zeros_like(z), u))
        if np.max(np.abs(fz - f0)) > 1e-12 or np.max(np.abs(fb - f0)) > 1e-12:
            raise ProblemValidationError(
                "deterministic utility needs a generator independent of z and the node")


def deterministic_phi(problem: BSDEProblem, grid: TimeGrid, level: int, y,
                      cap: int = 10 ** 6):
    """Phi(level, y) = max over deterministic control sequences on [0, level) of
    phi(Y_0), where Y runs backward from Y_level = y with Z = 0.

    Returns (value, best control sequence)."""
    _probe_deterministic(problem)
    dpr = problem.value_dim
    U = problem.control_values
    total = len(U) ** level
    if total > cap:
        raise EnumerationCapError(f"{total} control sequences exceed cap {cap}")
    y = np.asarray(y, dtype=float).reshape(1, dpr)
    times = grid.times()
    ctx = NodeContext(level=0, b=np.zeros((1, 1)))
    z0 = np.zeros((1, dpr, 1))
    best = -np.inf
    best_seq = None
    for seq in itertools.product(range(len(U)), repeat=level):
        cur = y
        for j in range(level - 1, -1, -1):
            u = np.full(1, U[seq[j]])
            cur = cur + np.asarray(problem.f(times[j], ctx, cur, z0, u)) * grid.dt
        val = float(np.asarray(problem.phi(cur)).reshape(()))
        if val > best:
            best = val
            best_seq = seq
    return best, best_seq


# ---------------------------------------------------------------------------
# comparison diagnostic


@dataclass(frozen=True)
class ComparisonReport:
    checked: int
    skipped: int
    violations: tuple   # (pair index, node, lhs, rhs)
    worst_slack: float  # max over checked pairs/nodes of lhs - rhs (<= tol means pass)
    tol: float


def check_comparison(utility: DynamicUtility, problem: BSDEProblem,
                     tree: ScenarioTree, t1: int, t2: int, pairs,
                     tol: float = 1e-10, cap: int = 10 ** 6) -> ComparisonReport:
    """Order preservation of eta -> max-over-policies utility(t1, Y_{t1}(t2, eta)).

    Pairs failing the premise utility(t2, eta) <= utility(t2, eta~) node-wise are
    skipped and counted. For qualifying pairs the node-wise inequality at t1 must
    hold within tol; violations are listed.
    """
    if not 0 <= t1 < t2 <= tree.n:
        raise ValueError(f"need 0 <= t1 < t2 <= n, got {t1}, {t2}")
    checked = skipped = 0
    violations = []
    worst = -np.inf

    def level_values(eta):
        rv = TreeRandomVariable(level=t2, values=np.asarray(eta, dtype=float))
        vals, _, _, _ = maximize_over_policies(
            problem, tree,
            lambda yy: utility.evaluate(t1, yy),
            start_level=t1, terminal_level=t2, terminal_rv=rv, cap=cap)
        return vals

    for idx, (eta, eta_t) in enumerate(pairs):
        eta = np.asarray(eta, dtype=float).reshape(tree.node_count(t2), -1)
        eta_t = np.asarray(eta_t, dtype=float).reshape(tree.node_count(t2), -1)
        u2 = utility.evaluate(t2, eta)
        u2t = utility.evaluate(t2, eta_t)
        if np.any(u2 > u2t + 1e-12):
            skipped += 1
            continue
        checked += 1
        lhs = level_values(eta)
        rhs = level_values(eta_t)
        worst = max(worst, float(np.max(lhs - rhs)))
        bad = np.nonzero(lhs > rhs + tol)[0]
        for node in bad:
            violations.append((idx, int(node), float(lhs[node]), float(rhs[node])))
    return ComparisonReport(checked=checked, skipped=skipped,
                            violations=tuple(violations),
                            worst_slack=worst if checked else 0.0, tol=tol)


def select_maximizer(utility: DynamicUtility, candidates, level: int, node: int,
                     eps: float | None = None, tol: float = 1e-10):
    """Lexicographically largest candidate within tol of the utility maximum.

    candidates: an (r, d') array, a ReachableSet, or a ConditionalDualValue
    (then eps selects its nodal points). Returns (y, utility value, tie count).
    """
    if hasattr(candidates, "nodal_points"):
        if eps is None:
            raise ValueError("selecting from a conditional dual value needs eps")
        pts = candidates.nodal_points(node, eps)
    elif hasattr(candidates, "points") and isinstance(candidates.points, tuple):
        pts = candidates.points[node]
    else:
        pts = np.asarray(candidates, dtype=float)
    pts = np.asarray(pts, dtype=float).reshape(-1, utility.value_dim) if len(pts) else pts
    if len(pts) == 0:
        raise EmptySelectionError(f"no candidates at level {level}, node {node}")
    vals = utility.evaluate(level, pts, nodes=np.full(len(pts), node))
    top = float(np.max(vals))
    ties = pts[vals >= top - tol]
    y_bar = max(map(tuple, ties))
    return np.array(y_bar), top, len(ties)


# ---------------------------------------------------------------------------
# linear construction


@dataclass(frozen=True)
class LinearUtilityCoeffs:
    """Linear generator data f_i = sum_j alpha[i,j] y_j + sum_j beta[i,j] z_j + c_i(u).

    alpha(t, b) and beta(t, b) return (2, 2) (or (m, 2, 2)) arrays; c(t, b, u)
    returns (2,) or (m, 2). bound is the declared sup of the |alpha|, |beta|
    entries, validated by probes. Scalar noise (d = 1) is assumed throughout.
    """

    alpha: object
    beta: object
    c: object
    a1: float
    a2: float
    bound: float

    @staticmethod
    def from_constants(alpha, beta, a1: float, a2: float, c=(0.0, 0.0)) -> "LinearUtilityCoeffs":
        al = np.array(alpha, dtype=float).reshape(2, 2)
        be = np.array(beta, dtype=float).reshape(2, 2)
        cv = np.array(c, dtype=float).reshape(2)
        bound = float(max(np.abs(al).max(), np.abs(be).max(), 1e-12))
        return LinearUtilityCoeffs(
            alpha=lambda t, b: al, beta=lambda t, b: be,
            c=lambda t, b, u: cv, a1=float(a1), a2=float(a2), bound=bound)


def _coeff_at(fn, t, b, m):
    return np.broadcast_to(np.asarray(fn(t, b), dtype=float), (m, 2, 2))


def _probe_bounds(coeffs: LinearUtilityCoeffs, T: float) -> None:
    for t in np.linspace(0.0, T, 5):
        for fn in (coeffs.alpha, coeffs.beta):
            arr = np.asarray(fn(t, np.zeros(1)), dtype=float)
            if np.abs(arr).max() > coeffs.bound * (1 + 1e-9):
                raise ProblemValidationError(
                    f"coefficient entry {np.abs(arr).max():.3g} exceeds declared "
                    f"bound {coeffs.bound}")


def riccati_polynomials(alpha, beta, parity: int):
    """(drift, volatility) coefficient arrays (x^3..1 / x^2..1) for the ratio SDE.

    parity 1: active component 1, frozen component 2; parity 2 swaps the roles.
    alpha, beta are (2, 2) (or (m, 2, 2)) arrays; returns arrays with a leading
    coefficient axis broadcastable over nodes.
    """
    i, j = (0, 1) if parity == 1 else (1, 0)
    al = np.asarray(alpha, dtype=float)
    be = np.asarray(beta, dtype=float)
    sig = np.stack([
        -be[..., i, j],
        be[..., i, i] - be[..., j, j],
        be[..., j, i],
    ])
    drift = np.stack([
        be[..., i, j] ** 2,
        -al[..., i, j] - be[..., i, j] * (be[..., i, i] - be[..., j, j])
        + be[..., i, j] * be[..., j, j],
        al[..., i, i] - al[..., j, j] - be[..., j, j] * (be[..., i, i] - be[..., j, j])
        - be[..., i, j] * be[..., j, i],
        al[..., j, i] - be[..., j, i] * be[..., j, j],
    ])
    return drift, sig


def _poly_eval(coeff, x):
    """Evaluate stacked polynomial coefficients (highest power first) at x."""
    out = np.zeros_like(np.broadcast_arrays(coeff[0], x)[1], dtype=float)
    for ck in coeff:
        out = out * x + ck
    return out


@dataclass(frozen=True)
class SwitchingPath:
    """One realized weight path: ratio, regime parity, weights, switch markers."""

    times: np.ndarray
    ahat: np.ndarray
    parity: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    is_switch: np.ndarray
    switch_times: tuple
    overshoot: float

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,Ahat,regime,A1,A2,is_switch\n")
            for k in range(len(self.times)):
                fh.write(
                    f"{self.times[k]:.11e},{self.ahat[k]:.11e},{int(self.parity[k])},"
                    f"{self.A1[k]:.11e},{self.A2[k]:.11e},{int(self.is_switch[k])}\n")


@dataclass(frozen=True)
class LinearUtility:
    """Constructed linear weights on a tree or path ensemble, plus the utility."""

    coeffs: LinearUtilityCoeffs
    mode: str            # "tree" | "ensemble"
    times: np.ndarray
    A1: tuple            # level -> (m,) weights (original component labels)
    A2: tuple
    ahat: tuple          # construction-frame ratio per level
    parity: tuple
    anchor: tuple
    switch_flags: tuple
    lam: tuple           # tree mode: level -> (m,) contraction factor 1 + alpha_hat*dt
    mu: tuple            # tree mode: level -> (m,) beta_hat*dt
    min_monotone: float  # min over nodes of min(lam +- mu/sqrt(dt)); >= 0 <=> order-preserving
    overshoot: float
    swapped: bool
    utility: DynamicUtility
    n_paths: int

    def path(self, i: int) -> SwitchingPath:
        """Path i of the ensemble, or the root-to-leaf-i path of the tree."""
        n = len(self.times) - 1
        if self.mode == "ensemble":
            idx = [i] * (n + 1)
        else:
            idx = [i >> (n - j) for j in range(n + 1)]
        ahat = np.array([self.ahat[j][idx[j]] for j in range(n + 1)])
        par = np.array([self.parity[j][idx[j]] for j in range(n + 1)])
        a1 = np.array([self.A1[j][idx[j]] for j in range(n + 1)])
        a2 = np.array([self.A2[j][idx[j]] for j in range(n + 1)])
        sw = np.array([bool(self.switch_flags[j][idx[j]]) for j in range(n + 1)])
        stimes = tuple(float(self.times[j]) for j in range(n + 1) if sw[j])
        over = 0.0
        for j in range(1, n + 1):
            if sw[j]:
                # the new anchor is old_anchor * crossing ratio
                ratio = self.anchor[j][idx[j]] / self.anchor[j - 1][idx[j - 1]]
                over = max(over, abs(ratio) - 2.0)
        return SwitchingPath(times=self.times.copy(), ahat=ahat, parity=par,
                             A1=a1, A2=a2, is_switch=sw, switch_times=stimes,
                             overshoot=over)


def _max_step_estimate(coeffs: LinearUtilityCoeffs, T: float, dt: float) -> float:
    """Worst one-step ratio change of the clamped dynamics (grid-sampled sup)."""
    xs = np.linspace(-2.0, 2.0, 401)
    worst = 0.0
    for parity in (1, 2):
        for t in np.linspace(0.0, T, 5):
            al = np.asarray(coeffs.alpha(t, np.zeros(1)), dtype=float).reshape(2, 2)
            be = np.asarray(coeffs.beta(t, np.zeros(1)), dtype=float).reshape(2, 2)
            drift, sig = riccati_polynomials(al, be, parity)
            worst = max(worst,
                        float(np.abs(_poly_eval(drift, xs)).max()) * dt
                        + float(np.abs(_poly_eval(sig, xs)).max()) * np.sqrt(dt))
    return worst


def _normalize(coeffs: LinearUtilityCoeffs):
    """Apply the |a1| <= |a2| role swap; returns (alpha', beta', c', a1', a2', swapped)."""
    if coeffs.a1 == 0.0 and coeffs.a2 == 0.0:
        raise DegenerateUtilityError(
            "both initial weights are zero: the static value is 0 and the "
            "utility is trivial")
    swapped = abs(coeffs.a1) > abs(coeffs.a2)
    if not swapped:
        return coeffs.alpha, coeffs.beta, coeffs.c, coeffs.a1, coeffs.a2, False
    perm = np.array([1, 0])

    def alpha_p(t, b):
        a = np.asarray(coeffs.alpha(t, b), dtype=float)
        return a[..., perm, :][..., :, perm]

    def beta_p(t, b):
        a = np.asarray(coeffs.beta(t, b), dtype=float)
        return a[..., perm, :][..., :, perm]

    def c_p(t, b, u):
        return np.asarray(coeffs.c(t, b, u), dtype=float)[..., perm]

    return alpha_p, beta_p, c_p, coeffs.a2, coeffs.a1, True


def build_linear_utility(coeffs: LinearUtilityCoeffs, tree: ScenarioTree | None = None,
                         *, grid: TimeGrid | None = None, n_paths: int | None = None,
                         seed: int = 0, overshoot_limit: float = 0.1) -> LinearUtility:
    """Construct the linear weights A^1, A^2 and the utility Phi(t,y) = A.y.

    Pass a tree (scalar noise) for the exact per-node construction, or
    (grid, n_paths, seed) for the Euler ensemble with Rademacher increments.
    The regime ratio is restarted by inversion whenever |ratio| >= 2; an a
    priori one-step bound must stay below overshoot_limit.
    """
    if tree is not None:
        if tree.d != 1:
            raise ValueError("linear utility construction implemented for scalar noise")
        if tree.mode != "path":
            raise ValueError("tree construction needs path mode")
        times, dt, n = tree.grid.times(), tree.dt, tree.n
        T = tree.grid.T
        counts = [tree.node_count(j) for j in range(n + 1)]
        node_b = [tree.values[j][:, 0] for j in range(n + 1)]
    else:
        if grid is None or n_paths is None:
            raise ValueError("pass a tree, or grid= and n_paths=")
        times, dt, n, T = grid.times(), grid.dt, grid.n, grid.T
        counts = [n_paths] * (n + 1)
    _probe_bounds(coeffs, T)
    step_bound = _max_step_estimate(coeffs, T, dt)
    if step_bound > overshoot_limit:
        raise StepSizeError(
            f"one-step ratio change bound {step_bound:.3g} exceeds the overshoot "
            f"limit {overshoot_limit}; decrease dt")
    alpha, beta, c_fn, a1, a2, swapped = _normalize(coeffs)
    sdt = np.sqrt(dt)

    parity = [np.ones(counts[0], dtype=np.int64)]
    anchor = [np.full(counts[0], a2)]
    ahat = [np.full(counts[0], a1 / a2)]
    flags = [np.zeros(counts[0], dtype=bool)]
    lam_levels, mu_levels = [], []
    min_mono = np.inf
    overshoot = 0.0

    if tree is None:
        rng = np.random.default_rng(np.random.Philox(seed))
        b_path = np.zeros(n_paths)

    for j in range(n):
        p, an, ah = parity[j], anchor[j], ahat[j]
        m = counts[j]
        b_here = node_b[j] if tree is not None else b_path
        al = _coeff_at(alpha, times[j], b_here, m)
        be = _coeff_at(beta, times[j], b_here, m)
        ii = np.where(p == 1, 0, 1)
        jj = 1 - ii
        rows = np.arange(m)
        a_hat_c = al[rows, ii, jj] * ah + al[rows, jj, jj]
        b_hat_c = be[rows, ii, jj] * ah + be[rows, jj, jj]
        lam = 1.0 + a_hat_c * dt
        mu = b_hat_c * dt
        lam_levels.append(lam)
        mu_levels.append(mu)
        min_mono = min(min_mono, float(np.min(lam + mu / sdt)),
                       float(np.min(lam - mu / sdt)))
        active = an * ah
        drift_num = (al[rows, ii, ii] * active + al[rows, jj, ii] * an) * dt
        vol_num = (be[rows, ii, ii] * active + be[rows, jj, ii] * an) * sdt

        if tree is not None:
            # exact children: active weight obeys the matched division formula
            new_p = np.empty(counts[j + 1], dtype=np.int64)
            new_an = np.empty(counts[j + 1])
            new_ah = np.empty(counts[j + 1])
            new_fl = np.zeros(counts[j + 1], dtype=bool)
            for sgn, child in ((1.0, 1), (-1.0, 0)):
                den = lam + sgn * mu / sdt
                if np.any(np.abs(den) < 0.05):
                    raise StepSizeError(
                        "contraction factor nearly singular; decrease dt")
                act_child = (active + drift_num + sgn * vol_num) / den
                ah_child = act_child / an
                sw = np.abs(ah_child) >= 2.0
                overshoot = max(overshoot, float(np.max(
                    np.where(sw, np.abs(ah_child) - 2.0, 0.0), initial=0.0)))
                idx = rows * 2 + child
                new_p[idx] = np.where(sw, 3 - p, p)
                new_an[idx] = np.where(sw, an * ah_child, an)
                new_ah[idx] = np.where(sw, 1.0 / ah_child, ah_child)
                new_fl[idx] = sw
            parity.append(new_p)
            anchor.append(new_an)
            ahat.append(new_ah)
            flags.append(new_fl)
        else:
            # Euler step of the truncated ratio SDE
            clamped = np.clip(ah, -2.0, 2.0)
            d1, s1 = riccati_polynomials(al, be, 1)
            d2, s2 = riccati_polynomials(al, be, 2)
            drift = np.where(p == 1, _poly_eval(d1, clamped), _poly_eval(d2, clamped))
            vol = np.where(p == 1, _poly_eval(s1, clamped), _poly_eval(s2, clamped))
            db = (2.0 * rng.integers(0, 2, size=m) - 1.0) * sdt
            ah_next = ah + drift * dt + vol * db
            b_path = b_path + db
            sw = np.abs(ah_next) >= 2.0
            overshoot = max(overshoot, float(np.max(
                np.where(sw, np.abs(ah_next) - 2.0, 0.0), initial=0.0)))
            parity.append(np.where(sw, 3 - p, p))
            anchor.append(np.where(sw, an * ah_next, an))
            safe = np.where(sw, ah_next, 1.0)  # |ah_next| >= 2 wherever sw
            ahat.append(np.where(sw, 1.0 / safe, ah_next))
            flags.append(sw)

    A1p, A2p = [], []
    for j in range(n + 1):
        act = anchor[j] * ahat[j]
        A1p.append(np.where(parity[j] == 1, act, anchor[j]))
        A2p.append(np.where(parity[j] == 1, anchor[j], act))
    if swapped:
        A1o, A2o = A2p, A1p
    else:
        A1o, A2o = A1p, A2p
    A1o = tuple(np.asarray(a) for a in A1o)
    A2o = tuple(np.asarray(a) for a in A2o)

    orig_a1, orig_a2 = coeffs.a1, coeffs.a2

    def phi(y):
        y = np.asarray(y, dtype=float).reshape(-1, 2)
        return orig_a1 * y[:, 0] + orig_a2 * y[:, 1]

    def evaluate(level, y, nodes=None):
        y = np.asarray(y, dtype=float).reshape(-1, 2)
        w1, w2 = A1o[level], A2o[level]
        if nodes is not None:
            w1, w2 = w1[np.asarray(nodes)], w2[np.asarray(nodes)]
        return w1 * y[:, 0] + w2 * y[:, 1]

    return LinearUtility(
        coeffs=coeffs, mode="tree" if tree is not None else "ensemble",
        times=times, A1=A1o, A2=A2o, ahat=tuple(ahat), parity=tuple(parity),
        anchor=tuple(anchor), switch_flags=tuple(flags),
        lam=tuple(lam_levels), mu=tuple(mu_levels),
        min_monotone=float(min_mono) if np.isfinite(min_mono) else 1.0,
        overshoot=overshoot, swapped=swapped,
        utility=DynamicUtility(evaluate=evaluate, phi=phi, value_dim=2),
        n_paths=counts[0] if tree is None else tree.node_count(0),
    )


# ---------------------------------------------------------------------------
# switching-time tail bound


@dataclass(frozen=True)
class TauBoundRow:
    switch_index: int
    frequency: float
    std_error: float
    bound: float
    vacuous: bool
    passed: bool


@dataclass(frozen=True)
class OneStepRow:
    after_switch: int
    conditioning_count: int
    frequency: float
    std_error: float
    passed: bool


@dataclass(frozen=True)
class TauBoundReport:
    C_hat: float
    delta: float
    m: int
    rows: tuple
    one_step: tuple
    failures: tuple
    overshoot: float
    seed: int


def verify_tau_bound(coeffs: LinearUtilityCoeffs, T: float, switch_indices,
                     steps: int, n_paths: int, seed: int = 0,
                     delta: float | None = None, pilot_paths: int = 2000,
                     safety: float = 2.0, overshoot_limit: float = 0.1) -> TauBoundReport:
    """Monte Carlo check of P(tau_n < T) <= min(1, (2n)^m / 2^n).

    delta defaults to 1/(2C) with C = safety * (fitted constant in
    E[sup_{s<=t} |ratio_s - ratio_0|^2] <= C t) from a switch-free pilot run of
    the truncated SDE. Also checks the one-step bound: conditionally on the k-th
    switch before T, the next switch within delta has frequency <= 1/2 + 3 SE.
    """
    grid = TimeGrid(T=T, n=steps)
    if delta is None:
        alpha, beta, _, a1, a2, _ = _normalize(coeffs)
        rng = np.random.default_rng(np.random.Philox(seed + 10 ** 6))
        ah = np.full(pilot_paths, a1 / a2)
        sup_sq = np.zeros(pilot_paths)
        dt, sdt = grid.dt, np.sqrt(grid.dt)
        C_hat = 0.0
        for k in range(steps):
            al = _coeff_at(alpha, grid.times()[k], np.zeros(1), 1)[0]
            be = _coeff_at(beta, grid.times()[k], np.zeros(1), 1)[0]
            d1, s1 = riccati_polynomials(al, be, 1)
            clamped = np.clip(ah, -2.0, 2.0)
            db = (2.0 * rng.integers(0, 2, size=pilot_paths) - 1.0) * sdt
            ah = ah + _poly_eval(d1, clamped) * dt + _poly_eval(s1, clamped) * db
            sup_sq = np.maximum(sup_sq, (ah - a1 / a2) ** 2)
            C_hat = max(C_hat, float(sup_sq.mean()) / grid.times()[k + 1])
        C = safety * C_hat
        delta = np.inf if C == 0 else 1.0 / (2.0 * C)
    else:
        C_hat = np.nan

    m = 0 if delta >= T else int(np.ceil(T / delta)) - 1

    lin = build_linear_utility(coeffs, grid=grid, n_paths=n_paths, seed=seed,
                               overshoot_limit=overshoot_limit)
    flag_mat = np.stack(lin.switch_flags[1:])            # (steps, n_paths)
    switch_level = [np.nonzero(flag_mat[:, i])[0] + 1 for i in range(n_paths)]
    times = grid.times()
    eps_t = 1e-12

    def tau(i, k):
        """Time of the k-th switch of path i (np.inf if fewer than k switches)."""
        lv = switch_level[i]
        return times[lv[k - 1]] if len(lv) >= k else np.inf

    rows = []
    failures = []
    for nn in switch_indices:
        hits = np.array([tau(i, nn) < T - eps_t for i in range(n_paths)])
        freq = float(hits.mean())
        se = float(np.sqrt(freq * (1 - freq) / n_paths))
        bound = min(1.0, (2 * nn) ** m / 2 ** nn)
        vacuous = bound >= 1.0
        passed = vacuous or (freq + 3 * se <= bound)
        rows.append(TauBoundRow(switch_index=nn, frequency=freq, std_error=se,
                                bound=bound, vacuous=vacuous, passed=passed))
        if not passed:
            failures.append(("tail", nn, seed))

    one_step = []
    max_k = max((len(lv) for lv in switch_level), default=0)
    for k in range(0, max_k + 1):
        base = [i for i in range(n_paths) if tau(i, k) < T - eps_t] if k else list(range(n_paths))
        if len(base) < 20:
            continue
        start = np.array([tau(i, k) if k else 0.0 for i in base])
        nxt = np.array([tau(i, k + 1) for i in base])
        ev = nxt < np.minimum(T - eps_t, start + delta)
        freq = float(ev.mean())
        se = float(np.sqrt(freq * (1 - freq) / len(base))) or float(np.sqrt(0.25 / len(base)))
        passed = freq <= 0.5 + 3 * se
        one_step.append(OneStepRow(after_switch=k, conditioning_count=len(base),
                                   frequency=freq, std_error=se, passed=passed))
        if not passed:
            failures.append(("one-step", k, seed))
    return TauBoundReport(C_hat=float(C_hat), delta=float(delta), m=m,
                          rows=tuple(rows), one_step=tuple(one_step),
                          failures=tuple(failures), overshoot=lin.overshoot,
                          seed=seed)


# ---------------------------------------------------------------------------
# linear comparison with the contracted recursion


@dataclass(frozen=True)
class LinearComparisonReport:
    pairs_checked: int
    policies_per_pair: int
    violations: tuple
    worst_slack: float
    recursion_residual: float
    min_monotone: float
    tol: float


def _probe_linear_form(problem: BSDEProblem, coeffs: LinearUtilityCoeffs,
                       tree: ScenarioTree, seed: int = 0) -> None:
    rng = np.random.default_rng(np.random.Philox(seed))
    ctx = NodeContext(level=0, b=tree.values[0], tree=tree)
    m = ctx.b.shape[0]
    for _ in range(8):
        y = rng.normal(size=(m, 2))
        z = rng.normal(size=(m, 2, 1))
        u = np.full(m, problem.control_values[rng.integers(len(problem.control_values))])
        t = float(rng.uniform(0, tree.grid.T))
        al = _coeff_at(coeffs.alpha, t, ctx.b[:, 0], m)
        be = _coeff_at(coeffs.beta, t, ctx.b[:, 0], m)
        cv = np.broadcast_to(np.asarray(coeffs.c(t, ctx.b[:, 0], u), dtype=float), (m, 2))
        expected = (np.einsum("mij,mj->mi", al, y)
                    + np.einsum("mij,mj->mi", be, z[:, :, 0]) + cv)
        got = np.asarray(problem.f(t, ctx, y, z, u), dtype=float)
        if np.max(np.abs(got - expected)) > 1e-10:
            raise StructureError(
                "generator does not match the declared linear coefficients")


def make_comparison_pairs(lin: LinearUtility, problem: BSDEProblem,
                          tree: ScenarioTree, count: int = 5, seed: int = 0):
    """Terminal pairs (xi, xi + positive bump aligned with the terminal weights)."""
    rng = np.random.default_rng(np.random.Philox(seed))
    n = tree.n
    ctx = NodeContext(level=n, b=tree.values[n], tree=tree)
    xi = np.asarray(problem.terminal(ctx), dtype=float).reshape(-1, 2)
    w = np.stack([lin.A1[n], lin.A2[n]], axis=1)
    norm = np.linalg.norm(w, axis=1, keepdims=True)
    direction = np.where(norm > 1e-14, w / np.maximum(norm, 1e-300), 0.0)
    pairs = []
    for _ in range(count):
        delta = rng.uniform(0.1, 1.0)
        pairs.append((xi, xi + delta * direction))
    return pairs


def check_linear_comparison(lin: LinearUtility, problem: BSDEProblem,
                            tree: ScenarioTree, pairs=None, tol: float = 1e-8,
                            cap: int = 10 ** 5, seed: int = 0) -> LinearComparisonReport:
    """Order preservation of the contracted scalar process under every policy.

    For each terminal pair with Phi(T, xi) <= Phi(T, xi~) node-wise and each
    enumerated policy, checks Phi(j, Y_j(xi)) <= Phi(j, Y_j(xi~)) + tol at every
    node and level, and reports the worst residual of the exact one-step
    recursion of the contracted process.
    """
    if lin.mode != "tree":
        raise ValueError("needs a tree-mode linear utility")
    _probe_linear_form(problem, coeffs=lin.coeffs, tree=tree, seed=seed)
    if pairs is None:
        pairs = make_comparison_pairs(lin, problem, tree, seed=seed)
    n, dt = tree.n, tree.dt
    U = problem.control_values
    slots = [(j, i) for j in range(n) for i in range(tree.node_count(j))]
    total = len(U) ** len(slots)
    if total > cap:
        raise EnumerationCapError(f"{total} policies exceed cap {cap}")
    times = tree.grid.times()
    inc = tree.increments
    pairs_checked = 0
    violations = []
    worst = -np.inf
    rec_res = 0.0

    def contracted(sol):
        return [lin.A1[j] * sol.Y[j][:, 0] + lin.A2[j] * sol.Y[j][:, 1]
                for j in range(n + 1)]

    def recursion_residual(yhat, policy):
        res = 0.0
        for j in range(n - 1, -1, -1):
            cv = tree.child_values(j, yhat[j + 1][:, None])
            ehat = cv[:, :, 0].mean(axis=1)
            zhat = np.einsum("mc,ci->mi", cv[:, :, 0], inc)[:, 0] / (inc.shape[0] * dt)
            b_here = tree.values[j][:, 0]
            cval = np.broadcast_to(np.asarray(
                lin.coeffs.c(times[j], b_here, np.asarray(policy.levels[j])),
                dtype=float), (tree.node_count(j), 2))
            source = (lin.A1[j] * cval[:, 0] + lin.A2[j] * cval[:, 1]) * dt
            pred = lin.lam[j] * ehat + lin.mu[j] * zhat + source
            res = max(res, float(np.max(np.abs(yhat[j] - pred))))
        return res

    for p_idx, (eta, eta_t) in enumerate(pairs):
        eta = np.asarray(eta, dtype=float).reshape(tree.node_count(n), 2)
        eta_t = np.asarray(eta_t, dtype=float).reshape(tree.node_count(n), 2)
        phi_T = lin.utility.evaluate(n, eta)
        phi_Tt = lin.utility.evaluate(n, eta_t)
        if np.any(phi_T > phi_Tt + 1e-12):
            continue
        pairs_checked += 1
        for assignment in itertools.product(range(len(U)), repeat=len(slots)):
            levels = [np.empty(tree.node_count(j)) for j in range(n)]
            for (j, i), a in zip(slots, assignment):
                levels[j][i] = U[a]
            pol = ControlPolicy(tuple(levels))
            sol_a = solve_bsde(problem, tree, pol,
                               terminal_rv=TreeRandomVariable(n, eta),
                               terminal_level=n)
            sol_b = solve_bsde(problem, tree, pol,
                               terminal_rv=TreeRandomVariable(n, eta_t),
                               terminal_level=n)
            ya, yb = contracted(sol_a), contracted(sol_b)
            rec_res = max(rec_res, recursion_residual(ya, pol))
            for j in range(n + 1):
                diff = ya[j] - yb[j]
                worst = max(worst, float(np.max(diff)))
                bad = np.nonzero(diff > tol)[0]
                for node in bad:
                    violations.append((p_idx, assignment, j, int(node), float(diff[node])))
    return LinearComparisonReport(
        pairs_checked=pairs_checked, policies_per_pair=total,
        violations=tuple(violations),
        worst_slack=worst if pairs_checked else 0.0,
        recursion_residual=rec_res, min_monotone=lin.min_monotone, tol=tol)
