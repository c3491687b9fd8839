"""Forward value function over (time, terminal-data) pairs and its calculus.

Psi(t, eta) = max over policies on [0, t) of phi(Y_0) with terminal data eta at
level t. This module provides:

  * ForwardValue / forward_value: enumeration-exact evaluation of Psi;
  * check_forward_dpp: the concatenation identity
      Psi(t2, eta) = max over [t1,t2)-policies of Psi(t1, Y_{t1}(t2, eta)),
    an exact identity under full enumeration;
  * check_lipschitz: |Psi(t,a) - Psi(t,b)| <= e^{2(1+L)LT} Lip(phi) ||a-b||
    in the tree-L2 norm;
  * CylinderFunctional / path_derivative_probe: caller-supplied closed-form
    path functionals with their time/path derivatives, validated by the
    discrete pathwise Ito identity on tree transitions (dB^2 = dt exactly);
  * master_residual: the stationarity defect
      D-_t Psi - <D_eta Psi, induced-dt eta + 1/2 tr d_bb eta>
               - sup_u <D_eta Psi, f(t, eta, d_b eta, u)>
    where D-_t freezes the path at the previous level (keeping the functional's
    time slot), D_eta is probed by per-node central bumps, and the induced
    time-derivative of a fixed-slot cylinder is zero;
  * illposed_demo: two generators agreeing at z = 0 whose sup-terms coincide
    bit-wise under a shared derivative input while their forward values differ
    by a positive gap — one equation, two value functions.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from treebsde.lattice import ScenarioTree, TreeRandomVariable
from treebsde.bsde import (
    BSDEProblem,
    NodeContext,
    StructureError,
    _materialize,
    _slots,
    maximize_over_policies,
    solve_bsde,
)


class InvalidCylinderError(ValueError):
    """Supplied path derivatives fail the discrete pathwise Ito probe."""


@dataclass
class ForwardValue:
    """Evaluator for Psi(t, eta) on a fixed problem and tree."""

    problem: BSDEProblem
    tree: ScenarioTree
    cap: int = 10 ** 6
    fallback: str | None = None

    def value(self, level: int, eta) -> float:
        val, heuristic = self.value_with_info(level, eta)
        return val

    def value_with_info(self, level: int, eta):
        eta = np.asarray(eta, dtype=float).reshape(
            self.tree.node_count(level), self.problem.value_dim)
        rv = TreeRandomVariable(level=level, values=eta)
        vals, _, _, heuristic = maximize_over_policies(
            self.problem, self.tree,
            lambda y: np.asarray(self.problem.phi(y), dtype=float).reshape(-1),
            start_level=0, terminal_level=level, terminal_rv=rv,
            cap=self.cap, fallback=self.fallback)
        return float(vals[0]), heuristic


def forward_value(problem: BSDEProblem, tree: ScenarioTree, level: int, eta,
                  cap: int = 10 ** 6, fallback: str | None = None) -> float:
    return ForwardValue(problem, tree, cap=cap, fallback=fallback).value(level, eta)


@dataclass(frozen=True)
class ForwardDppReport:
    level_from: int
    level_to: int
    psi_direct: float
    psi_nested: float
    residual: float
    heuristic: bool


def check_forward_dpp(problem: BSDEProblem, tree: ScenarioTree, t1: int, t2: int,
                      eta, cap: int = 10 ** 6,
                      fallback: str | None = None) -> ForwardDppReport:
    """Residual of the forward concatenation identity between levels t1 < t2.

    Zero to rounding under full enumeration; with a heuristic fallback the
    nested side is a restricted max, so the report carries the flag and the
    residual is one-sided (nested <= direct).
    """
    if not 0 <= t1 <= t2 <= tree.n:
        raise ValueError(f"need 0 <= t1 <= t2 <= n, got {t1}, {t2}")
    fv = ForwardValue(problem, tree, cap=cap, fallback=fallback)
    direct, h1 = fv.value_with_info(t2, eta)
    eta_arr = np.asarray(eta, dtype=float).reshape(
        tree.node_count(t2), problem.value_dim)
    rv = TreeRandomVariable(level=t2, values=eta_arr)
    U = problem.control_values
    slots = _slots(tree, t1, t2, problem.deterministic_controls)
    total = len(U) ** len(slots)
    if total > cap:
        raise ValueError(f"{total} segment policies exceed cap {cap}")
    best = -np.inf
    heuristic = h1
    for assignment in itertools.product(range(len(U)), repeat=len(slots)):
        pol = _materialize(tree, t2, slots, assignment, U)
        sol = solve_bsde(problem, tree, pol, terminal_level=t2, terminal_rv=rv)
        val, h2 = fv.value_with_info(t1, sol.Y[t1])
        heuristic = heuristic or h2
        best = max(best, val)
    return ForwardDppReport(level_from=t1, level_to=t2, psi_direct=direct,
                            psi_nested=best, residual=abs(direct - best),
                            heuristic=heuristic)


@dataclass(frozen=True)
class LipschitzReport:
    pairs_checked: int
    skipped: int
    max_ratio: float
    bound: float
    passed: bool


def check_lipschitz(problem: BSDEProblem, tree: ScenarioTree, level: int,
                    pairs, cap: int = 10 ** 6) -> LipschitzReport:
    """max |Psi(t,a) - Psi(t,b)| / ||a-b||_L2(tree) against e^{2(1+L)LT} Lip(phi)."""
    if problem.phi_lipschitz is None:
        raise ValueError("check_lipschitz needs problem.phi_lipschitz declared")
    fv = ForwardValue(problem, tree, cap=cap)
    probs = tree.probs[level]
    L = problem.lipschitz_L
    bound = float(np.exp(2.0 * (1.0 + L) * L * tree.grid.T) * problem.phi_lipschitz)
    max_ratio = 0.0
    checked = skipped = 0
    for eta1, eta2 in pairs:
        a = np.asarray(eta1, dtype=float).reshape(tree.node_count(level), -1)
        b = np.asarray(eta2, dtype=float).reshape(tree.node_count(level), -1)
        dist = float(np.sqrt(np.sum(probs[:, None] * (a - b) ** 2)))
        if dist < 1e-14:
            skipped += 1
            continue
        checked += 1
        ratio = abs(fv.value(level, a) - fv.value(level, b)) / dist
        max_ratio = max(max_ratio, ratio)
    return LipschitzReport(pairs_checked=checked, skipped=skipped,
                           max_ratio=max_ratio, bound=bound,
                           passed=max_ratio <= bound * (1 + 1e-9))


# ---------------------------------------------------------------------------
# cylinder functionals and path derivatives


@dataclass(frozen=True)
class CylinderFunctional:
    """Closed-form eta(t, path) with caller-supplied derivatives.

    value(t, path) -> (m, d'), d_t likewise, d_b(t, path) -> (m, d', d),
    d_bb(t, path) -> (m, d', d, d). path has shape (m, k+1, d): the node
    history up to the current level (a single current-value slot on
    recombining trees, so only path[:, -1, :] may be read there).
    """

    value: object
    d_t: object
    d_b: object
    d_bb: object
    name: str = "cylinder"


def node_histories(tree: ScenarioTree, level: int) -> np.ndarray:
    """(m, level+1, d) ancestor value stacks; current values only when recombining."""
    if tree.mode != "path":
        return tree.values[level][:, None, :]
    m = tree.node_count(level)
    nodes = np.arange(m)
    cols = []
    for l in range(level + 1):
        anc = nodes >> (tree.d * (level - l))
        cols.append(tree.values[l][anc])
    return np.stack(cols, axis=1)


def _cyl_shapes(cyl: CylinderFunctional, t: float, path: np.ndarray, dpr: int):
    m = path.shape[0]
    d = path.shape[2]
    val = np.asarray(cyl.value(t, path), dtype=float).reshape(m, dpr)
    dt_v = np.asarray(cyl.d_t(t, path), dtype=float).reshape(m, dpr)
    db = np.asarray(cyl.d_b(t, path), dtype=float).reshape(m, dpr, d)
    dbb = np.asarray(cyl.d_bb(t, path), dtype=float).reshape(m, dpr, d, d)
    return val, dt_v, db, dbb


@dataclass(frozen=True)
class PathDerivativeReport:
    max_residual: float
    threshold: float
    transitions: int
    passed: bool


def path_derivative_probe(cyl: CylinderFunctional, tree: ScenarioTree,
                          value_dim: int = 1, levels=None,
                          threshold: float | None = None) -> PathDerivativeReport:
    """Residual of eta(t+dt, path+) - eta(t, path) against the supplied
    dt/db/dbb expansion over tree transitions (using dB dB^T = inc inc^T,
    whose diagonal is exactly dt).

    Exactly zero for polynomial functionals of degree <= 2 in the path values;
    O(dt^{3/2}) for smooth ones. Residuals above the threshold raise an
    invalid-cylinder error.
    """
    if tree.mode != "path":
        raise ValueError("the derivative probe walks explicit paths: path mode only")
    dt = tree.dt
    times = tree.grid.times()
    inc = tree.increments
    levels = range(tree.n) if levels is None else levels
    max_res = 0.0
    scale = 1.0
    count = 0
    for j in levels:
        path = node_histories(tree, j)
        m = path.shape[0]
        val, dt_v, db, dbb = _cyl_shapes(cyl, times[j], path, value_dim)
        scale = max(scale, float(np.abs(dt_v).max()), float(np.abs(db).max()),
                    float(np.abs(dbb).max()))
        for c in range(inc.shape[0]):
            step = inc[c]
            nxt = np.concatenate(
                [path, (path[:, -1, :] + step)[:, None, :]], axis=1)
            val_n = np.asarray(cyl.value(times[j + 1], nxt),
                               dtype=float).reshape(m, value_dim)
            quad = 0.5 * np.einsum("mvab,a,b->mv", dbb, step, step)
            pred = val + dt_v * dt + np.einsum("mva,a->mv", db, step) + quad
            max_res = max(max_res, float(np.abs(val_n - pred).max()))
            count += m
    if threshold is None:
        threshold = max(100.0 * dt ** 1.5 * scale, 1e-9)
    if max_res > threshold:
        raise InvalidCylinderError(
            f"cylinder '{cyl.name}': pathwise expansion residual {max_res:.3e} "
            f"exceeds threshold {threshold:.3e}")
    return PathDerivativeReport(max_residual=max_res, threshold=float(threshold),
                                transitions=count, passed=True)


# ---------------------------------------------------------------------------
# master residual


@dataclass(frozen=True)
class MasterResidual:
    level: int
    residual: float
    left_time_term: float   # D-_t Psi with the path frozen at level t-1
    drift_term: float       # <D_eta Psi, 1/2 tr d_bb eta> (induced dt-term is 0)
    sup_term: float         # sup over node-wise controls of <D_eta Psi, f>
    induced_dt_term: float  # kept for the breakdown; identically 0 for cylinders
    probe_h: float

    def as_dict(self):
        return {
            "level": self.level,
            "residual": self.residual,
            "left_time_term": self.left_time_term,
            "drift_term": self.drift_term,
            "sup_term": self.sup_term,
            "induced_dt_term": self.induced_dt_term,
            "probe_h": self.probe_h,
        }


def eta_derivative(fv: ForwardValue, level: int, eta: np.ndarray,
                   probe_h: float = 1e-4) -> np.ndarray:
    """Riesz density of D_eta Psi w.r.t. the tree-L2 pairing, by central bumps.

    Bump size is probe_h * (1 + |eta|) per node/component; the slope divided by
    the node probability gives the density.
    """
    tree = fv.tree
    m = tree.node_count(level)
    dpr = fv.problem.value_dim
    probs = tree.probs[level]
    D = np.empty((m, dpr))
    for i in range(m):
        for k in range(dpr):
            h = probe_h * (1.0 + abs(eta[i, k]))
            up = eta.copy()
            up[i, k] += h
            dn = eta.copy()
            dn[i, k] -= h
            slope = (fv.value(level, up) - fv.value(level, dn)) / (2 * h)
            D[i, k] = slope / probs[i]
    return D


def master_residual(problem: BSDEProblem, tree: ScenarioTree,
                    cyl: CylinderFunctional, level: int, probe_h: float = 1e-4,
                    cap: int = 10 ** 6, fallback: str | None = None,
                    probe_cylinder: bool = True) -> MasterResidual:
    """Stationarity defect of the forward value along the cylinder at a level.

    The left time-difference freezes the path one level back while keeping the
    functional's time slot, so the induced time-derivative contribution of the
    cylinder is identically zero and the drift term carries only the
    second-order path derivative. The control term takes per-node maxima of
    <D_eta Psi, f(t, eta, d_b eta, u)> over the finite control set.
    """
    if level < 1:
        raise ValueError("the left time-difference needs level >= 1")
    if probe_cylinder and tree.mode == "path":
        path_derivative_probe(cyl, tree, value_dim=problem.value_dim,
                              levels=range(min(level, tree.n)))
    dt = tree.dt
    t_now = tree.grid.times()[level]
    fv = ForwardValue(problem, tree, cap=cap, fallback=fallback)

    hist_now = node_histories(tree, level)
    eta_now, _, db, dbb = _cyl_shapes(cyl, t_now, hist_now, problem.value_dim)
    psi_now = fv.value(level, eta_now)

    hist_prev = node_histories(tree, level - 1)
    frozen = np.concatenate([hist_prev, hist_prev[:, -1:, :]], axis=1) \
        if tree.mode == "path" else hist_prev
    eta_frozen = np.asarray(cyl.value(t_now, frozen), dtype=float).reshape(
        tree.node_count(level - 1), problem.value_dim)
    psi_prev = fv.value(level - 1, eta_frozen)
    left_term = (psi_now - psi_prev) / dt

    D = eta_derivative(fv, level, eta_now, probe_h=probe_h)
    probs = tree.probs[level]
    # induced drift: 1/2 trace of the second path derivative (dt-term is 0)
    half_trace = 0.5 * np.einsum("mvaa->mv", dbb)
    drift_term = float(np.sum(probs[:, None] * D * half_trace))

    ctx = NodeContext(level=level, b=tree.values[level], tree=tree)
    per_node_best = np.full(tree.node_count(level), -np.inf)
    for u in problem.control_values:
        fval = np.asarray(problem.f(t_now, ctx, eta_now, db,
                                    np.full(tree.node_count(level), u)),
                          dtype=float)
        per_node_best = np.maximum(per_node_best, np.sum(D * fval, axis=1))
    sup_term = float(np.sum(probs * per_node_best))

    return MasterResidual(
        level=level,
        residual=float(left_term - drift_term - sup_term),
        left_time_term=float(left_term), drift_term=drift_term,
        sup_term=sup_term, induced_dt_term=0.0, probe_h=probe_h)


# ---------------------------------------------------------------------------
# ill-posedness demonstration


@dataclass(frozen=True)
class IllposedReport:
    psi_1: float
    psi_2: float
    gap: float
    sup_term_1: float
    sup_term_2: float
    sup_terms_identical: bool
    z_dependent: bool
    witness: bool


def _shares_at_zero_z(f1, f2, tree: ScenarioTree, dpr: int, seed: int = 0,
                      control_values=(0.0,)) -> None:
    rng = np.random.default_rng(np.random.Philox(seed))
    ctx = NodeContext(level=0, b=tree.values[0], tree=tree)
    m = ctx.b.shape[0]
    z0 = np.zeros((m, dpr, tree.d))
    for _ in range(8):
        y = rng.normal(size=(m, dpr))
        u = np.full(m, control_values[rng.integers(len(control_values))])
        t = float(rng.uniform(0, tree.grid.T))
        a = np.asarray(f1(t, ctx, y, z0, u), dtype=float)
        b = np.asarray(f2(t, ctx, y, z0, u), dtype=float)
        if not np.array_equal(a, b):
            raise StructureError("generators disagree at z = 0")


def _is_z_dependent(f2, tree: ScenarioTree, dpr: int, control_values,
                    seed: int = 0) -> bool:
    rng = np.random.default_rng(np.random.Philox(seed + 1))
    ctx = NodeContext(level=0, b=tree.values[0], tree=tree)
    m = ctx.b.shape[0]
    for _ in range(8):
        y = rng.normal(size=(m, dpr))
        z = rng.normal(size=(m, dpr, tree.d))
        u = np.full(m, control_values[0])
        a = np.asarray(f2(0.0, ctx, y, np.zeros_like(z), u))
        b = np.asarray(f2(0.0, ctx, y, z, u))
        if np.max(np.abs(a - b)) > 1e-12:
            return True
    return False


def default_illposed_generators():
    """f1 = 0 and f2 = first z column: equal at z = 0, different value functions."""
    def f1(t, ctx, y, z, u):
        return np.zeros_like(y)

    def f2(t, ctx, y, z, u):
        return z[:, :, 0]

    return f1, f2


def illposed_demo(tree: ScenarioTree, f1=None, f2=None, terminal=None, phi=None,
                  control_values=(0.0,), lipschitz_L: float = 1.0,
                  delta: float = 1e-6, level: int | None = None,
                  probe_h: float = 1e-4, cap: int = 10 ** 6) -> IllposedReport:
    """Two generators sharing their z = 0 restriction: the candidate stationarity
    equation that only sees f(.,.,0,.) assigns both the same sup-term (verified
    bit-wise under a shared derivative input) even though their forward values
    differ (default pair: gap = horizon exactly on the tree).
    """
    if f1 is None or f2 is None:
        f1, f2 = default_illposed_generators()
    if terminal is None:
        terminal = lambda ctx: ctx.b[:, :1].copy()
    if phi is None:
        phi = lambda y: y[:, 0]
    dpr = 1
    _shares_at_zero_z(f1, f2, tree, dpr, control_values=control_values)
    z_dep = _is_z_dependent(f2, tree, dpr, control_values)

    def make(fgen):
        return BSDEProblem(value_dim=dpr, f=fgen, terminal=terminal, phi=phi,
                           control_values=control_values, lipschitz_L=lipschitz_L)

    p1, p2 = make(f1), make(f2)
    n = tree.n
    ctx_n = NodeContext(level=n, b=tree.values[n], tree=tree)
    xi = np.asarray(terminal(ctx_n), dtype=float).reshape(tree.node_count(n), dpr)
    fv1 = ForwardValue(p1, tree, cap=cap)
    fv2 = ForwardValue(p2, tree, cap=cap)
    psi1 = fv1.value(n, xi)
    psi2 = fv2.value(n, xi)
    gap = abs(psi2 - psi1)

    lvl = max(1, n // 2) if level is None else level
    hist = node_histories(tree, lvl)
    eta = hist[:, -1, :dpr].reshape(tree.node_count(lvl), dpr)
    D = eta_derivative(fv1, lvl, eta, probe_h=probe_h)  # shared derivative input
    probs = tree.probs[lvl]
    t_here = tree.grid.times()[lvl]
    ctx = NodeContext(level=lvl, b=tree.values[lvl], tree=tree)
    z0 = np.zeros((tree.node_count(lvl), dpr, tree.d))

    def sup_term(fgen):
        best = np.full(tree.node_count(lvl), -np.inf)
        for u in control_values:
            fval = np.asarray(fgen(t_here, ctx, eta, z0,
                                   np.full(tree.node_count(lvl), u)), dtype=float)
            best = np.maximum(best, np.sum(D * fval, axis=1))
        return float(np.sum(probs * best))

    s1, s2 = sup_term(f1), sup_term(f2)
    return IllposedReport(
        psi_1=psi1, psi_2=psi2, gap=gap, sup_term_1=s1, sup_term_2=s2,
        sup_terms_identical=(s1 == s2) and np.float64(s1).tobytes() == np.float64(s2).tobytes(),
        z_dependent=z_dep, witness=bool(gap >= delta and z_dep))
