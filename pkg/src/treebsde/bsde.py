"""Controlled multidimensional BSDEs on scenario trees.

Explicit backward scheme on the +/-sqrt(dt) tree:

    Z_j = E_j[Y_{j+1} dB^T] / dt
    Y_j = E_j[Y_{j+1}] + f(t_j, node, E_j[Y_{j+1}], Z_j, u_j) * dt

The static problem sup_u phi(Y^u_0) is solved by policy enumeration (lexicographic
tie-break) with an optional coordinate-ascent fallback above the cap.

For d'=1 the scheme is monotone (hence order-preserving in the terminal data) when
1 - L*dt - L*sqrt(dt) >= 0; the sqrt(dt) term enters through the z-slot. This is
sharper than the dt < 1/(2L) rule of thumb and is what solve_bsde warns about.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from treebsde.lattice import ScenarioTree, TreeRandomVariable, ModeError


class ProblemValidationError(ValueError):
    """Declared problem structure failed a probe."""


class EnumerationCapError(ValueError):
    """Policy space larger than the enumeration cap."""


@dataclass
class NodeContext:
    """What the generator sees at one level: current Brownian values per node."""

    level: int
    b: np.ndarray  # (m, d)
    tree: ScenarioTree | None = None


@dataclass
class BSDEProblem:
    """Generator f(t, ctx, y, z, u) -> (m, d'), terminal xi(ctx) -> (m, d'), utility phi.

    f must be vectorized over nodes: y has shape (m, d'), z has shape (m, d', d),
    u is an (m,) array of control values from the finite set control_values.
    lipschitz_L is the declared Lipschitz constant in (y, z), validated by probes.
    deterministic_controls restricts policies to functions of time only (one control
    value per level), matching problems whose admissible class is deterministic.
    """

    value_dim: int
    f: object
    terminal: object
    phi: object
    control_values: tuple
    lipschitz_L: float
    deterministic_controls: bool = False
    phi_lipschitz: float | None = None
    _lip_checked: bool = field(default=False, repr=False)


@dataclass(frozen=True)
class ControlPolicy:
    """One control value per node per level (levels 0..k-1 for a solve up to k)."""

    levels: tuple  # level j -> (m_j,) array of control values

    @staticmethod
    def constant(tree: ScenarioTree, value: float, last_level: int | None = None) -> "ControlPolicy":
        k = tree.n if last_level is None else last_level
        return ControlPolicy(tuple(
            np.full(tree.node_count(j), float(value)) for j in range(k)
        ))

    @staticmethod
    def from_level_values(tree: ScenarioTree, values, last_level: int | None = None) -> "ControlPolicy":
        """Deterministic (time-indexed) policy: values[j] broadcast over level j."""
        k = tree.n if last_level is None else last_level
        return ControlPolicy(tuple(
            np.full(tree.node_count(j), float(values[j])) for j in range(k)
        ))


def monotone_step_bound(L: float) -> float:
    """Largest dt with 1 - L*dt - L*sqrt(dt) >= 0 (comparison-preserving scheme)."""
    if L <= 0:
        return np.inf
    x = (-L + np.sqrt(L * L + 4 * L)) / (2 * L)  # x = sqrt(dt)
    return x * x


def probe_lipschitz(problem: BSDEProblem, tree: ScenarioTree, seed: int = 0,
                    samples: int = 24, scale: float = 2.0) -> None:
    """Random finite-difference probes of |f(y,z) - f(y',z')| <= L(|y-y'| + |z-z'|)."""
    rng = np.random.default_rng(np.random.Philox(seed))
    dpr, d = problem.value_dim, tree.d
    lvl = 0
    ctx = NodeContext(level=lvl, b=tree.values[lvl], tree=tree)
    m = ctx.b.shape[0]
    t = 0.0
    for _ in range(samples):
        y = rng.normal(size=(m, dpr)) * scale
        z = rng.normal(size=(m, dpr, d)) * scale
        dy = rng.normal(size=(m, dpr)) * scale * 0.1
        dz = rng.normal(size=(m, dpr, d)) * scale * 0.1
        u = np.full(m, problem.control_values[rng.integers(len(problem.control_values))])
        f0 = np.asarray(problem.f(t, ctx, y, z, u))
        f1 = np.asarray(problem.f(t, ctx, y + dy, z + dz, u))
        lhs = np.linalg.norm(f1 - f0, axis=-1)
        rhs = problem.lipschitz_L * (
            np.linalg.norm(dy, axis=-1) + np.linalg.norm(dz.reshape(m, -1), axis=-1)
        )
        if np.any(lhs > rhs * (1 + 1e-9) + 1e-12):
            raise ProblemValidationError(
                f"Lipschitz probe failed: |df| = {float(lhs.max()):.3e} exceeds "
                f"L*(|dy|+|dz|) with declared L = {problem.lipschitz_L}"
            )
    problem._lip_checked = True


@dataclass(frozen=True)
class BSDESolution:
    """Y per level 0..terminal_level, Z per level 0..terminal_level-1."""

    Y: tuple   # level -> (m, d')
    Z: tuple   # level -> (m, d', d)
    terminal_level: int


def solve_bsde(problem: BSDEProblem, tree: ScenarioTree,
               policy: ControlPolicy | None = None,
               terminal_level: int | None = None,
               terminal_rv: TreeRandomVariable | None = None) -> BSDESolution:
    """Backward induction on [0, terminal_level] under the given policy.

    Default terminal data is problem.terminal evaluated at the last level; pass
    (terminal_level, terminal_rv) to solve from intermediate data eta at level k.
    """
    n, dt, d, dpr = tree.n, tree.dt, tree.d, problem.value_dim
    k = n if terminal_level is None else terminal_level
    if not 0 <= k <= n:
        raise ValueError(f"terminal level {k} outside 0..{n}")
    if not problem._lip_checked:
        probe_lipschitz(problem, tree)
    if problem.value_dim == 1:
        bound = monotone_step_bound(problem.lipschitz_L)
        if dt > bound * (1 + 1e-12):
            warnings.warn(
                f"dt = {dt:.4g} exceeds the comparison-preserving bound {bound:.4g} "
                f"(1 - L*dt - L*sqrt(dt) < 0); order preservation not guaranteed",
                stacklevel=2,
            )
    if terminal_rv is not None:
        if terminal_rv.level != k:
            raise ValueError(f"terminal_rv at level {terminal_rv.level}, expected {k}")
        eta = np.asarray(terminal_rv.values, dtype=float).reshape(tree.node_count(k), dpr)
    else:
        ctx = NodeContext(level=k, b=tree.values[k], tree=tree)
        eta = np.asarray(problem.terminal(ctx), dtype=float).reshape(tree.node_count(k), dpr)
    if policy is None:
        policy = ControlPolicy.constant(tree, problem.control_values[0], last_level=k)
    if len(policy.levels) < k:
        raise ValueError(f"policy covers {len(policy.levels)} levels, need {k}")

    times = tree.grid.times()
    inc = tree.increments  # (2^d, d)
    nc = inc.shape[0]
    Ys = [None] * (k + 1)
    Zs = [None] * k
    Ys[k] = eta
    cur = eta
    for j in range(k - 1, -1, -1):
        cv = tree.child_values(j, cur)          # (m, 2^d, d')
        P = cv.mean(axis=1)                     # E_j[Y_{j+1}]
        Z = np.einsum("mcv,ci->mvi", cv, inc) / (nc * dt)
        u = np.asarray(policy.levels[j], dtype=float)
        ctx = NodeContext(level=j, b=tree.values[j], tree=tree)
        fv = np.asarray(problem.f(times[j], ctx, P, Z, u), dtype=float)
        if fv.shape != P.shape:
            raise ValueError(f"generator returned shape {fv.shape}, expected {P.shape}")
        cur = P + fv * dt
        Ys[j] = cur
        Zs[j] = Z
    return BSDESolution(Y=tuple(Ys), Z=tuple(Zs), terminal_level=k)


# ---------------------------------------------------------------------------
# policy enumeration


def _slots(tree: ScenarioTree, j0: int, j1: int, deterministic: bool):
    """Decision slots for levels j0..j1-1, level-major then node-ascending."""
    if deterministic:
        return [(j, None) for j in range(j0, j1)]
    return [(j, i) for j in range(j0, j1) for i in range(tree.node_count(j))]


def _materialize(tree: ScenarioTree, j1: int, slots, assignment, U) -> ControlPolicy:
    levels = [np.full(tree.node_count(j), float(U[0])) for j in range(j1)]
    for (j, i), a in zip(slots, assignment):
        if i is None:
            levels[j][:] = U[a]
        else:
            levels[j][i] = U[a]
    return ControlPolicy(tuple(levels))


@dataclass(frozen=True)
class StaticValue:
    value: float
    policy: ControlPolicy
    assignment: tuple
    enumerated: int
    heuristic: bool


def maximize_over_policies(problem: BSDEProblem, tree: ScenarioTree,
                           objective, start_level: int = 0,
                           terminal_level: int | None = None,
                           terminal_rv: TreeRandomVariable | None = None,
                           cap: int = 10 ** 6, fallback: str | None = None):
    """Per-node max at start_level of objective(Y_{start_level}) over segment policies.

    objective maps (m, d') -> (m,). Returns (per-node max values, per-node argmax
    assignments, enumerated count, heuristic flag). Policies on [start_level, k)
    are enumerated lexicographically; ties keep the first (smallest) assignment.
    """
    k = tree.n if terminal_level is None else terminal_level
    U = problem.control_values
    slots = _slots(tree, start_level, k, problem.deterministic_controls)
    total = len(U) ** len(slots) if slots else 1
    m0 = tree.node_count(start_level)

    def evaluate(assignment):
        pol = _materialize(tree, k, slots, assignment, U)
        sol = solve_bsde(problem, tree, pol, terminal_level=k, terminal_rv=terminal_rv)
        return np.asarray(objective(sol.Y[start_level]), dtype=float)

    if total <= cap:
        best = np.full(m0, -np.inf)
        best_assign = [None] * m0
        for assignment in itertools.product(range(len(U)), repeat=len(slots)):
            vals = evaluate(assignment)
            improved = vals > best
            if improved.any():
                for i in np.nonzero(improved)[0]:
                    best_assign[i] = assignment
                best = np.where(improved, vals, best)
        return best, best_assign, total, False
    if fallback != "coordinate-ascent":
        raise EnumerationCapError(
            f"{total} policies exceed cap {cap}; pass fallback='coordinate-ascent'"
        )
    if m0 != 1:
        raise EnumerationCapError(
            "coordinate-ascent fallback optimizes a single start node; "
            f"level {start_level} has {m0} nodes"
        )
    assignment = [0] * len(slots)
    best = evaluate(tuple(assignment))[0]
    evals = 1
    improved = True
    while improved:
        improved = False
        for s in range(len(slots)):
            cur = assignment[s]
            for a in range(len(U)):
                if a == cur:
                    continue
                assignment[s] = a
                v = evaluate(tuple(assignment))[0]
                evals += 1
                if v > best:
                    best = v
                    cur = a
                    improved = True
            assignment[s] = cur
    return np.array([best]), [tuple(assignment)], evals, True


def static_value(problem: BSDEProblem, tree: ScenarioTree, cap: int = 10 ** 6,
                 fallback: str | None = None) -> StaticValue:
    """V_0 = max over policies of phi(Y^u_0), with the lexicographic tie-break."""
    k = tree.n
    U = problem.control_values
    slots = _slots(tree, 0, k, problem.deterministic_controls)

    def objective(y0):
        return np.asarray(problem.phi(y0), dtype=float).reshape(-1)

    vals, assigns, count, heuristic = maximize_over_policies(
        problem, tree, objective, cap=cap, fallback=fallback)
    assignment = assigns[0]
    pol = _materialize(tree, k, slots, assignment, U)
    return StaticValue(value=float(vals[0]), policy=pol, assignment=tuple(assignment),
                       enumerated=count, heuristic=heuristic)


@dataclass(frozen=True)
class ReachableSet:
    level: int
    points: tuple  # node -> (r, d') array of attainable Y values, deduplicated


def reachable_set(problem: BSDEProblem, tree: ScenarioTree, level: int,
                  cap: int = 10 ** 6) -> ReachableSet:
    """Attainable {Y^u_level(node)} over policies on [level, n], deduplicated at 1e-10."""
    n = tree.n
    U = problem.control_values
    m = tree.node_count(level)
    if problem.deterministic_controls:
        slots = _slots(tree, level, n, True)
        total = len(U) ** len(slots)
        if total > cap:
            raise EnumerationCapError(f"{total} control sequences exceed cap {cap}")
        buckets = [[] for _ in range(m)]
        for assignment in itertools.product(range(len(U)), repeat=len(slots)):
            pol = _materialize(tree, n, slots, assignment, U)
            sol = solve_bsde(problem, tree, pol)
            for i in range(m):
                buckets[i].append(sol.Y[level][i])
        return ReachableSet(level=level, points=tuple(
            _dedup(np.array(b)) for b in buckets))
    if tree.mode != "path":
        raise ModeError(
            "adapted reachable sets need path mode (per-node subtrees); "
            "use deterministic_controls or a path tree"
        )
    # per-node subtree enumeration; off-subtree slots pinned to U[0]
    points = []
    for i in range(m):
        sub = [(j, idx) for j in range(level, n)
               for idx in _subtree_indices(tree, level, i, j)]
        total = len(U) ** len(sub)
        if total > cap:
            raise EnumerationCapError(
                f"node {i}: {total} subtree policies exceed cap {cap}")
        vals = []
        for assignment in itertools.product(range(len(U)), repeat=len(sub)):
            pol = _materialize(tree, n, sub, assignment, U)
            sol = solve_bsde(problem, tree, pol)
            vals.append(sol.Y[level][i])
        points.append(_dedup(np.array(vals)))
    return ReachableSet(level=level, points=tuple(points))


def _subtree_indices(tree: ScenarioTree, level: int, node: int, j: int):
    """Indices at level j >= level descending from (level, node) in path mode."""
    span = 2 ** (tree.d * (j - level))
    return range(node * span, (node + 1) * span)


def _dedup(arr: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Deduplicate rows within tol (round-based), preserving first appearance order."""
    arr = arr.reshape(len(arr), -1)
    seen = {}
    for row in arr:
        key = tuple(np.round(row / tol).astype(np.int64))
        if key not in seen:
            seen[key] = row
    return np.array(list(seen.values()))


# ---------------------------------------------------------------------------
# envelope BSDE (time-consistent monotone structures)


class StructureError(ValueError):
    """Declared monotone structure failed a probe."""


@dataclass(frozen=True)
class EnvelopeReport:
    max_residual: float
    per_level: tuple
    consistent: bool
    structure: str


def envelope_bsde(problem: BSDEProblem, tree: ScenarioTree, structure: str = "scalar",
                  tol: float = 1e-10, probe_seed: int = 0, cap: int = 10 ** 6,
                  skip_probes: bool = False):
    """Solve with the enveloped generator fbar = sup_u f and report |V_t - phi(Ybar_t)|.

    structure='scalar': d'=1 and phi increasing. structure='componentwise': f_i
    independent of z_j and nondecreasing in y_j for j != i, phi componentwise
    increasing; fbar takes the per-component sup. V_t is computed by brute-force
    per-node maximization of phi(Y^u_t) over subtree policies.

    skip_probes computes the report even when the declared structure fails its
    probes; the resulting consistent=False then documents the DPP violation.
    """
    rng = np.random.default_rng(np.random.Philox(probe_seed))
    dpr, d = problem.value_dim, tree.d
    ctx = NodeContext(level=0, b=tree.values[0], tree=tree)
    m = ctx.b.shape[0]
    # --- monotonicity probes
    for _ in range(0 if skip_probes else 16):
        y = rng.normal(size=(m, dpr))
        bump = np.abs(rng.normal(size=(m, dpr)))
        if np.any(problem.phi(y + bump) < problem.phi(y) - 1e-12):
            raise StructureError("phi monotonicity probe failed (phi not increasing)")
    if structure == "scalar":
        if dpr != 1:
            raise StructureError("scalar structure requires d' = 1")
    elif structure == "componentwise" and skip_probes:
        pass
    elif structure == "componentwise":
        for _ in range(16):
            y = rng.normal(size=(m, dpr))
            z = rng.normal(size=(m, dpr, d))
            u = np.full(m, problem.control_values[rng.integers(len(problem.control_values))])
            f0 = np.asarray(problem.f(0.0, ctx, y, z, u))
            for i in range(dpr):
                for jj in range(dpr):
                    if jj == i:
                        continue
                    yb = y.copy()
                    yb[:, jj] += np.abs(rng.normal(size=m))
                    fb = np.asarray(problem.f(0.0, ctx, yb, z, u))
                    if np.any(fb[:, i] < f0[:, i] - 1e-12):
                        raise StructureError(
                            f"f_{i} decreasing in y_{jj} (needs nondecreasing off-diagonal)")
                    zb = z.copy()
                    zb[:, jj, :] += rng.normal(size=(m, d))
                    fz = np.asarray(problem.f(0.0, ctx, y, zb, u))
                    if np.any(np.abs(fz[:, i] - f0[:, i]) > 1e-12):
                        raise StructureError(f"f_{i} depends on z_{jj} (needs independence)")
    else:
        raise ValueError(f"unknown structure {structure!r}")

    U = problem.control_values

    def fbar(t, ctx_, y, z, u_ignored):
        stack = np.stack([
            np.asarray(problem.f(t, ctx_, y, z, np.full(y.shape[0], uv)))
            for uv in U
        ])
        return stack.max(axis=0)  # per-component sup over the finite U

    env = BSDEProblem(
        value_dim=dpr, f=fbar, terminal=problem.terminal, phi=problem.phi,
        control_values=(U[0],), lipschitz_L=problem.lipschitz_L,
        _lip_checked=True,
    )
    bar = solve_bsde(env, tree)
    # --- brute-force V_t per node and compare with phi(Ybar_t)
    residuals = []
    for t in range(tree.n + 1):
        if t == tree.n:
            v = np.asarray(problem.phi(bar.Y[t])).reshape(-1)
            residuals.append(0.0 if v.size else 0.0)
            continue
        vals, _, _, _ = maximize_over_policies(
            problem, tree, lambda y: np.asarray(problem.phi(y)).reshape(-1),
            start_level=t, cap=cap)
        residuals.append(float(np.max(np.abs(
            vals - np.asarray(problem.phi(bar.Y[t])).reshape(-1)))))
    max_res = max(residuals)
    return bar, EnvelopeReport(max_residual=max_res, per_level=tuple(residuals),
                               consistent=max_res <= tol, structure=structure)
