"""Discrete Brownian scenario trees.

Brownian motion is approximated by a symmetric +/-sqrt(dt) walk in d coordinates:
every non-terminal node has 2^d equiprobable children, one per sign pattern.
Conditional expectations are exact finite sums, so dynamic-programming identities
can be tested to machine precision.

Node indexing is level-major. In path mode, the node index at level k encodes the
sign sequence lexicographically (earliest step most significant, coordinate 0 most
significant within a step, "-" before "+"), so the children of node j are
j*2^d + c for c in 0..2^d-1. In recombining mode, nodes are up-count tuples
(u_0,...,u_{d-1}) flattened in C order, and the coordinate value is (2u - k)*sqrt(dt).

Time integrals use the left-endpoint Riemann sum h_{t_k}*dt throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

PATH_CAP = 22  # max n*d in path mode (2^(n*d) leaves)


class TreeSizeError(ValueError):
    """Requested tree exceeds the path-mode cap."""


class ModeError(ValueError):
    """Operation not available in this tree mode."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n steps; dt is derived as T/n."""

    T: float
    n: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if self.n < 1:
            raise ValueError(f"step count n must be >= 1, got {self.n}")

    @property
    def dt(self) -> float:
        return self.T / self.n

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n + 1)


@dataclass(frozen=True)
class TreeRandomVariable:
    """Values attached to the nodes of one tree level: shape (m_k,) or (m_k, d')."""

    level: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Immutable scenario tree; build with build_tree."""

    grid: TimeGrid
    d: int
    mode: str
    values: tuple          # level k -> (m_k, d) Brownian values
    probs: tuple           # level k -> (m_k,) probabilities, sum 1 per level
    child_index: tuple     # recombining: level k -> (m_k, 2^d) child indices; path: None
    increments: np.ndarray  # (2^d, d) child increment patterns, +/- sqrt(dt)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def dt(self) -> float:
        return self.grid.dt

    def node_count(self, level: int) -> int:
        return self.values[level].shape[0]

    def child_values(self, level: int, arr: np.ndarray) -> np.ndarray:
        """Gather level+1 values into shape (m_level, 2^d, ...)."""
        if self.mode == "path":
            m = self.node_count(level)
            return arr.reshape((m, 2 ** self.d) + arr.shape[1:])
        return arr[self.child_index[level]]


def build_tree(grid: TimeGrid, d: int, mode: str = "path", cap: int = PATH_CAP) -> ScenarioTree:
    """Construct the +/-sqrt(dt) scenario tree.

    path mode: 2^(k*d) nodes at level k, capped at n*d <= cap.
    recombining mode: (k+1)^d nodes at level k.
    """
    if d < 1:
        raise ValueError(f"brownian_dim d must be >= 1, got {d}")
    if mode not in ("path", "recombining"):
        raise ValueError(f"mode must be 'path' or 'recombining', got {mode!r}")
    n, dt = grid.n, grid.dt
    sq = np.sqrt(dt)
    nc = 2 ** d
    # increment patterns, coordinate 0 most significant, bit 1 = "+"
    bits = (np.arange(nc)[:, None] >> np.arange(d - 1, -1, -1)[None, :]) & 1
    inc = (2.0 * bits - 1.0) * sq

    values, probs, children = [], [], []
    if mode == "path":
        if n * d > cap:
            raise TreeSizeError(
                f"path tree needs 2^(n*d) = 2^{n * d} leaves; cap is n*d <= {cap}"
            )
        v = np.zeros((1, d))
        p = np.ones(1)
        values.append(v)
        probs.append(p)
        for _ in range(n):
            children.append(None)
            v = (v[:, None, :] + inc[None, :, :]).reshape(-1, d)
            p = np.repeat(p / nc, nc)
            values.append(v)
            probs.append(p)
        children.append(None)
    else:
        # per-axis binomial probabilities via the pascal recursion (dyadic, near-exact)
        pb = np.ones(1)
        axes = [np.zeros(1)]
        for k in range(n + 1):
            ax = (2.0 * np.arange(k + 1) - k) * sq
            grids = np.meshgrid(*([ax] * d), indexing="ij")
            values.append(np.stack([g.ravel() for g in grids], axis=-1))
            pg = pb
            for _ in range(d - 1):
                pg = np.multiply.outer(pg, pb)
            probs.append(pg.ravel())
            if k < n:
                up = np.stack(
                    np.meshgrid(*([np.arange(k + 1)] * d), indexing="ij"), axis=-1
                ).reshape(-1, d)
                ch = np.empty((up.shape[0], nc), dtype=np.int64)
                for c in range(nc):
                    child_up = up + bits[c]
                    ch[:, c] = np.ravel_multi_index(child_up.T, (k + 2,) * d)
                children.append(ch)
                nxt = np.zeros(k + 2)
                nxt[:-1] += pb / 2
                nxt[1:] += pb / 2
                pb = nxt
            else:
                children.append(None)
            axes.append(ax)
    return ScenarioTree(
        grid=grid, d=d, mode=mode,
        values=tuple(values), probs=tuple(probs),
        child_index=tuple(children), increments=inc,
    )


def step_expectation(tree: ScenarioTree, level: int, arr: np.ndarray) -> np.ndarray:
    """One-step conditional expectation: level+1 values -> level values."""
    return tree.child_values(level, arr).mean(axis=1)


def conditional_expectation(tree: ScenarioTree, rv: TreeRandomVariable,
                            target_level: int) -> TreeRandomVariable:
    """E[rv | F_{target_level}], exact average over descendants.

    Iterates one-step averages, so the tower property holds bit-identically.
    """
    if not 0 <= target_level <= rv.level <= tree.n:
        raise ValueError(
            f"need 0 <= target {target_level} <= rv level {rv.level} <= {tree.n}"
        )
    if rv.values.shape[0] != tree.node_count(rv.level):
        raise ValueError("rv values do not match node count at its level")
    arr = rv.values
    for k in range(rv.level - 1, target_level - 1, -1):
        arr = step_expectation(tree, k, arr)
    return TreeRandomVariable(level=target_level, values=arr)


def node_path(tree: ScenarioTree, level: int, node: int) -> np.ndarray:
    """The discrete path (level+1, d) from the root to a path-mode node."""
    if tree.mode != "path":
        raise ModeError("recombining nodes do not determine a path")
    nc = 2 ** tree.d
    digits = []
    j = node
    for _ in range(level):
        digits.append(j % nc)
        j //= nc
    digits.reverse()
    path = np.zeros((level + 1, tree.d))
    for i, c in enumerate(digits):
        path[i + 1] = path[i] + tree.increments[c]
    return path


def path_functional(tree: ScenarioTree, node, functional, current_value_only: bool = False):
    """Evaluate functional(times, path) on the discrete path to node = (level, index).

    The path is the piecewise-constant (left-endpoint) record of the walk including
    the root row. In recombining mode only current-value functionals are allowed,
    declared via current_value_only; they receive the single-row path at the node.
    """
    level, idx = node
    times = tree.grid.times()[: level + 1]
    if tree.mode == "recombining":
        if not current_value_only:
            raise ModeError(
                "path-dependent functionals require path mode; pass "
                "current_value_only=True for functionals of the current value"
            )
        return functional(times[-1:], tree.values[level][idx][None, :])
    return functional(times, node_path(tree, level, idx))
