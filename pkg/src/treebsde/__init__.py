"""Tree-based numerics for time-inconsistent control of multidimensional BSDEs.

Modules:
  lattice     +/-sqrt(dt) scenario trees with exact conditional expectations
  bsde        controlled BSDE solving, policy enumeration, reachable sets, envelopes
  duality     dual control value W, HJB finite differences, nodal sets, geometric DPP
  dynutil     dynamic utilities, comparison checks, the linear switching construction
  master      forward value, path-derivative probes, master-equation residuals
  benchmarks  four closed-form benchmark problems with analytic references
  experiments / cli   reproducible experiment runners and the command line
"""

from treebsde.lattice import (
    TimeGrid, ScenarioTree, TreeRandomVariable,
    build_tree, conditional_expectation, path_functional,
    TreeSizeError, ModeError,
)

__all__ = [
    "TimeGrid", "ScenarioTree", "TreeRandomVariable",
    "build_tree", "conditional_expectation", "path_functional",
    "TreeSizeError", "ModeError",
]

__version__ = "0.1.0"
