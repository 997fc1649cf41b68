"""Aggregation AMG with kernel-aware Schwarz smoothers for ``gamma * A0 + A1`` systems."""

from .amg import HierarchyOptions, build_hierarchy, cycle
from .assembly import CoupledSystem, ProblemSpec, build_system
from .krylov import SolveReport, pcg

__all__ = ["CoupledSystem", "HierarchyOptions", "ProblemSpec", "SolveReport", "build_hierarchy",
           "build_system", "cycle", "pcg"]
__version__ = "0.1.0"
