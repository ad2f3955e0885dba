"""peripore: meshfree nonlocal simulator for coupled large-deformation
dynamics, unsaturated fluid flow, and fracture in porous media."""

from .core import (MaterialModel, MaterialTable, Particles, SolverConfig,
                   mixture_density, validate_problem)
from .discretization import (FamilyTable, build_lattice, classify_interface,
                             neighbor_search, partition_family)
from .io import (Snapshot, load_problem, probe_snapshot, read_snapshot,
                 report_run, total_variation, write_snapshot)
from .problem import Problem, make_column_problem, select_box
from .solver import (RunResult, Simulation, StageResiduals,
                     assemble_residuals, run)

__all__ = [
    "MaterialModel", "MaterialTable", "Particles", "SolverConfig",
    "mixture_density", "validate_problem",
    "FamilyTable", "build_lattice", "classify_interface", "neighbor_search",
    "partition_family",
    "Snapshot", "load_problem", "probe_snapshot", "read_snapshot",
    "report_run", "total_variation", "write_snapshot",
    "Problem", "make_column_problem", "select_box",
    "RunResult", "Simulation", "StageResiduals", "assemble_residuals", "run",
]

__version__ = "0.1.0"
