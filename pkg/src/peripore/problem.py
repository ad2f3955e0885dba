"""Problem assembly: geometry, materials, initial and boundary conditions.

A problem is usually built from a declarative JSON deck (see io.load_problem
for the file schema) but can be assembled directly in code, which is what
the tests and demo scripts do for reduced configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MaterialModel, Particles, SolverConfig, validate_problem
from .discretization import build_lattice
from .fracture import CrackPlane
from .solver import FluidConstraint, SolidConstraint

_COMP = {"x": 0, "y": 1, "z": 2}


@dataclass
class Problem:
    particles: Particles
    materials: list
    config: SolverConfig
    solid_constraints: list = field(default_factory=list)
    fluid_constraints: list = field(default_factory=list)
    cracks: list = field(default_factory=list)
    dim: int = 3
    thickness: float = 1.0
    spacing: float = 1.0
    output_every: int = 10
    title: str = ""

    def validate(self):
        return validate_problem(self.particles, self.materials, self.config)


def select_box(positions, box_min, box_max, tol=1e-9):
    """Point ids inside an axis-aligned box (inclusive, with tolerance)."""
    lo = np.asarray(box_min, dtype=float) - tol
    hi = np.asarray(box_max, dtype=float) + tol
    inside = np.all((positions >= lo) & (positions <= hi), axis=1)
    return np.flatnonzero(inside)


def components_mask(spec):
    """'xyz' / 'z' / ['x','y'] -> (3,) bool mask; default all three."""
    if spec is None:
        return np.array([True, True, True])
    mask = np.zeros(3, dtype=bool)
    for c in spec:
        mask[_COMP[c]] = True
    return mask


def make_column_problem(width, height, spacing, material, config, *,
                        depth=None, thickness=1.0, mode="3d", porosity=None,
                        title=""):
    """Convenience constructor: a box lattice with one material.

    ``mode`` 'plane_strain' builds a single-cell-thick slab in z with the
    given thickness; otherwise a full 3D box width x depth x height.
    """
    if mode == "plane_strain":
        dim = 2
        box_min = (0.0, 0.0, 0.0)
        box_max = (width, height, spacing)
        pos, vol, _ = build_lattice(box_min, box_max, spacing, thickness)
        pos[:, 2] = 0.0
    else:
        dim = 3
        depth = width if depth is None else depth
        pos, vol, _ = build_lattice((0, 0, 0), (width, depth, height), spacing)
    pts = Particles.zeros(len(pos))
    pts.x_ref[:] = pos
    pts.volume_ref[:] = vol
    pts.volume[:] = vol
    if porosity is not None:
        pts.phi_ref[:] = porosity
        pts.phi[:] = porosity
    return Problem(
        particles=pts, materials=[material], config=config, dim=dim,
        thickness=thickness, spacing=spacing, title=title,
    )


def set_uniform_pressure(problem, value):
    problem.particles.p_w[:] = value
    problem.particles.p_f[:] = value


def set_linear_pressure(problem, origin, gradient, value_at_origin=0.0):
    x = problem.particles.x_ref
    d = x - np.asarray(origin, dtype=float)[None, :]
    problem.particles.p_w[:] = value_at_origin + d @ np.asarray(gradient, float)
    problem.particles.p_f[:] = problem.particles.p_w


def set_uniform_stress(problem, sym6):
    """Initial effective stress from (xx, yy, zz, xy, yz, xz) components."""
    s = np.asarray(sym6, dtype=float)
    t = np.array([[s[0], s[3], s[5]],
                  [s[3], s[1], s[4]],
                  [s[5], s[4], s[2]]])
    problem.particles.sigma_eff[:] = 0.0
    problem.particles.sigma_eff[:, 0] = t[None, :, :]


def set_geostatic_stress(problem, surface, axis=2, lateral_ratio=1.0):
    """Self-weight effective stress increasing with depth below ``surface``.

    Uses the current mixture density and the configured gravity magnitude;
    lateral components are lateral_ratio times the axial one.
    """
    from .core import MaterialTable, mixture_density

    pts = problem.particles
    mat = MaterialTable(problem.materials).gather(pts.material_id)
    g = np.linalg.norm(problem.config.gravity)
    rho = mixture_density(pts.phi_ref, pts.S_r, mat.rho_s, mat.rho_w)
    depth = np.maximum(surface - pts.x_ref[:, axis], 0.0)
    axial = -rho * g * depth  # compression-negative effective stress
    pts.sigma_eff[:] = 0.0
    for k in range(3):
        val = axial if k == axis else lateral_ratio * axial
        pts.sigma_eff[:, 0, k, k] = val


def fix_solid(problem, point_ids, components=None):
    mask = components_mask(components)
    problem.solid_constraints.append(SolidConstraint(
        points=np.asarray(point_ids, dtype=np.int64),
        components=mask, kind="fix",
        u_anchor=problem.particles.u[point_ids].copy(),
    ))


def drive_solid(problem, point_ids, velocity, components=None):
    mask = components_mask(components)
    problem.solid_constraints.append(SolidConstraint(
        points=np.asarray(point_ids, dtype=np.int64),
        components=mask, kind="velocity",
        value=np.asarray(velocity, dtype=float),
        u_anchor=problem.particles.u[point_ids].copy(),
    ))


def shake_solid(problem, point_ids, series, components="x"):
    """Base-acceleration loading from a (t, a) time series."""
    mask = components_mask(components)
    tt = np.asarray([row[0] for row in series], dtype=float)
    aa = np.asarray([row[1] for row in series], dtype=float)

    def accel(t):
        a = np.interp(t, tt, aa)
        out = np.zeros(3)
        out[mask] = a
        return out

    problem.solid_constraints.append(SolidConstraint(
        points=np.asarray(point_ids, dtype=np.int64),
        components=mask, kind="acceleration", value=accel,
    ))


def prescribe_pressure(problem, point_ids, value):
    """Constant or callable-in-time pore pressure on a point set."""
    problem.fluid_constraints.append(FluidConstraint(
        points=np.asarray(point_ids, dtype=np.int64), value=value,
    ))


def pressure_ramp(start, end, t0, t1):
    """Linear-in-time pressure schedule, clamped outside [t0, t1]."""

    def value(t):
        if t <= t0:
            return start
        if t >= t1:
            return end
        return start + (end - start) * (t - t0) / (t1 - t0)

    return value


def add_crack(problem, point, normal, extent=None):
    problem.cracks.append(CrackPlane.from_dict(
        {"point": point, "normal": normal, "extent": extent}
    ))
