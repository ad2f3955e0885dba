"""Shared domain types, units, and sign conventions.

All quantities are SI (m, s, kg, Pa). Problem files may declare pressures
and moduli in kPa; they are converted to Pa at load time.

Sign conventions, used consistently everywhere:
  * solid effective stress is tension-positive (compression has negative
    trace),
  * pore fluid pressure is compression-positive (p_w >= 0 means the point
    sits on the saturated side of the phreatic surface).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

GRAVITY_DEFAULT = (0.0, 0.0, 0.0)


class PeriporeError(Exception):
    """Base class for simulation errors."""


class DegeneratePointError(PeriporeError):
    """A point has an empty family or a singular shape tensor."""

    def __init__(self, message, point_ids=()):
        super().__init__(message)
        self.point_ids = tuple(int(i) for i in np.atleast_1d(point_ids))


class InvertedElementError(PeriporeError):
    """det F <= 0 at one or more points."""


class IllPosedMaterialError(PeriporeError):
    """Non-positive fluid storage coefficient or similar material defect."""


class PorosityRangeError(PeriporeError):
    """Porosity left the open interval (0, 1) during an update."""


class NonConvergenceError(PeriporeError):
    """A Newton stage failed to converge within the iteration cap."""

    def __init__(self, stage, residual_history):
        history = [float(r) for r in residual_history]
        super().__init__(
            f"{stage} stage did not converge; residual history {history}"
        )
        self.stage = stage
        self.residual_history = history


@dataclass
class MaterialModel:
    """Constitutive and physical parameters of one mixed material.

    Parameters
    ----------
    rho_s, rho_w : intrinsic solid / water densities [kg/m^3]
    mu_w : water viscosity [Pa s]
    K, mu_s : elastic bulk and shear moduli of the skeleton [Pa]
    K_w : bulk modulus of water [Pa]
    k_w : intrinsic permeability [m^2]
    a1, a2, n_vg : retention-curve parameters; a1 in 1/Pa, others unitless
    s_a : suction scaling parameter [Pa]; stored for provenance, unused
    G0 : fracture energy [J/m^2]; None disables bond breakage
    G_stab : stabilization parameter (dimensionless)
    phi_cr : critical damage activating fracture-space flow
    k_f : intrinsic permeability of fracture space [m^2]
    """

    rho_s: float
    rho_w: float
    mu_w: float
    K: float
    mu_s: float
    K_w: float
    k_w: float
    a1: float
    a2: float
    n_vg: float
    s_a: float = 0.0
    G0: float | None = None
    G_stab: float = 1.0
    phi_cr: float = 0.35
    k_f: float | None = None

    def __post_init__(self):
        if self.k_f is None:
            self.k_f = self.k_w

    def validate(self):
        errors = []
        positive = ("rho_s", "rho_w", "mu_w", "K", "mu_s", "K_w", "k_w")
        for name in positive:
            if not getattr(self, name) > 0.0:
                errors.append(f"material: {name} must be > 0")
        if not self.n_vg > 1.0:
            errors.append("material: retention exponent n_vg must be > 1")
        if self.a1 < 0.0:
            errors.append("material: a1 must be >= 0")
        if self.G_stab < 0.0:
            errors.append("material: stabilization parameter must be >= 0")
        if not 0.0 < self.phi_cr <= 1.0:
            errors.append("material: phi_cr must lie in (0, 1]")
        if self.G0 is not None and self.G0 <= 0.0:
            errors.append("material: fracture energy must be > 0 when set")
        if self.k_f is not None and self.k_f <= 0.0:
            errors.append("material: fracture permeability must be > 0")
        return errors


@dataclass
class SolverConfig:
    """Time integration and Newton-loop settings."""

    dt: float
    t_end: float = 0.0
    beta1: float = 0.6
    beta2: float = 0.6
    beta3: float = 0.6
    tol_u: float = 1e-8
    tol_p: float = 1e-8
    max_newton: int = 30
    delta_ratio: float = 3.05
    zeta_bar: float = 0.0
    gravity: tuple = GRAVITY_DEFAULT
    influence: str = "uniform"  # or "gaussian"
    residual_floor: float = 1e-12
    rigid_skeleton: bool = False
    max_bisections: int = 5

    def validate(self):
        errors = []
        if not self.dt > 0.0:
            errors.append("config: dt must be > 0")
        if not (self.beta1 >= self.beta2 >= 0.5):
            errors.append(
                "config: Newmark stability violated (need beta1 >= beta2 >= 0.5)"
            )
        if self.beta3 < 0.5:
            errors.append("config: beta3 must be >= 0.5 for stability")
        if not 0.0 <= self.zeta_bar < 1.0:
            errors.append("config: zeta_bar must lie in [0, 1)")
        if self.delta_ratio <= 0.0:
            errors.append("config: delta_ratio must be > 0")
        if self.max_newton < 1:
            errors.append("config: max_newton must be >= 1")
        if self.influence not in ("uniform", "gaussian"):
            errors.append(f"config: unknown influence function '{self.influence}'")
        return errors


# Per-point array fields of the particle state: (name, trailing shape).
_POINT_FIELDS = [
    ("x_ref", (3,)),
    ("u", (3,)),
    ("v", (3,)),
    ("a", (3,)),
    ("p_w", ()),
    ("p_w_rate", ()),
    ("p_f", ()),
    ("p_f_rate", ()),
    ("phi", ()),
    ("phi_ref", ()),
    ("S_r", ()),
    ("k_r", ()),
    ("sigma_eff", (2, 3, 3)),
    ("F_total", (3, 3)),
    ("J", ()),
    ("volume", ()),
    ("volume_ref", ()),
    ("damage", ()),
    ("is_interface", ()),
    ("material_id", ()),
]


@dataclass
class Particles:
    """Struct-of-arrays state of all mixed material points.

    One row per point. ``sigma_eff`` holds the effective-stress pair used
    by phreatic points (slot 0: same-sign sub-family, slot 1: opposite);
    for bulk points slot 0 carries the full tensor and slot 1 is zero, so
    ``stress()`` (the slot sum) is the point stress in every case.
    """

    x_ref: np.ndarray
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    p_w: np.ndarray
    p_w_rate: np.ndarray
    p_f: np.ndarray
    p_f_rate: np.ndarray
    phi: np.ndarray
    phi_ref: np.ndarray
    S_r: np.ndarray
    k_r: np.ndarray
    sigma_eff: np.ndarray
    F_total: np.ndarray
    J: np.ndarray
    volume: np.ndarray
    volume_ref: np.ndarray
    damage: np.ndarray
    is_interface: np.ndarray
    material_id: np.ndarray

    @classmethod
    def zeros(cls, n, material_id=0):
        kw = {}
        for name, shape in _POINT_FIELDS:
            if name == "is_interface":
                kw[name] = np.zeros(n, dtype=bool)
            elif name == "material_id":
                kw[name] = np.full(n, material_id, dtype=np.int64)
            else:
                kw[name] = np.zeros((n, *shape), dtype=np.float64)
        p = cls(**kw)
        p.F_total[:] = np.eye(3)
        p.J[:] = 1.0
        return p

    def __len__(self):
        return self.x_ref.shape[0]

    @property
    def x_cur(self):
        """Current positions; x_cur = x_ref + u at all times."""
        return self.x_ref + self.u

    def stress(self):
        """Point effective stress: sum of the sub-family pair."""
        return self.sigma_eff.sum(axis=1)

    def copy(self):
        kw = {f.name: getattr(self, f.name).copy() for f in fields(self)}
        return Particles(**kw)


@dataclass
class MaterialTable:
    """Per-point material parameters gathered into flat arrays."""

    materials: list
    rho_s: np.ndarray = field(init=False)
    rho_w: np.ndarray = field(init=False)
    mu_w: np.ndarray = field(init=False)
    K: np.ndarray = field(init=False)
    mu_s: np.ndarray = field(init=False)
    K_w: np.ndarray = field(init=False)
    k_w: np.ndarray = field(init=False)
    a1: np.ndarray = field(init=False)
    a2: np.ndarray = field(init=False)
    n_vg: np.ndarray = field(init=False)
    G0: np.ndarray = field(init=False)
    G_stab: np.ndarray = field(init=False)
    phi_cr: np.ndarray = field(init=False)
    k_f: np.ndarray = field(init=False)
    material_id: np.ndarray = field(init=False)

    def __post_init__(self):
        self.material_id = None
        self._gathered = False

    def gather(self, material_id):
        """Expand scalar material parameters onto the point index."""
        mid = np.asarray(material_id, dtype=np.int64)
        for name in ("rho_s", "rho_w", "mu_w", "K", "mu_s", "K_w", "k_w",
                     "a1", "a2", "n_vg", "G_stab", "phi_cr", "k_f"):
            vals = np.array([getattr(m, name) for m in self.materials])
            setattr(self, name, vals[mid])
        g0 = np.array(
            [np.inf if m.G0 is None else m.G0 for m in self.materials]
        )
        self.G0 = g0[mid]
        self.material_id = mid
        self._gathered = True
        return self


def mixture_density(phi, S_r, rho_s, rho_w):
    """Density of the solid-water mixture, rho_s(1-phi) + S_r rho_w phi.

    Accepts scalars or per-point arrays; pore air is weightless.
    """
    return rho_s * (1.0 - np.asarray(phi)) + np.asarray(S_r) * rho_w * np.asarray(phi)


def validate_problem(particles, materials, config):
    """Check every type invariant before a run. Returns a list of errors;
    an empty list means the problem may start."""
    errors = []
    for i, mat in enumerate(materials):
        errors.extend(f"[material {i}] {e}" for e in mat.validate())
    errors.extend(config.validate())

    n = len(particles)
    if n == 0:
        errors.append("points: empty point set")
        return errors

    phi = particles.phi
    if np.any(phi <= 0.0) or np.any(phi >= 1.0):
        bad = np.flatnonzero((phi <= 0.0) | (phi >= 1.0))
        errors.append(f"points: porosity outside (0,1) at ids {bad[:10].tolist()}")
    sr = particles.S_r
    if np.any(sr < 0.0) or np.any(sr > 1.0):
        errors.append("points: saturation outside [0,1]")
    dmg = particles.damage
    if np.any(dmg < 0.0) or np.any(dmg > 1.0):
        errors.append("points: damage outside [0,1]")
    sig = particles.stress()
    asym = np.abs(sig - np.swapaxes(sig, -1, -2)).max()
    if asym > 1e-6 * max(1.0, np.abs(sig).max()):
        errors.append("points: effective stress not symmetric")
    if np.any(particles.volume <= 0.0):
        errors.append("points: non-positive point volume")
    if not np.all(np.isfinite(particles.x_cur)):
        errors.append("points: non-finite position")
    mid = particles.material_id
    if np.any(mid < 0) or np.any(mid >= len(materials)):
        errors.append("points: material_id out of range")
    return errors
