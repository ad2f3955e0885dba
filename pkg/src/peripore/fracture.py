"""Bond energy tracking, breakage against a critical energy, and damage.

Breakage is absorbing and pairwise symmetric, and it silences a bond for
both the solid and the fluid states (the influence value is masked by the
intact flag wherever states are assembled). The critical bond energy is
calibrated from the input fracture energy G0 so that severing all bonds
across a plane releases G0 per unit crack area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import segment_sum


@dataclass
class CrackPlane:
    """A pre-existing crack: plane point, unit normal, finite extent box.

    A bond is severed when its segment crosses the plane inside the
    extent box (checked on reference geometry).
    """

    point: np.ndarray
    normal: np.ndarray
    extent_min: np.ndarray
    extent_max: np.ndarray

    @classmethod
    def from_dict(cls, d):
        point = np.asarray(d["point"], dtype=float)
        normal = np.asarray(d["normal"], dtype=float)
        normal = normal / np.linalg.norm(normal)
        ext = d.get("extent")
        if ext is None:
            lo = np.full(3, -np.inf)
            hi = np.full(3, np.inf)
        else:
            lo = np.asarray(ext[0], dtype=float)
            hi = np.asarray(ext[1], dtype=float)
        return cls(point=point, normal=normal, extent_min=lo, extent_max=hi)

    def crossed_by(self, x_a, x_b):
        """Boolean per segment (x_a, x_b): does it cross the crack patch?"""
        da = (x_a - self.point) @ self.normal
        db = (x_b - self.point) @ self.normal
        crossing = da * db < 0.0
        if not np.any(crossing):
            return crossing
        # intersection point must fall inside the extent box
        denom = np.where(crossing, da - db, 1.0)
        t = np.where(crossing, da / denom, 0.0)
        hit = x_a + t[:, None] * (x_b - x_a)
        inside = np.all((hit >= self.extent_min - 1e-12)
                        & (hit <= self.extent_max + 1e-12), axis=1)
        return crossing & inside


def critical_bond_energy(G0, delta, dim=3, thickness=1.0):
    """Critical energy density per bond from the fracture energy G0.

    Calibrated so the total energy of all bonds crossing a unit fracture
    area equals G0: the crossing-pair volume integral is pi delta^4 / 4
    in 3D and (2/3) delta^3 t per unit crack width in a plane problem of
    thickness t, giving

        w_cr = 4 G0 / (pi delta^4)        (3D)
        w_cr = 3 G0 / (2 delta^3 t)       (plane strain)
    """
    if G0 is None:
        return np.inf
    G0 = np.asarray(G0, dtype=float)
    if dim == 2:
        out = 3.0 * G0 / (2.0 * delta**3 * thickness)
    else:
        out = 4.0 * G0 / (np.pi * delta**4)
    return np.where(np.isfinite(G0), out, np.inf)


def apply_precracks(family, positions, cracks):
    """Mark bonds crossing declared crack planes as broken (absorbing)."""
    if not cracks:
        return np.zeros(0, dtype=np.int64)
    own = family.owner
    x_a = positions[own]
    x_b = positions[family.idx]
    severed = np.zeros(family.n_bonds, dtype=bool)
    for crack in cracks:
        severed |= crack.crossed_by(x_a, x_b)
    family.intact &= ~severed
    return np.flatnonzero(severed)


def bond_energy_increment(family, total_force_states, velocities, dt):
    """Trapezoidal accumulation of the poromechanical bond work density.

    The integrand pairs the total force-state difference across the bond
    with the relative displacement rate:
        f = [(T + S_r T_w)_ij - (T + S_r T_w)_ji] . (v_j - v_i).
    ``total_force_states`` must already hold the per-bond sum
    T + S_r T_w. Updates family.energy in place and returns the
    increments.
    """
    dv = velocities[family.idx] - velocities[family.owner]
    pair_diff = total_force_states - total_force_states[family.partner]
    integrand = np.einsum("bi,bi->b", pair_diff, dv)
    increment = 0.5 * (family.energy_rate + integrand) * dt
    increment = np.where(family.intact, increment, 0.0)
    family.energy += increment
    family.energy_rate = np.where(family.intact, integrand, family.energy_rate)
    return increment


def break_bonds(family, critical_energy):
    """Break bonds whose accumulated energy reached the critical value.

    Breakage is permanent and pairwise: both directions of a pair break
    together. Returns the pair keys of newly broken bonds so the caller
    can record them in the absorbing registry.
    """
    failing = family.intact & (family.energy >= critical_energy)
    failing |= failing[family.partner]
    if not np.any(failing):
        return np.zeros(0, dtype=np.int64)
    family.intact &= ~failing
    keys = family.keys()
    return keys[failing]


def damage_field(family, volumes):
    """Damage = 1 - (intact influence-weighted volume) / omega0, in [0, 1].

    The denominator uses the base influence values of every listed bond,
    so a fully severed family reaches damage 1.
    """
    v_nb = volumes[family.idx]
    alive = segment_sum(family.omega * family.intact * v_nb, family.ptr)
    total = segment_sum(family.omega * v_nb, family.ptr)
    out = np.zeros(family.n_points)
    np.divide(total - alive, total, out=out, where=total > 0.0)
    return np.clip(out, 0.0, 1.0)
