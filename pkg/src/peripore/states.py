"""Peridynamic force and flow states: correspondence terms plus the
energy-method stabilization that restores resistance to the non-uniform
(zero-energy) deformation and flow modes.

Every state is assembled per bond, aligned with the family table. Broken
bonds contribute exactly zero. For phreatic points the per-bond side flag
selects which member of the stress / flux pair feeds the bond; with all
bonds on side 0 the formulas reduce bitwise to the bulk single-state
forms, and setting the stabilization parameter G to zero reduces them to
the bare correspondence states.
"""

from __future__ import annotations

import numpy as np

from .core import DegeneratePointError
from .discretization import segment_sum


def micro_modulus(K_bulk, delta, varphi):
    """Per-side micro-elastic modulus C^(k) = varphi^(k) 18 K / (pi delta^4).

    The two sides always sum to the bulk value 18 K / (pi delta^4).
    """
    base = 18.0 * np.asarray(K_bulk) / (np.pi * delta**4)
    return np.asarray(varphi) * base[..., None]


def micro_conductivity(k_r, k_w, mu_w, delta, varphi):
    """Per-side hydraulic micro-conductivity
    K_p^(k) = varphi^(k) 6 k_r k_w / (mu pi delta^4)."""
    base = 6.0 * np.asarray(k_r) * np.asarray(k_w) / (
        np.asarray(mu_w) * np.pi * delta**4
    )
    return np.asarray(varphi) * base[..., None]


def _stabilizer(family, G, side_modulus):
    """Per-bond stabilization coefficient G C^(side) / omega0^(side) omega.

    ``side_modulus`` is (N, 2) (micro modulus or micro conductivity);
    sides with an empty sub-family get coefficient zero.
    """
    own = family.owner
    side = family.alpha.astype(np.int64)
    num = (np.asarray(G)[..., None] * side_modulus)[own, side]
    den = family.omega0_side[own, side]
    coef = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
    return coef * family.omega * family.intact


def solid_force_states(family, Kinv, sigma_side, resid_def, G, micro_mod,
                       stab_coef=None):
    """Stabilized effective force state per bond (N/m^6 vectors).

    T = rho omega [ sigma^(side) Kinv zeta + (G C^(side)/omega0^(side)) R^s ].
    ``stab_coef`` may carry a precomputed per-bond stabilizer.
    """
    own = family.owner
    side = family.alpha.astype(np.int64)
    # contract sigma Kinv once per point and side, then map onto bonds
    sk = np.einsum("nsij,njk->nsik", sigma_side, Kinv)
    w = family.omega * family.intact
    corr = w[:, None] * np.einsum("bij,bj->bi", sk[own, side], family.zeta)
    if stab_coef is None:
        stab_coef = _stabilizer(family, G, micro_mod)
    return corr + stab_coef[:, None] * resid_def


def fluid_force_states(family, Kinv, S_r, p_w, kz=None):
    """Fluid force state per bond, T_w = rho omega (S_r p_w) Kinv zeta.

    ``kz`` may carry the precomputed per-bond product Kinv(owner) zeta.
    """
    own = family.owner
    scal = (np.asarray(S_r) * np.asarray(p_w))[own]
    if kz is None:
        kz = np.einsum("bij,bj->bi", Kinv[own], family.zeta)
    w = family.omega * family.intact
    return (w * scal)[:, None] * kz


def fluid_flow_states(family, Kinv, q_side, rho_w, resid_flow, G, micro_cond):
    """Stabilized fluid flow state per bond (scalar).

    Q = rho omega [ rho_w q^(side) . (Kinv zeta) - (G K_p^(side)/omega0^(side)) R^w ].

    The stabilization term enters with the sign that dissipates the
    non-uniform pressure mode: in the energy pairing of flow state with
    pressure-potential state the Darcy part is negative definite, so the
    non-uniform remainder must contribute with the same (negative) sign
    or it would feed the mode it exists to remove. A checkerboard
    pressure field therefore drains its high-pressure phase.
    """
    own = family.owner
    side = family.alpha.astype(np.int64)
    q = q_side[own, side]
    kz = np.einsum("bij,bj->bi", Kinv[own], family.zeta)
    w = family.omega * family.intact
    darcy = w * np.asarray(rho_w)[own] * np.einsum("bi,bi->b", q, kz)
    stab = _stabilizer(family, G, micro_cond) * resid_flow
    return darcy - stab


def stabilizer_coefficients(family, G, side_modulus):
    """Public wrapper for the per-bond stabilization coefficient."""
    return _stabilizer(family, G, side_modulus)


def weighted_volume(family, volumes):
    """Scalar weighted volume m_v = sum of rho omega |zeta|^2 V' per point."""
    w = family.omega * family.intact * volumes[family.idx]
    return segment_sum(w * np.einsum("bi,bi->b", family.zeta, family.zeta),
                       family.ptr)


def fracture_pressure_gradient(family, p_f, volumes, m_v, dim=3):
    """Nonlocal fracture-space pressure gradient,
    (dim / m_v) sum of rho omega Phi_f zeta V'. Exact for linear fields on
    symmetric stencils."""
    dp = p_f[family.idx] - p_f[family.owner]
    w = family.omega * family.intact * volumes[family.idx]
    moment = segment_sum((w * dp)[:, None] * family.zeta, family.ptr)
    if np.any(m_v <= 0.0):
        raise DegeneratePointError(
            "degenerate stencil: vanishing weighted volume",
            point_ids=np.flatnonzero(m_v <= 0.0),
        )
    grad = (float(dim) / m_v)[:, None] * moment
    if dim == 2:
        grad[:, 2] = 0.0
    return grad


def fracture_flow_states(family, q_f, m_v, rho_w, active_bonds, dim=3):
    """Fracture-space flow state per bond,
    Q_f = (dim / m_v) rho omega rho_w q_f . zeta, nonzero only on bonds
    whose both ends have fracture flow switched on."""
    own = family.owner
    w = family.omega * family.intact * active_bonds
    qdotz = np.einsum("bi,bi->b", q_f[own], family.zeta)
    return (float(dim) / m_v[own]) * w * np.asarray(rho_w)[own] * qdotz


def stabilization_energy(family, resid_def, G, micro_mod, volumes):
    """Per-point stabilization energy 1/2 (beta R^s) . R^s integrated over
    the family; nonnegative whenever G >= 0 and zero for affine fields."""
    coef = _stabilizer(family, G, micro_mod)
    dens = 0.5 * coef * np.einsum("bi,bi->b", resid_def, resid_def)
    return segment_sum(dens * volumes[family.idx], family.ptr)
