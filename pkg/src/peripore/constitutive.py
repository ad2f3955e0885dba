"""Local material laws evaluated at points.

The retention curve follows a van Genuchten form whose saturation decays
with suction,

    S_r = { 1 + [ -a1 (J/(1-phi) - 1)^a2 J p_w ]^n }^(-(n-1)/n),

i.e. with a NEGATIVE exponent -(n-1)/n. A positive exponent would make
saturation grow beyond one as suction increases, which contradicts both
the curve's limiting behaviour (S_r -> 1 as p_w -> 0-) and its
closed-form source, so the negative sign is used throughout and the
derivative below is consistent with it.

The stress update is a pluggable contract: any callable mapping an
unrotated strain increment (plus per-point moduli) to an unrotated
stress increment can replace ``isotropic_stress_increment`` without core
changes, which is where a critical-state plasticity model would plug in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PorosityRangeError


@dataclass
class RetentionState:
    """Saturation, its pressure derivative, and relative permeability."""

    S_r: np.ndarray
    dSr_dpw: np.ndarray
    k_r: np.ndarray


def saturation(J, phi, p_w, a1, a2, n):
    """Retention state from the volume-sensitive water retention curve.

    For p_w >= 0 (saturated side) returns the clamp S_r = 1, k_r = 1,
    dS_r/dp_w = 0. All arguments broadcast.
    """
    J = np.asarray(J, dtype=float)
    phi = np.asarray(phi, dtype=float)
    p_w = np.asarray(p_w, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(n <= 1.0):
        raise ValueError("retention exponent n must be > 1")
    m = (n - 1.0) / n

    scale = a1 * np.maximum(J / (1.0 - phi) - 1.0, 0.0) ** a2 * J  # 1/Pa
    x = np.maximum(-scale * p_w, 0.0)
    xn = x**n
    sr_unsat = (1.0 + xn) ** (-m)
    with np.errstate(invalid="ignore"):
        dsr_unsat = m * n * scale * np.where(x > 0.0, x ** (n - 1.0), 0.0) \
            * (1.0 + xn) ** (-m - 1.0)

    sat = p_w >= 0.0
    S_r = np.where(sat, 1.0, sr_unsat)
    dSr = np.where(sat, 0.0, dsr_unsat)
    k_r = np.where(sat, 1.0, relative_permeability(sr_unsat, n))
    return RetentionState(S_r=S_r, dSr_dpw=dSr, k_r=k_r)


def relative_permeability(S_r, n):
    """Mualem-form relative permeability k_r(S_r) with m = (n-1)/n."""
    m = (np.asarray(n, dtype=float) - 1.0) / np.asarray(n, dtype=float)
    s = np.clip(np.asarray(S_r, dtype=float), 0.0, 1.0)
    return np.sqrt(s) * (1.0 - (1.0 - s ** (1.0 / m)) ** m) ** 2


def porosity_update(J, phi_ref):
    """Kinematic porosity update phi = 1 - (1 - phi_ref)/J."""
    phi = 1.0 - (1.0 - np.asarray(phi_ref)) / np.asarray(J)
    if np.any(phi <= 0.0) or np.any(phi >= 1.0):
        bad = np.flatnonzero((phi <= 0.0) | (phi >= 1.0))
        raise PorosityRangeError(
            f"porosity left (0,1) at point(s) {bad[:10].tolist()}; "
            f"range [{float(np.min(phi)):.4g}, {float(np.max(phi)):.4g}]"
        )
    return phi


def isotropic_stress_increment(D_hat, dt, K, mu_s):
    """Unrotated stress increment of isotropic linear elasticity.

    D_hat is the unrotated rate of deformation (..., 3, 3); K and mu_s
    broadcast per point.
    """
    K = np.asarray(K, dtype=float)
    mu_s = np.asarray(mu_s, dtype=float)
    lam = K - 2.0 * mu_s / 3.0
    tr = np.einsum("...ii->...", D_hat)
    eye = np.eye(3)
    shape = (1,) * (D_hat.ndim - 2) + (3, 3)
    return (lam * tr * dt)[..., None, None] * eye.reshape(shape) \
        + (2.0 * mu_s * dt)[..., None, None] * D_hat


def elastic_stress_update(sigma_n, D, dt, R_new, R_old, K, mu_s,
                          increment_fn=isotropic_stress_increment):
    """Objective stress update in the rotated (unrotated-configuration) frame.

    The step-n stress is carried forward with the incremental rotation
    R_new R_old^T, the rate of deformation is unrotated with R_new, the
    constitutive increment is evaluated there, and the result is rotated
    back. Exactly objective: a superposed rigid rotation transforms the
    stress as a tensor and leaves its invariants unchanged.
    """
    D_sym = 0.5 * (D + np.swapaxes(D, -1, -2))
    D_hat = np.einsum("...ji,...jk,...kl->...il", R_new, D_sym, R_new)
    dsig_hat = increment_fn(D_hat, dt, K, mu_s)
    dR = np.einsum("...ij,...kj->...ik", R_new, R_old)
    rotated = np.einsum("...ij,...jk,...lk->...il", dR, sigma_n, dR)
    update = np.einsum("...ij,...jk,...lk->...il", R_new, dsig_hat, R_new)
    out = rotated + update
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def darcy_flux(grad_pw, R, k_r, k_w, mu_w):
    """Generalized Darcy velocity with the permeability rotated into the
    current frame, q = -(k_r/mu) R k_w R^T grad p.

    k_w is the (isotropic) intrinsic permeability, so the result is
    independent of R; the rotation is kept so an anisotropic tensor can
    drop in.
    """
    grad_pw = np.asarray(grad_pw, dtype=float)
    k_r = np.asarray(k_r, dtype=float)
    coef = k_r * np.asarray(k_w) / np.asarray(mu_w)
    if R is None:
        return -coef[..., None] * grad_pw
    g_hat = np.einsum("...ji,...j->...i", R, grad_pw)
    return -np.einsum("...ij,...j->...i", R, coef[..., None] * g_hat)
