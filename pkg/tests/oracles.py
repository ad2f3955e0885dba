"""Independent reference implementations used as test oracles.

Everything here is written with plain loops and numpy.linalg, separate
from the library's vectorized paths: brute-force neighbor search, a
naive double-loop assembly of the bulk (single-state) residuals, the
consolidation series solution, and a scalar Newmark integrator. These
stay deliberately dumb; they define expected values, they do not share
code with the implementation under test.
"""

import numpy as np


def brute_force_families(positions, delta):
    """O(N^2) neighbor lists: j != i with |x_j - x_i| <= delta."""
    n = len(positions)
    fams = []
    for i in range(n):
        d = np.linalg.norm(positions - positions[i], axis=1)
        fams.append([j for j in range(n) if j != i and d[j] <= delta])
    return fams


def retention_curve(J, phi, p_w, a1, a2, n):
    """Saturation, derivative, and relative permeability, scalar math."""
    m = (n - 1.0) / n
    if p_w >= 0.0:
        return 1.0, 0.0, 1.0
    scale = a1 * (J / (1.0 - phi) - 1.0) ** a2 * J
    x = -scale * p_w
    S_r = (1.0 + x**n) ** (-m)
    dSr = m * n * scale * x ** (n - 1.0) * (1.0 + x**n) ** (-m - 1.0)
    k_r = np.sqrt(S_r) * (1.0 - (1.0 - S_r ** (1.0 / m)) ** m) ** 2
    return S_r, dSr, k_r


def naive_bulk_residuals(x_build, x_cur, v, a, p_w, p_rate, sigma, J, phi,
                         volume, mat, delta, gravity, dim=3):
    """Double-loop single-state assembly of motion and mass residuals.

    ``x_build`` is the configuration the families refer to; the current
    state (x_cur, v, pressures) may be perturbed relative to it so the
    stabilization terms activate. Bulk formulas only (no phreatic split,
    no fracture switch); mass residual in rho_w-scaled units.
    """
    n = len(x_build)
    fams = brute_force_families(x_build, delta)
    G = mat["G_stab"]
    rho_w = mat["rho_w"]

    # per-point geometry and gradients
    Kinv = []
    omega0 = np.zeros(n)
    for i in range(n):
        K = np.zeros((3, 3))
        for j in fams[i]:
            z = x_build[j] - x_build[i]
            K += np.outer(z, z) * volume[j]
            omega0[i] += volume[j]
        if dim == 2:
            K[2, 2] = 1.0
        Kinv.append(np.linalg.inv(K))

    S_r = np.zeros(n)
    dSr = np.zeros(n)
    k_r = np.zeros(n)
    for i in range(n):
        S_r[i], dSr[i], k_r[i] = retention_curve(
            J[i], phi[i], p_w[i], mat["a1"], mat["a2"], mat["n_vg"])

    C = 18.0 * mat["K"] / (np.pi * delta**4)
    Kp = 6.0 * k_r * mat["k_w"] / (mat["mu_w"] * np.pi * delta**4)

    F_inc = []
    grad_p = []
    for i in range(n):
        M = np.zeros((3, 3))
        gp = np.zeros(3)
        for j in fams[i]:
            z = x_build[j] - x_build[i]
            Y = x_cur[j] - x_cur[i]
            M += np.outer(Y, z) * volume[j]
            gp += (p_w[j] - p_w[i]) * z * volume[j]
        Fi = M @ Kinv[i]
        if dim == 2:
            Fi[2, :] = 0.0
            Fi[:, 2] = 0.0
            Fi[2, 2] = 1.0
        F_inc.append(Fi)
        grad_p.append(Kinv[i] @ gp)

    def t_solid(i, j):
        z = x_build[j] - x_build[i]
        Y = x_cur[j] - x_cur[i]
        rs = Y - F_inc[i] @ z
        return sigma[i] @ Kinv[i] @ z + (G * C / omega0[i]) * rs

    def t_fluid(i, j):
        z = x_build[j] - x_build[i]
        return (S_r[i] * p_w[i]) * (Kinv[i] @ z)

    def q_flow(i, j):
        z = x_build[j] - x_build[i]
        q = -(k_r[i] * mat["k_w"] / mat["mu_w"]) * grad_p[i]
        rw = (p_w[j] - p_w[i]) - grad_p[i] @ z
        # stabilization enters with the dissipative (negative) sign
        return rho_w * q @ (Kinv[i] @ z) - (G * Kp[i] / omega0[i]) * rw

    rho = mat["rho_s"] * (1.0 - phi) + S_r * rho_w * phi
    r_u = np.zeros((n, 3))
    r_p = np.zeros(n)
    gross_u = np.zeros(n)  # sum of |contributions|: unordered-sum scale
    gross_p = np.zeros(n)
    for i in range(n):
        L = np.zeros((3, 3))
        for j in fams[i]:
            z = x_build[j] - x_build[i]
            L += np.outer(v[j] - v[i], z) * volume[j]
        L = L @ Kinv[i]
        if dim == 2:
            L[2, :] = 0.0
            L[:, 2] = 0.0
        force = np.zeros(3)
        flux = 0.0
        for j in fams[i]:
            pair_solid = t_solid(i, j) - t_solid(j, i)
            pair_fluid = S_r[i] * t_fluid(i, j) - S_r[j] * t_fluid(j, i)
            force += (pair_solid - pair_fluid) * volume[j]
            flux += (q_flow(i, j) - q_flow(j, i)) * volume[j]
            mags = (np.abs(t_solid(i, j)) + np.abs(t_solid(j, i))
                    + np.abs(t_fluid(i, j)) + np.abs(t_fluid(j, i)))
            # the fitted residual state R^s is a difference of O(|zeta|)
            # quantities scaled by the stabilization spring: its roundoff
            # carrier is coef * |zeta|, not coef * |R^s|
            stab_amp = (G * C / omega0[i]) * np.linalg.norm(z)
            gross_u[i] += (mags.max() + stab_amp) * volume[j]
            gross_p[i] += (abs(q_flow(i, j)) + abs(q_flow(j, i))
                           + (G * Kp[i] / omega0[i])
                           * (abs(p_w[i]) + abs(p_w[j]))) * volume[j]
        storage = rho_w * phi[i] * (S_r[i] / mat["K_w"] + dSr[i])
        r_u[i] = rho[i] * a[i] - force - rho[i] * np.asarray(gravity)
        if dim == 2:
            r_u[i, 2] = 0.0
        r_p[i] = storage * p_rate[i] + rho_w * S_r[i] * np.trace(L) + flux
        gross_u[i] += rho[i] * (np.abs(a[i]).max()
                                + np.linalg.norm(gravity))
        gross_p[i] += abs(storage * p_rate[i]) \
            + abs(rho_w * S_r[i] * np.trace(L))
    return r_u, r_p, gross_u, gross_p


def terzaghi_profile(z_over_H, T, terms=100):
    """Normalized excess-pressure profile of one-dimensional consolidation.

    z_over_H measured from the drained face toward the impervious face;
    T = c_v t / H^2. p/p0 = sum (2/M) sin(M Z) exp(-M^2 T).
    """
    Z = np.asarray(z_over_H, dtype=float)
    out = np.zeros_like(Z)
    for m in range(terms):
        M = 0.5 * np.pi * (2 * m + 1)
        out += (2.0 / M) * np.sin(M * Z) * np.exp(-(M**2) * T)
    return out


def newmark_scalar(a_of_t, u0, v0, a0, dt, steps, beta1, beta2):
    """Scalar Newmark history with prescribed acceleration a(t).

    Uses the same parameterization as the solver: the acceleration
    increment over the step is the unknown/prescribed quantity.
    """
    u, v, a, t = u0, v0, a0, 0.0
    hist = [(t, u, v, a)]
    for _ in range(steps):
        a_new = a_of_t(t + dt)
        da = a_new - a
        u = u + dt * v + 0.5 * dt * dt * a + 0.5 * beta1 * dt * dt * da
        v = v + dt * a + beta2 * dt * da
        a = a_new
        t += dt
        hist.append((t, u, v, a))
    return hist
