"""Newton loops with matrix-free Krylov linear solves.

The linear solver contract only needs directional derivatives of the
residual (``tangent_apply``); systems at or below DENSE_LIMIT unknowns
fall back to an explicit finite-difference Jacobian and a direct solve,
which doubles as the verification oracle for the matrix-free path.

Larger systems run preconditioned GMRES. The preconditioner is the LU
factorization of a sparse surrogate operator (bond-spring elasticity or
bond-pipe diffusion plus the inertia/storage diagonal) assembled by the
caller; it only steers Krylov convergence, the Newton residual itself is
always exact.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import NonConvergenceError

DENSE_LIMIT = 200
_FD_EPS = np.finfo(float).eps ** (1.0 / 3.0)
_SQRT_EPS = np.sqrt(np.finfo(float).eps)


def tangent_apply(residual_fn, x0, direction, r0=None, eps=None, x_scale=None):
    """Directional derivative of the residual at x0, J(x0) @ direction.

    Central differencing with a step sized against ``x_scale``, a
    characteristic magnitude of the unknown (falls back to |x0| or 1);
    without it the perturbation can drown in the residual's cancellation
    noise when x0 is near zero. A zero direction gives an exactly zero
    product. ``r0`` is accepted for interface symmetry with the forward
    variant but unused by the central stencil.
    """
    d = np.asarray(direction, dtype=float)
    dnorm = np.abs(d).max() if d.size else 0.0
    if dnorm == 0.0:
        return np.zeros_like(d)
    if eps is None:
        base = max(np.abs(x0).max(), x_scale or 0.0, 1.0e-30)
        if base == 1.0e-30:
            base = 1.0
        eps = _FD_EPS * base / dnorm
    if eps == 0.0:
        raise FloatingPointError("tangent perturbation underflow")
    return (residual_fn(x0 + eps * d) - residual_fn(x0 - eps * d)) / (2 * eps)


def dense_jacobian(residual_fn, x0, r0=None, x_scale=None):
    """Explicit Jacobian by column-by-column central differencing."""
    x0 = np.asarray(x0, dtype=float)
    if r0 is None:
        r0 = residual_fn(x0)
    n = x0.size
    J = np.empty((r0.size, n))
    base = max(np.abs(x0).max(), x_scale or 0.0, 1.0)
    for j in range(n):
        eps = _FD_EPS * base
        xp = x0.copy()
        xp[j] += eps
        xm = x0.copy()
        xm[j] -= eps
        J[:, j] = (residual_fn(xp) - residual_fn(xm)) / (2 * eps)
    return J


def _gmres(op, rhs, M=None, rtol=1e-3, restart=60, maxiter=10):
    kwargs = dict(M=M, restart=restart, maxiter=maxiter, atol=0.0)
    try:
        sol, info = spla.gmres(op, rhs, rtol=rtol, **kwargs)
    except TypeError:  # scipy < 1.12 spells the tolerance 'tol'
        sol, info = spla.gmres(op, rhs, tol=rtol, **kwargs)
    return sol, info


class NewtonOutcome:
    def __init__(self, x, residual_norm, iterations, history):
        self.x = x
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.history = history


def newton_solve(residual_fn, x0, reference_norm, tol_rel, floor,
                 max_iter, stage, preconditioner=None, linear_rtol=1e-3,
                 on_slow=None, scale_hint=None):
    """Inexact Newton with Krylov linear solves.

    Convergence: ||r|| <= max(tol_rel * reference_norm, floor), with
    ``reference_norm`` the residual at the stage's canonical starting
    iterate. ``preconditioner`` is a LinearOperator (or None);
    ``on_slow`` is called once if convergence stalls so the caller may
    refresh the preconditioner. ``scale_hint`` is a characteristic
    magnitude of the unknown, used to size finite-difference steps; near
    convergence the residual-based estimate collapses and without the
    hint the directional derivatives would drown in roundoff.
    """
    x = np.asarray(x0, dtype=float).copy()
    target = max(tol_rel * reference_norm, floor)
    r = residual_fn(x)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    if rnorm <= target:
        return NewtonOutcome(x, rnorm, 0, history)

    n = x.size
    refreshed = False
    for it in range(1, max_iter + 1):
        if n <= DENSE_LIMIT:
            J = dense_jacobian(residual_fn, x, r,
                               x_scale=max(float(np.abs(x).max()),
                                           scale_hint or 0.0) or None)
            try:
                dx = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise NonConvergenceError(stage, history)
        else:
            # size FD steps by the expected magnitude of the unknown
            x_scale = max(float(np.abs(x).max()), scale_hint or 0.0)
            if x_scale == 0.0 and preconditioner is not None:
                x_scale = float(np.abs(preconditioner.matvec(r)).max())
            op = spla.LinearOperator(
                (n, n),
                matvec=lambda d: tangent_apply(residual_fn, x, d, r0=r,
                                               x_scale=x_scale or None),
            )
            dx, info = _gmres(op, -r, M=preconditioner, rtol=linear_rtol)
            if info > 0 and not refreshed and on_slow is not None:
                preconditioner = on_slow() or preconditioner
                refreshed = True
                dx, info = _gmres(op, -r, M=preconditioner, rtol=linear_rtol)

        # accept the step, backtracking a few times if the residual grew;
        # keep the best candidate tried so a bad final halving never wins
        step = 1.0
        best = None
        for _ in range(4):
            r_new = residual_fn(x + step * dx)
            new_norm = float(np.linalg.norm(r_new))
            if best is None or new_norm < best[2]:
                best = (step, r_new, new_norm)
            if new_norm <= rnorm or new_norm <= target:
                break
            step *= 0.5
        step, r, rnorm = best
        x = x + step * dx
        history.append(rnorm)
        if rnorm <= target:
            return NewtonOutcome(x, rnorm, it, history)
        if it == 3 and not refreshed and on_slow is not None:
            preconditioner = on_slow() or preconditioner
            refreshed = True
    raise NonConvergenceError(stage, history)


def spring_preconditioner(family, volumes, rho_diag, stiffness_per_bond,
                          multiplier, free_mask):
    """LU of a bond-spring surrogate for the motion tangent.

    Each intact bond contributes a spring c/|zeta| (zhat x zhat) omega V'
    between its end points; the diagonal adds the mixture inertia. The
    surrogate reproduces the stiffness scale and graph of the true
    operator, which is all a preconditioner needs.
    """
    n = family.n_points
    own = family.owner
    nb = family.idx
    dist = np.linalg.norm(family.zeta, axis=1)
    good = family.intact & (dist > 0.0)
    zhat = np.where(good[:, None], family.zeta / np.maximum(dist, 1e-300)[:, None], 0.0)
    coef = np.where(
        good,
        multiplier * stiffness_per_bond * family.omega * volumes[nb] / np.maximum(dist, 1e-300),
        0.0,
    )
    blocks = coef[:, None, None] * (zhat[:, :, None] * zhat[:, None, :])

    rows = (3 * own[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
    cols = (3 * nb[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
    off = sp.coo_matrix(
        (-blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 3 * n)
    ).tocsr()
    diag_rows = (3 * own[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
    diag_cols = (3 * own[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
    diag = sp.coo_matrix(
        (blocks.ravel(), (diag_rows.ravel(), diag_cols.ravel())), shape=(3 * n, 3 * n)
    ).tocsr()
    P = off + diag + sp.diags(np.repeat(rho_diag, 3))
    return _factor(P, free_mask.ravel())


def pipe_preconditioner(family, volumes, storage_diag, conductance_per_bond,
                        multiplier, free_mask):
    """LU of a bond-pipe surrogate for the mass-balance tangent."""
    n = family.n_points
    own = family.owner
    nb = family.idx
    g = np.where(family.intact,
                 multiplier * conductance_per_bond * family.omega * volumes[nb],
                 0.0)
    lap = sp.coo_matrix((-g, (own, nb)), shape=(n, n)).tocsr()
    lap = lap + sp.diags(np.bincount(own, weights=g, minlength=n))
    P = lap + sp.diags(storage_diag)
    return _factor(P, free_mask)


def _factor(P, free_flat):
    free = np.flatnonzero(free_flat)
    if free.size == 0:
        return None
    sub = P.tocsr()[free][:, free].tocsc()
    # guard against zero diagonals from isolated points
    d = sub.diagonal()
    if np.any(d == 0.0):
        sub = sub + sp.diags(np.where(d == 0.0, 1.0, 0.0))
    lu = spla.splu(sub)
    nfree = free.size
    return spla.LinearOperator((nfree, nfree), matvec=lu.solve)
