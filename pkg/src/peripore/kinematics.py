"""Nonlocal kinematics: shape tensors, gradients, rotations, residual states.

All operators are exact for affine fields: a velocity field v = A x is
reproduced with L = A at every interior point, and the per-bond residual
states (the non-uniform remainder the correspondence gradients cannot
see) vanish identically. Phreatic points carry a side-0/side-1 split of
every gradient, both sides sharing the whole-family inverse shape tensor.
"""

from __future__ import annotations

import numpy as np

from .core import DegeneratePointError, InvertedElementError
from .discretization import segment_sum

COND_LIMIT = 1e12


def shape_tensors(family, volumes, dim=3):
    """Influence- and volume-weighted second moment of intact bonds.

    For plane problems (dim=2) the out-of-plane diagonal is padded with a
    unit entry so the tensor stays invertible; in-plane blocks are the
    true moments.
    """
    w = family.omega * family.intact * volumes[family.idx]
    outer = family.zeta[:, :, None] * family.zeta[:, None, :]
    K = segment_sum(w[:, None, None] * outer, family.ptr)
    if dim == 2:
        K[:, 2, 2] = 1.0
    return K


def invert_shape_tensors(K, cond_limit=COND_LIMIT):
    """Explicit 3x3 adjugate inverse with a condition-number guard.

    Points whose shape tensor is singular or worse-conditioned than
    ``cond_limit`` (1-norm estimate) raise DegeneratePointError naming
    the offenders.
    """
    a = K
    adj = np.empty_like(a)
    adj[:, 0, 0] = a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1]
    adj[:, 0, 1] = a[:, 0, 2] * a[:, 2, 1] - a[:, 0, 1] * a[:, 2, 2]
    adj[:, 0, 2] = a[:, 0, 1] * a[:, 1, 2] - a[:, 0, 2] * a[:, 1, 1]
    adj[:, 1, 0] = a[:, 1, 2] * a[:, 2, 0] - a[:, 1, 0] * a[:, 2, 2]
    adj[:, 1, 1] = a[:, 0, 0] * a[:, 2, 2] - a[:, 0, 2] * a[:, 2, 0]
    adj[:, 1, 2] = a[:, 0, 2] * a[:, 1, 0] - a[:, 0, 0] * a[:, 1, 2]
    adj[:, 2, 0] = a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0]
    adj[:, 2, 1] = a[:, 0, 1] * a[:, 2, 0] - a[:, 0, 0] * a[:, 2, 1]
    adj[:, 2, 2] = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    det = (a[:, 0, 0] * adj[:, 0, 0]
           + a[:, 0, 1] * adj[:, 1, 0]
           + a[:, 0, 2] * adj[:, 2, 0])
    norm_a = np.abs(a).sum(axis=2).max(axis=1)
    norm_adj = np.abs(adj).sum(axis=2).max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = norm_a * norm_adj / np.abs(det)
    bad = ~np.isfinite(cond) | (cond > cond_limit)
    if np.any(bad):
        raise DegeneratePointError(
            f"singular shape tensor at {int(bad.sum())} point(s)",
            point_ids=np.flatnonzero(bad),
        )
    return adj / det[:, None, None]


def side_tensor_gradients(family, Kinv, bond_vectors, volumes, dim=3):
    """Nonlocal gradient of a per-bond vector difference, split by side.

    Returns (N, 2, 3, 3): slot k is (sum over side-k bonds of
    omega * dv x zeta * V') Kinv, so slot0 + slot1 equals the whole-family
    gradient. Used for both velocity gradients and incremental
    deformation gradients (pass velocity or position differences).
    Families without phreatic bonds skip the side-1 work.
    """
    w = family.omega * family.intact * volumes[family.idx]
    moment = np.einsum("b,bi,bj->bij", w, bond_vectors, family.zeta)
    m_all = segment_sum(moment, family.ptr)
    n = family.n_points
    out = np.zeros((n, 2, 3, 3))
    if family.alpha.any():
        side1 = family.alpha.astype(bool)
        m1 = segment_sum(moment * side1[:, None, None], family.ptr)
        out[:, 0] = np.einsum("nij,njk->nik", m_all - m1, Kinv)
        out[:, 1] = np.einsum("nij,njk->nik", m1, Kinv)
    else:
        out[:, 0] = np.einsum("nij,njk->nik", m_all, Kinv)
    if dim == 2:
        out[:, :, 2, :] = 0.0
        out[:, :, :, 2] = 0.0
    return out


def side_scalar_gradients(family, Kinv, bond_scalars, volumes, dim=3):
    """Nonlocal gradient of a per-bond scalar difference, split by side.

    Returns (N, 2, 3); slot conventions as in side_tensor_gradients.
    """
    w = family.omega * family.intact * volumes[family.idx]
    moment = (w * bond_scalars)[:, None] * family.zeta
    m_all = segment_sum(moment, family.ptr)
    n = family.n_points
    out = np.zeros((n, 2, 3))
    if family.alpha.any():
        side1 = family.alpha.astype(bool)
        m1 = segment_sum(moment * side1[:, None], family.ptr)
        out[:, 0] = np.einsum("nij,nj->ni", Kinv, m_all - m1)
        out[:, 1] = np.einsum("nij,nj->ni", Kinv, m1)
    else:
        out[:, 0] = np.einsum("nij,nj->ni", Kinv, m_all)
    if dim == 2:
        out[:, :, 2] = 0.0
    return out


def velocity_gradients(family, Kinv, velocities, volumes, dim=3):
    """Per-side velocity gradients; slot sum is the full tensor L."""
    dv = velocities[family.idx] - velocities[family.owner]
    return side_tensor_gradients(family, Kinv, dv, volumes, dim)


def deformation_increments(family, Kinv, positions_next, positions_now, volumes,
                           dim=3):
    """Per-side incremental deformation gradients mapping the bond vectors
    of the build configuration into the iterate configuration."""
    Y = positions_next[family.idx] - positions_next[family.owner]
    grads = side_tensor_gradients(family, Kinv, Y, volumes, dim)
    if dim == 2:
        # keep the increment invertible out of plane
        grads[:, 0, 2, 2] = 1.0
    return Y, grads


def residual_deformation_state(family, Y, F_side):
    """Per-bond non-uniform deformation remainder R^s = Y - F^(side) zeta."""
    own = family.owner
    side = family.alpha.astype(np.int64)
    F_bond = F_side[own, side]
    return Y - np.einsum("bij,bj->bi", F_bond, family.zeta)


def pressure_gradients(family, Kinv, pressures, volumes, dim=3):
    """Per-side nonlocal pressure gradients; slot sum reproduces a linear
    field's slope exactly."""
    dp = pressures[family.idx] - pressures[family.owner]
    return dp, side_scalar_gradients(family, Kinv, dp, volumes, dim)


def residual_flow_state(family, dp, grad_side):
    """Per-bond non-uniform pressure remainder R^w = Phi - grad^(side).zeta."""
    own = family.owner
    side = family.alpha.astype(np.int64)
    g_bond = grad_side[own, side]
    return dp - np.einsum("bi,bi->b", g_bond, family.zeta)


def polar_rotation(F):
    """Left polar decomposition F = V R via batched SVD.

    Returns (R, V) with R proper orthogonal and V symmetric positive
    definite. Raises InvertedElementError when det F <= 0 anywhere.
    """
    F = np.asarray(F)
    single = F.ndim == 2
    if single:
        F = F[None]
    det = np.linalg.det(F)
    if np.any(det <= 0.0):
        raise InvertedElementError(
            f"non-positive det F at {int((det <= 0).sum())} point(s)"
        )
    U, s, Vt = np.linalg.svd(F)
    R = U @ Vt
    V = np.einsum("nik,nk,njk->nij", U, s, U)
    if single:
        return R[0], V[0]
    return R, V
