"""Implicit-implicit fractional-step time integrator.

Each step solves an undrained deformation stage (Newton on the motion
residual, pore pressure advanced by an explicit undrained predictor)
followed by an unsaturated flow stage (Newton on the mass-balance
residual in the updated configuration), in that order. Families are
rebuilt from the step-start configuration, interface points are
re-classified, and bond failure is evaluated once per converged
deformation stage.

Mass-balance scaling: the discrete flow states carry the water density
on their Darcy part, so the storage and solid-volume-rate terms of the
mass residual are scaled by rho_w as well. For constant water density
this is the same equation multiplied through by rho_w; it keeps every
term in mass-rate units and the printed form of the flow state intact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (IllPosedMaterialError, InvertedElementError,
                   MaterialTable, NonConvergenceError, PorosityRangeError,
                   mixture_density)
from .constitutive import elastic_stress_update, porosity_update, saturation
from .discretization import (BondRegistry, classify_interface, neighbor_search,
                             partition_family, segment_sum)
from .fracture import (apply_precracks, bond_energy_increment, break_bonds,
                       critical_bond_energy, damage_field)
from .kinematics import (invert_shape_tensors, polar_rotation,
                         pressure_gradients, residual_deformation_state,
                         residual_flow_state, shape_tensors,
                         side_tensor_gradients, velocity_gradients)
from .newton import (dense_jacobian, newton_solve, pipe_preconditioner,
                     spring_preconditioner, tangent_apply)
from .states import (_stabilizer, fluid_flow_states, fluid_force_states,
                     fracture_flow_states, fracture_pressure_gradient,
                     micro_conductivity, micro_modulus, solid_force_states,
                     weighted_volume)

__all__ = [
    "SolidConstraint", "FluidConstraint", "StageResiduals", "Simulation",
    "RunResult", "run", "newmark_predict", "pressure_predictor_rate",
    "assemble_residuals", "tangent_apply", "dense_jacobian",
]


@dataclass
class SolidConstraint:
    """Essential solid boundary condition on a set of points.

    kind 'fix' holds the anchored displacement, 'velocity' drives the
    anchored displacement at a constant rate, 'acceleration' prescribes
    the acceleration directly (value may be a callable of time, e.g. an
    interpolated base-shaking record).
    """

    points: np.ndarray
    components: np.ndarray  # (3,) bool
    kind: str
    value: object = None
    u_anchor: np.ndarray = None

    def target_velocity(self):
        """Velocity enforced on the constrained components.

        'fix' holds zero velocity (with a zero-velocity start this pins
        the displacement exactly); 'velocity' drives the loading rate.
        Enforcing the rate rather than the position keeps the Newmark
        recursion ring-free at the constrained points.
        """
        if self.kind == "fix":
            return np.zeros((len(self.points), 3))
        if self.kind == "velocity":
            return np.broadcast_to(np.asarray(self.value, dtype=float),
                                   (len(self.points), 3))
        raise ValueError(f"constraint kind {self.kind} has no velocity target")

    def target_acceleration(self, t):
        val = self.value(t) if callable(self.value) else self.value
        return np.broadcast_to(np.asarray(val, dtype=float), (len(self.points), 3))


@dataclass
class FluidConstraint:
    """Prescribed pore pressure on a set of points; value may depend on t."""

    points: np.ndarray
    value: object

    def target(self, t):
        v = self.value(t) if callable(self.value) else self.value
        return np.broadcast_to(np.asarray(v, dtype=float), (len(self.points),))


@dataclass
class StageResiduals:
    """Motion and mass residual fields with their norms."""

    r_u: np.ndarray
    r_p: np.ndarray

    @property
    def norm_u(self):
        return float(np.linalg.norm(self.r_u))

    @property
    def norm_p(self):
        return float(np.linalg.norm(self.r_p))


def newmark_predict(u, v, a, dt):
    """Zero-increment Newmark predictors for displacement and velocity."""
    u_pred = u + dt * v + 0.5 * dt * dt * a
    v_pred = v + dt * a
    return u_pred, v_pred


def pressure_predictor_rate(storage, S_r, tr_L, flow_div, rho_w):
    """Undrained pore-pressure rate.

    storage = phi (S_r/K_w + dS_r/dp_w) per point; flow_div is the
    rho_w-scaled nonlocal flow divergence frozen at step n.
    """
    if np.any(storage <= 0.0):
        raise IllPosedMaterialError(
            "non-positive fluid storage coefficient; check K_w and retention"
        )
    return -(rho_w * S_r * tr_L + flow_div) / (rho_w * storage)


def _patch_empty_families(K, family):
    counts = family.counts()
    if np.any(counts == 0):
        K[counts == 0] = np.eye(3)
    return K


def _geometry(family, positions, volumes, dim):
    """Shape tensors and their inverses for a family in given positions."""
    fam = family
    if positions is not None:
        zeta = positions[family.idx] - positions[family.owner]
        fam = replace(family, zeta=zeta)
    K = shape_tensors(fam, volumes, dim)
    _patch_empty_families(K, fam)
    Kinv = invert_shape_tensors(K)
    return fam, Kinv


def _motion_residual_core(fam, Kinv, mat, config, dim, delta, *,
                          x_now, v_now, a_now, sigma_pair, S_r, p_eff,
                          S_rf, p_f_eff, rho, damage, vol_bond, gravity,
                          phi_cr, Y=None, F_side=None):
    """Motion residual (N,3) plus the per-bond states needed downstream.

    ``Y``/``F_side`` may carry the bond deformation vectors and per-side
    incremental gradients if the caller already computed them.
    """
    own = fam.owner
    if Y is None:
        Y = x_now[fam.idx] - x_now[own]
    if F_side is None:
        # incremental deformation gradients from the build configuration
        F_side = side_tensor_gradients(fam, Kinv, Y, vol_bond, dim)
        if dim == 2:
            F_side[:, 0, 2, 2] = 1.0
    resid_s = residual_deformation_state(fam, Y, F_side)
    C_side = micro_modulus(mat.K, delta, fam.varphi)
    stab_coef = _stabilizer(fam, mat.G_stab, C_side)
    T_solid = solid_force_states(fam, Kinv, sigma_pair, resid_s,
                                 mat.G_stab, C_side, stab_coef=stab_coef)
    kz = np.einsum("bij,bj->bi", Kinv[own], fam.zeta)
    T_w = fluid_force_states(fam, Kinv, S_r, p_eff, kz=kz)
    frac_bond = (damage[own] >= phi_cr[own]) & (damage[fam.idx] >= phi_cr[fam.idx])
    if np.any(frac_bond):
        T_f = fluid_force_states(fam, Kinv, S_rf, p_f_eff, kz=kz)
        S_l = np.where(frac_bond, S_rf[own], S_r[own])
        T_l = np.where(frac_bond[:, None], T_f, T_w)
    else:
        S_l = S_r[own]
        T_l = T_w
    fluid_bond = S_l[:, None] * T_l
    pair = (T_solid - T_solid[fam.partner]) - (fluid_bond - fluid_bond[fam.partner])
    vols = vol_bond[fam.idx]
    f_int = segment_sum(pair * vols[:, None], fam.ptr)
    r = rho[:, None] * a_now - f_int - rho[:, None] * gravity[None, :]
    if dim == 2:
        r[:, 2] = 0.0
    # gross assembly magnitude: what roundoff gets amplified to. The
    # stabilization springs can turn machine noise on bond vectors into
    # a force of order coef * |zeta|, so a converged residual can never
    # sit below this times machine epsilon.
    g_bond = (np.linalg.norm(T_solid, axis=1) + np.abs(fluid_bond).sum(axis=1)
              + stab_coef * np.linalg.norm(fam.zeta, axis=1))
    gross = rho * (np.linalg.norm(a_now, axis=1) + np.linalg.norm(gravity)) \
        + 2.0 * segment_sum(g_bond * vols, fam.ptr)
    aux = {
        "T_total": T_solid + fluid_bond,
        "resid_s": resid_s,
        "F_side": F_side,
        "C_side": C_side,
        "f_int": f_int,
        "gross_norm": float(np.linalg.norm(gross)),
    }
    return r, aux


def _mass_residual_core(fam, Kinv, mat, config, dim, delta, *,
                        p_now, pdot_now, S_r, dSr, k_r, phi, tr_L, rho_w,
                        rotation, vol_bond):
    """Mass-balance residual (N,) in mass-rate units, plus flow states."""
    storage = rho_w * phi * (S_r / mat.K_w + dSr)
    if np.any(storage <= 0.0):
        raise IllPosedMaterialError("non-positive storage coefficient")
    dp, grad_side = pressure_gradients(fam, Kinv, p_now, vol_bond, dim)
    # Darcy flux per side with the permeability rotated to the current frame
    coef = k_r * mat.k_w / mat.mu_w
    if rotation is None:
        q_side = -coef[:, None, None] * grad_side
    else:
        g_hat = np.einsum("nji,nsj->nsi", rotation, grad_side)
        q_side = -np.einsum("nij,nsj->nsi", rotation, coef[:, None, None] * g_hat)
    Kp_side = micro_conductivity(k_r, mat.k_w, mat.mu_w, delta, fam.varphi)
    resid_w = residual_flow_state(fam, dp, grad_side)
    Q = fluid_flow_states(fam, Kinv, q_side, rho_w, resid_w, mat.G_stab, Kp_side)
    vols = vol_bond[fam.idx]
    flux = segment_sum((Q - Q[fam.partner]) * vols, fam.ptr)
    r = storage * pdot_now + rho_w * S_r * tr_L + flux
    coef = _stabilizer(fam, mat.G_stab, Kp_side)
    own = fam.owner
    g_bond = np.abs(Q) + coef * (np.abs(p_now[own]) + np.abs(p_now[fam.idx]))
    gross = np.abs(storage * pdot_now) + np.abs(rho_w * S_r * tr_L) \
        + 2.0 * segment_sum(g_bond * vols, fam.ptr)
    aux = {"Q": Q, "flux": flux, "storage": storage, "q_side": q_side,
           "gross_norm": float(np.linalg.norm(gross))}
    return r, aux


def assemble_residuals(particles, family, materials, config, dim=3,
                       spacing=None):
    """Instantaneous governing-equation residuals at the stored state.

    The family must already be classified and partitioned; bond vectors
    are taken from the table (the configuration it was built in) while
    the deformation state uses the particles' current positions, so a
    perturbed state relative to the build configuration exercises the
    stabilization terms.
    """
    mat = materials if isinstance(materials, MaterialTable) else \
        MaterialTable(materials).gather(particles.material_id)
    delta = family.delta
    fam, Kinv = _geometry(family, None, particles.volume, dim)
    ret = saturation(particles.J, particles.phi, particles.p_w,
                     mat.a1, mat.a2, mat.n_vg)
    ret_f = saturation(particles.J, particles.phi, particles.p_f,
                       mat.a1, mat.a2, mat.n_vg)
    rho = mixture_density(particles.phi, ret.S_r, mat.rho_s, mat.rho_w)
    r_u, _ = _motion_residual_core(
        fam, Kinv, mat, config, dim, delta,
        x_now=particles.x_cur, v_now=particles.v, a_now=particles.a,
        sigma_pair=particles.sigma_eff, S_r=ret.S_r, p_eff=particles.p_w,
        S_rf=ret_f.S_r, p_f_eff=particles.p_f, rho=rho,
        damage=particles.damage, vol_bond=particles.volume,
        gravity=np.asarray(config.gravity, dtype=float), phi_cr=mat.phi_cr,
    )
    L_side = velocity_gradients(fam, Kinv, particles.v, particles.volume, dim)
    tr_L = np.einsum("nii->n", L_side.sum(axis=1))
    r_p, _ = _mass_residual_core(
        fam, Kinv, mat, config, dim, delta,
        p_now=particles.p_w, pdot_now=particles.p_w_rate,
        S_r=ret.S_r, dSr=ret.dSr_dpw, k_r=ret.k_r, phi=particles.phi,
        tr_L=tr_L, rho_w=mat.rho_w, rotation=None, vol_bond=particles.volume,
    )
    return StageResiduals(r_u=r_u, r_p=r_p)


class _PrecondSlot:
    """Staleness bookkeeping for one stage's preconditioner."""

    REBUILD_EVERY = 25

    def __init__(self):
        self.op = None
        self.built_at = -10**9
        self.pattern = None
        self.flagged = True

    def fresh(self, step, pattern):
        return (self.op is not None and not self.flagged
                and pattern == self.pattern
                and step - self.built_at < self.REBUILD_EVERY)

    def store(self, op, step, pattern):
        self.op = op
        self.built_at = step
        self.pattern = pattern
        self.flagged = False


@dataclass
class StepReport:
    step: int
    time: float
    dt: float
    newton_u: int
    newton_p: int
    newton_f: int
    bisections: int
    broken_bonds: int
    residual_u: float
    residual_p: float


class Simulation:
    """Owns the evolving state and advances it step by step."""

    def __init__(self, problem):
        self.problem = problem
        self.particles = problem.particles
        self.materials = problem.materials
        self.config = problem.config
        self.dim = problem.dim
        self.thickness = problem.thickness
        self.spacing = problem.spacing
        self.delta = self.config.delta_ratio * problem.spacing
        self.cracks = problem.cracks
        self.solid_constraints = problem.solid_constraints
        self.fluid_constraints = problem.fluid_constraints

        n = len(self.particles)
        self.mat = MaterialTable(self.materials).gather(self.particles.material_id)
        self.registry = BondRegistry(n)
        self.time = 0.0
        self.step_index = 0
        self.reports: list[StepReport] = []
        self.bisection_events: list[tuple[int, float]] = []
        self._warm_du = None
        self._pc_u = _PrecondSlot()
        self._pc_p = _PrecondSlot()
        self._scale_u = 0.0
        self._scale_p = 0.0
        self._reaction = np.zeros(3)

        self.solid_mask = np.zeros((n, 3), dtype=bool)
        for c in self.solid_constraints:
            self.solid_mask[np.ix_(c.points, np.flatnonzero(c.components))] = True
        if self.dim == 2:
            self.solid_mask[:, 2] = True
        self.fluid_mask = np.zeros(n, dtype=bool)
        for c in self.fluid_constraints:
            self.fluid_mask[c.points] = True

        self.w_cr = critical_bond_energy(
            self.mat.G0, self.delta, self.dim, self.thickness
        )

        self._initialize_state()

    # ------------------------------------------------------------------
    def _initialize_state(self):
        p = self.particles
        p.J[:] = np.linalg.det(p.F_total)
        p.phi[:] = np.where(p.phi == 0.0, p.phi_ref, p.phi)
        p.volume[:] = np.where(p.volume == 0.0, p.volume_ref, p.volume)
        ret = saturation(p.J, p.phi, p.p_w, self.mat.a1, self.mat.a2,
                         self.mat.n_vg)
        p.S_r[:] = ret.S_r
        p.k_r[:] = ret.k_r
        # fracture pressure starts synchronized with the bulk pressure
        p.p_f[:] = np.where(p.p_f == 0.0, p.p_w, p.p_f)
        p.p_f_rate[:] = p.p_w_rate
        if self.cracks:
            fam = neighbor_search(p.x_cur, self.delta, self.config.influence)
            apply_precracks(fam, p.x_ref, self.cracks)
            p.damage[:] = damage_field(fam, p.volume)

    # ------------------------------------------------------------------
    def _prepare_step(self):
        p = self.particles
        cfg = self.config
        fam = neighbor_search(p.x_cur, self.delta, cfg.influence)
        self.registry.restore(fam)
        apply_precracks(fam, p.x_ref, self.cracks)
        was_interface = p.is_interface.copy()
        p.is_interface[:] = classify_interface(fam, p.p_w, cfg.zeta_bar)
        partition_family(fam, p.volume)
        # stress-pair bookkeeping across classification changes: a point
        # joining the interface splits its stress onto the sub-family
        # slots volume-weighted; a point reverting to bulk merges them
        # (slot sums are preserved either way)
        joined = p.is_interface & ~was_interface
        if np.any(joined):
            total = p.sigma_eff[joined].sum(axis=1)
            p.sigma_eff[joined, 0] = fam.varphi[joined, 0, None, None] * total
            p.sigma_eff[joined, 1] = fam.varphi[joined, 1, None, None] * total
        left = was_interface & ~p.is_interface
        if np.any(left):
            p.sigma_eff[left, 0] += p.sigma_eff[left, 1]
            p.sigma_eff[left, 1] = 0.0
        fam, Kinv = _geometry(fam, None, p.volume, self.dim)

        R_old, _ = polar_rotation(p.F_total)
        ret = saturation(p.J, p.phi, p.p_w, self.mat.a1, self.mat.a2,
                         self.mat.n_vg)
        storage_n = p.phi * (ret.S_r / self.mat.K_w + ret.dSr_dpw)
        if np.any(storage_n <= 0.0):
            raise IllPosedMaterialError("non-positive storage coefficient")

        # step-n flow divergence, frozen for the undrained predictor
        _, aux = _mass_residual_core(
            fam, Kinv, self.mat, cfg, self.dim, self.delta,
            p_now=p.p_w, pdot_now=np.zeros(len(p)),
            S_r=ret.S_r, dSr=ret.dSr_dpw, k_r=ret.k_r, phi=p.phi,
            tr_L=np.zeros(len(p)), rho_w=self.mat.rho_w,
            rotation=R_old, vol_bond=p.volume,
        )
        return {
            "fam": fam, "Kinv": Kinv, "R_old": R_old,
            "S_r_n": ret.S_r, "k_r_n": ret.k_r, "dSr_n": ret.dSr_dpw,
            "storage_n": storage_n, "flowdiv_n": aux["flux"],
            "u_n": p.u.copy(), "v_n": p.v.copy(), "a_n": p.a.copy(),
            "p_n": p.p_w.copy(), "pdot_n": p.p_w_rate.copy(),
            "pf_n": p.p_f.copy(), "pfdot_n": p.p_f_rate.copy(),
            "sigma_n": p.sigma_eff.copy(), "F_n": p.F_total.copy(),
            "J_n": p.J.copy(), "phi_n": p.phi.copy(), "vol_n": p.volume.copy(),
            "damage_n": p.damage.copy(),
        }

    def _pattern_key(self, fam):
        return (fam.n_bonds, int(fam.idx[::97].sum()) if fam.n_bonds else 0,
                int(fam.intact.sum()))

    # ------------------------------------------------------------------
    def _solid_targets(self, ctx, dt):
        """Prescribed acceleration increments for constrained components."""
        p = self.particles
        cfg = self.config
        t1 = self.time + dt
        mask = self.solid_mask
        presc = np.zeros((len(p), 3))
        _, v_pred = newmark_predict(ctx["u_n"], ctx["v_n"], ctx["a_n"], dt)
        for c in self.solid_constraints:
            comp = np.flatnonzero(c.components)
            if c.kind in ("fix", "velocity"):
                target = c.target_velocity()
                da = (target[:, comp] - v_pred[np.ix_(c.points, comp)]) \
                    / (cfg.beta2 * dt)
            else:
                target = c.target_acceleration(t1)
                da = target[:, comp] - ctx["a_n"][np.ix_(c.points, comp)]
            presc[np.ix_(c.points, comp)] = da
        return mask, presc

    def _fluid_targets(self, ctx, dt):
        p = self.particles
        cfg = self.config
        t1 = self.time + dt
        mask = self.fluid_mask
        presc = np.zeros(len(p))
        p_pred = ctx["p_n"] + dt * ctx["pdot_n"]
        for c in self.fluid_constraints:
            target = c.target(t1)
            presc[c.points] = (target - p_pred[c.points]) / (cfg.beta3 * dt)
        return mask, presc

    # ------------------------------------------------------------------
    def _build_deformation_residual(self, ctx, dt):
        """Residual closure of the deformation stage over free solid dofs.

        Returns (residual_fn, free_mask, prescribed_increments, state);
        ``state`` is refreshed with the full fields of the last evaluation.
        """
        p = self.particles
        cfg = self.config
        mat = self.mat
        fam, Kinv = ctx["fam"], ctx["Kinv"]
        gvec = np.asarray(cfg.gravity, dtype=float)
        mask, presc = self._solid_targets(ctx, dt)
        free = ~mask

        u_n, v_n, a_n = ctx["u_n"], ctx["v_n"], ctx["a_n"]
        p_n, pdot_n = ctx["p_n"], ctx["pdot_n"]
        fmask, fpresc = self._fluid_targets(ctx, dt)
        p_target = p_n + dt * pdot_n + cfg.beta3 * dt * fpresc
        empty_fam = fam.counts() == 0

        state = {}

        fracture_possible = bool(np.any(ctx["damage_n"] >= mat.phi_cr))
        interface_any = bool(fam.alpha.any())

        def residual(x_free):
            delta_a = presc.copy()
            delta_a[free] = x_free
            a1 = a_n + delta_a
            v1 = v_n + dt * a_n + cfg.beta2 * dt * delta_a
            u1 = u_n + dt * v_n + 0.5 * dt * dt * a_n \
                + 0.5 * cfg.beta1 * dt * dt * delta_a
            x1 = p.x_ref + u1
            L_side = velocity_gradients(fam, Kinv, v1, ctx["vol_n"], self.dim)
            tr_L = np.einsum("nii->n", L_side.sum(axis=1))

            Y = x1[fam.idx] - x1[fam.owner]
            F_side = side_tensor_gradients(fam, Kinv, Y, ctx["vol_n"],
                                           self.dim)
            if self.dim == 2:
                F_side[:, 0, 2, 2] = 1.0
            F_inc = F_side.sum(axis=1)
            if self.dim == 2:
                F_inc[:, 2, 2] = 1.0
            if np.any(empty_fam):
                F_inc[empty_fam] = np.eye(3)
            F_new = F_inc @ ctx["F_n"]
            J1 = np.linalg.det(F_new)
            if np.any(J1 <= 0.0):
                raise InvertedElementError("deformation stage inverted a point")
            phi1 = porosity_update(J1, p.phi_ref)
            R_new, _ = polar_rotation(F_new)

            pdot_tilde = pressure_predictor_rate(
                ctx["storage_n"], ctx["S_r_n"], tr_L, ctx["flowdiv_n"],
                mat.rho_w)
            p_eff = p_n + dt * pdot_n + cfg.beta3 * dt * (pdot_tilde - pdot_n)
            p_eff = np.where(fmask, p_target, p_eff)
            ret1 = saturation(J1, phi1, p_eff, mat.a1, mat.a2, mat.n_vg)
            rho1 = mixture_density(phi1, ret1.S_r, mat.rho_s, mat.rho_w)

            sig1 = np.empty_like(ctx["sigma_n"])
            sig1[:, 0] = elastic_stress_update(
                ctx["sigma_n"][:, 0], L_side[:, 0], dt, R_new,
                ctx["R_old"], mat.K, mat.mu_s)
            if interface_any:
                sig1[:, 1] = elastic_stress_update(
                    ctx["sigma_n"][:, 1], L_side[:, 1], dt, R_new,
                    ctx["R_old"], mat.K, mat.mu_s)
            else:
                sig1[:, 1] = 0.0

            pf_eff = ctx["pf_n"] + dt * ctx["pfdot_n"]
            if fracture_possible:
                S_rf = saturation(J1, phi1, pf_eff, mat.a1, mat.a2,
                                  mat.n_vg).S_r
            else:
                S_rf = ret1.S_r

            r, aux = _motion_residual_core(
                fam, Kinv, mat, cfg, self.dim, self.delta,
                x_now=x1, v_now=v1, a_now=a1, sigma_pair=sig1,
                S_r=ret1.S_r, p_eff=p_eff, S_rf=S_rf, p_f_eff=pf_eff,
                rho=rho1, damage=ctx["damage_n"], vol_bond=ctx["vol_n"],
                gravity=gvec, phi_cr=mat.phi_cr, Y=Y, F_side=F_side,
            )
            state.update(
                a1=a1, v1=v1, u1=u1, x1=x1, F_new=F_new, J1=J1, phi1=phi1,
                R_new=R_new, sig1=sig1, p_eff=p_eff, pdot_tilde=pdot_tilde,
                S_r1=ret1.S_r, k_r1=ret1.k_r, rho1=rho1, r_full=r,
                T_total=aux["T_total"], tr_L=tr_L,
                gross_u=aux["gross_norm"],
            )
            return r[free]

        return residual, free, presc, state

    def motion_residual_function(self, dt=None):
        """Deformation-stage residual closure at the current state, for
        tangent verification and diagnostics."""
        dt = self.config.dt if dt is None else dt
        ctx = self._prepare_step()
        residual, free, _, _ = self._build_deformation_residual(ctx, dt)
        return residual, int(free.sum())

    def _deformation_stage(self, ctx, dt):
        p = self.particles
        cfg = self.config
        fam = ctx["fam"]
        mat = self.mat
        residual, free, presc, state = \
            self._build_deformation_residual(ctx, dt)
        nfree = int(free.sum())

        ref_norm = float(np.linalg.norm(residual(np.zeros(nfree))))
        # a converged residual cannot sit below the roundoff of its own
        # assembly; floor the target accordingly
        floor = max(cfg.residual_floor,
                    64.0 * np.finfo(float).eps * state["gross_u"])
        if nfree == 0:
            zero = np.zeros(0)
            residual(zero)
            outcome_iters = 0
        else:
            warm = self._warm_du if (self._warm_du is not None
                                     and self._warm_du.size == nfree) else \
                np.zeros(nfree)
            pattern = self._pattern_key(fam)

            def build_precond():
                c_bond = 18.0 * mat.K / (np.pi * self.delta**4)
                mult = (cfg.beta2 + 0.5 * cfg.beta1) * dt * dt
                rho_n = mixture_density(ctx["phi_n"], ctx["S_r_n"],
                                        mat.rho_s, mat.rho_w)
                op = spring_preconditioner(
                    fam, ctx["vol_n"], rho_n, c_bond[fam.owner], mult, free)
                self._pc_u.store(op, self.step_index, pattern)
                return op

            if not self._pc_u.fresh(self.step_index, pattern):
                build_precond()
            outcome = newton_solve(
                residual, warm, ref_norm, cfg.tol_u, floor,
                cfg.max_newton, "deformation",
                preconditioner=self._pc_u.op, on_slow=build_precond,
                scale_hint=self._scale_u)
            residual(outcome.x)  # refresh cached fields at the solution
            self._warm_du = outcome.x.copy()
            self._scale_u = max(self._scale_u,
                                float(np.abs(outcome.x).max()),
                                float(np.abs(presc).max()))
            outcome_iters = outcome.iterations
            if outcome.iterations > 5:
                self._pc_u.flagged = True

        # commit kinematics and the undrained pressure predictor
        p.a[:] = state["a1"]
        p.v[:] = state["v1"]
        p.u[:] = state["u1"]
        p.F_total[:] = state["F_new"]
        p.J[:] = state["J1"]
        p.phi[:] = state["phi1"]
        p.volume[:] = p.volume_ref * state["J1"]
        p.sigma_eff[:] = state["sig1"]
        ctx["R_new"] = state["R_new"]
        ctx["p_tilde"] = state["p_eff"]
        ctx["pdot_tilde"] = state["pdot_tilde"]
        ctx["T_total"] = state["T_total"]
        ctx["v1"] = state["v1"]
        self._reaction = (state["r_full"] * ctx["vol_n"][:, None])[
            self.solid_mask.any(axis=1)].sum(axis=0)
        return outcome_iters

    # ------------------------------------------------------------------
    def _fracture_update(self, ctx, dt):
        """Accumulate bond energy on the converged state and break bonds."""
        fam = ctx["fam"]
        bond_energy_increment(fam, ctx["T_total"], ctx["v1"], dt)
        w_cr_bond = np.minimum(self.w_cr[fam.owner], self.w_cr[fam.idx])
        new_keys = break_bonds(fam, w_cr_bond)
        if new_keys.size:
            self.registry.record_break(new_keys)
            partition_family(fam, ctx["vol_n"])
            self._pc_u.flagged = True
            self._pc_p.flagged = True
        self.particles.damage[:] = damage_field(fam, ctx["vol_n"])
        # activate fracture pressure where damage reached the switch level
        newly = (self.particles.damage >= self.mat.phi_cr) & \
                (ctx["damage_n"] < self.mat.phi_cr)
        if np.any(newly):
            self.particles.p_f[newly] = self.particles.p_w[newly]
            self.particles.p_f_rate[newly] = self.particles.p_w_rate[newly]
        return int(new_keys.size // 2)

    # ------------------------------------------------------------------
    def _flow_stage(self, ctx, dt):
        p = self.particles
        cfg = self.config
        mat = self.mat
        vol1 = p.volume
        fam_f, Kinv_f = _geometry(ctx["fam"], p.x_cur, vol1, self.dim)
        partition_family(fam_f, vol1)

        if cfg.rigid_skeleton:
            tr_L = np.zeros(len(p))
            rotation = None
        else:
            L_side = velocity_gradients(fam_f, Kinv_f, p.v, vol1, self.dim)
            tr_L = np.einsum("nii->n", L_side.sum(axis=1))
            rotation = ctx.get("R_new")

        p_n, pdot_n = ctx["p_n"], ctx["pdot_n"]
        fmask, fpresc = self._fluid_targets(ctx, dt)
        free = ~fmask
        nfree = int(free.sum())

        state = {}

        def residual(x_free):
            dpdot = fpresc.copy()
            dpdot[free] = x_free
            pdot1 = pdot_n + dpdot
            p1 = p_n + dt * pdot_n + cfg.beta3 * dt * dpdot
            ret = saturation(p.J, p.phi, p1, mat.a1, mat.a2, mat.n_vg)
            r, aux = _mass_residual_core(
                fam_f, Kinv_f, mat, cfg, self.dim, self.delta,
                p_now=p1, pdot_now=pdot1, S_r=ret.S_r, dSr=ret.dSr_dpw,
                k_r=ret.k_r, phi=p.phi, tr_L=tr_L, rho_w=mat.rho_w,
                rotation=rotation, vol_bond=vol1,
            )
            state.update(p1=p1, pdot1=pdot1, S_r=ret.S_r, k_r=ret.k_r,
                         gross_p=aux["gross_norm"])
            return r[free]

        # the flow Newton starts from the undrained predictor rate
        guess = np.where(fmask, fpresc,
                         ctx.get("pdot_tilde", pdot_n) - pdot_n)[free]
        ref_norm = float(np.linalg.norm(residual(guess)))
        floor = max(cfg.residual_floor,
                    64.0 * np.finfo(float).eps * state["gross_p"])
        if nfree == 0:
            residual(np.zeros(0))
            iters = 0
        else:
            pattern = self._pattern_key(fam_f)

            def build_precond():
                ret_n = saturation(p.J, p.phi, p_n, mat.a1, mat.a2, mat.n_vg)
                storage = mat.rho_w * p.phi * (ret_n.S_r / mat.K_w
                                               + ret_n.dSr_dpw)
                m_v = weighted_volume(fam_f, vol1)
                m_v = np.where(m_v > 0.0, m_v, 1.0)
                kappa = ret_n.k_r * mat.k_w / mat.mu_w
                g_bond = (2.0 * self.dim / m_v[fam_f.owner]) \
                    * mat.rho_w[fam_f.owner] * kappa[fam_f.owner]
                op = pipe_preconditioner(fam_f, vol1, storage, g_bond,
                                         cfg.beta3 * dt, free)
                self._pc_p.store(op, self.step_index, pattern)
                return op

            if not self._pc_p.fresh(self.step_index, pattern):
                build_precond()
            outcome = newton_solve(
                residual, guess, ref_norm, cfg.tol_p, floor,
                cfg.max_newton, "flow",
                preconditioner=self._pc_p.op, on_slow=build_precond,
                scale_hint=self._scale_p)
            residual(outcome.x)
            iters = outcome.iterations
            self._scale_p = max(self._scale_p,
                                float(np.abs(outcome.x).max()),
                                float(np.abs(fpresc).max()))
            if outcome.iterations > 5:
                self._pc_p.flagged = True

        p.p_w[:] = state["p1"]
        p.p_w_rate[:] = state["pdot1"]
        p.S_r[:] = state["S_r"]
        p.k_r[:] = state["k_r"]

        iters_f = self._fracture_flow_stage(ctx, dt, fam_f, Kinv_f, vol1)
        return iters, iters_f

    # ------------------------------------------------------------------
    def _fracture_flow_stage(self, ctx, dt, fam_f, Kinv_f, vol1):
        """Co-solve the fracture-space pressure where it is active.

        With the bulk/fracture exchange term at its default (zero) the
        fracture block decouples from the bulk block and is solved after
        it; inactive points keep their fracture pressure synchronized
        with the bulk pressure.
        """
        p = self.particles
        cfg = self.config
        mat = self.mat
        active = p.damage >= self.mat.phi_cr
        inactive = ~active
        p.p_f[inactive] = p.p_w[inactive]
        p.p_f_rate[inactive] = p.p_w_rate[inactive]
        if not np.any(active):
            return 0

        own = fam_f.owner
        active_bond = (active[own] & active[fam_f.idx]).astype(float)
        m_v = weighted_volume(fam_f, vol1)
        pf_n = ctx["pf_n"]
        pfdot_n = ctx["pfdot_n"]
        pf_base = p.p_f.copy()

        def residual(x_act):
            dpdot = np.zeros(len(p))
            dpdot[active] = x_act
            pfdot1 = np.where(active, pfdot_n + dpdot, p.p_f_rate)
            pf1 = pf_base.copy()
            pf1[active] = (pf_n + dt * pfdot_n + cfg.beta3 * dt * dpdot)[active]
            ret = saturation(p.J, p.phi, pf1, mat.a1, mat.a2, mat.n_vg)
            storage = mat.rho_w * (ret.S_r / mat.K_w + ret.dSr_dpw)
            grad_f = fracture_pressure_gradient(fam_f, pf1, vol1, m_v, self.dim)
            q_f = -(ret.k_r * mat.k_f / mat.mu_w)[:, None] * grad_f
            Q_f = fracture_flow_states(fam_f, q_f, m_v, mat.rho_w,
                                       active_bond, self.dim)
            flux = segment_sum((Q_f - Q_f[fam_f.partner]) * vol1[fam_f.idx],
                               fam_f.ptr)
            r = storage * pfdot1 + flux
            gross = np.abs(storage * pfdot1) \
                + 2.0 * segment_sum(np.abs(Q_f) * vol1[fam_f.idx], fam_f.ptr)
            state["pf1"] = pf1
            state["pfdot1"] = pfdot1
            state["gross_f"] = float(np.linalg.norm(gross))
            return r[active]

        state = {}
        nact = int(active.sum())
        guess = np.zeros(nact)
        ref_norm = float(np.linalg.norm(residual(guess)))
        floor = max(cfg.residual_floor,
                    64.0 * np.finfo(float).eps * state["gross_f"])
        outcome = newton_solve(
            residual, guess, ref_norm, cfg.tol_p, floor,
            cfg.max_newton, "fracture-flow")
        residual(outcome.x)
        p.p_f[:] = state["pf1"]
        p.p_f_rate[:] = state["pfdot1"]
        return outcome.iterations

    # ------------------------------------------------------------------
    def _attempt_step(self, dt):
        ctx = self._prepare_step()
        if self.config.rigid_skeleton:
            iters_u = 0
            broken = 0
            ctx["pdot_tilde"] = pressure_predictor_rate(
                ctx["storage_n"], ctx["S_r_n"], np.zeros(len(self.particles)),
                ctx["flowdiv_n"], self.mat.rho_w)
        else:
            iters_u = self._deformation_stage(ctx, dt)
            broken = self._fracture_update(ctx, dt)
        iters_p, iters_f = self._flow_stage(ctx, dt)
        self.registry.remember(ctx["fam"])
        self.time += dt
        self.step_index += 1
        self.reports.append(StepReport(
            step=self.step_index, time=self.time, dt=dt,
            newton_u=iters_u, newton_p=iters_p, newton_f=iters_f,
            bisections=0, broken_bonds=broken,
            residual_u=0.0, residual_p=0.0,
        ))

    def step(self, dt=None):
        """Advance one step, halving dt up to max_bisections on rejection."""
        dt = self.config.dt if dt is None else dt
        backup = (self.particles.copy(),
                  BondRegistry(self.registry.n_points,
                               self.registry.broken.copy(),
                               self.registry.prev_keys.copy(),
                               self.registry.prev_energy.copy(),
                               self.registry.prev_rate.copy()),
                  None if self._warm_du is None else self._warm_du.copy())
        attempt_dt = dt
        for attempt in range(self.config.max_bisections + 1):
            try:
                self._attempt_step(attempt_dt)
                if attempt:
                    self.reports[-1].bisections = attempt
                return attempt_dt
            except (NonConvergenceError, PorosityRangeError,
                    InvertedElementError) as err:
                self.particles = backup[0].copy()
                self.problem.particles = self.particles
                self.registry = backup[1]
                self._warm_du = backup[2]
                self._pc_u.flagged = True
                self._pc_p.flagged = True
                self.bisection_events.append((self.step_index, attempt_dt))
                attempt_dt *= 0.5
                last_error = err
        raise NonConvergenceError(
            "step", getattr(last_error, "residual_history", [])
        )

    # ------------------------------------------------------------------
    def fluid_content(self):
        """Stored fluid mass measure used by the conservation ledger."""
        p = self.particles
        return float(np.sum(self.mat.rho_w * p.phi * p.S_r * p.volume
                            * (1.0 + p.p_w / self.mat.K_w)))

    def reaction_force(self):
        return self._reaction.copy()

    def field_dict(self):
        p = self.particles
        return {
            "time": self.time,
            "position": p.x_cur.copy(),
            "u": p.u.copy(),
            "v": p.v.copy(),
            "pw": p.p_w.copy(),
            "sr": p.S_r.copy(),
            "porosity": p.phi.copy(),
            "damage": p.damage.copy(),
            "sigma_eff": _sym6(p.stress()),
            "interface": p.is_interface.astype(np.int64),
        }


def _sym6(t):
    """Pack symmetric (N,3,3) tensors as (N,6): xx yy zz xy yz xz."""
    return np.stack([t[:, 0, 0], t[:, 1, 1], t[:, 2, 2],
                     t[:, 0, 1], t[:, 1, 2], t[:, 0, 2]], axis=1)




@dataclass
class RunResult:
    snapshots: list
    series: list
    reports: list
    bisection_events: list
    simulation: Simulation


def run(problem, out_dir=None, dt=None, steps=None, stab=None,
        snapshot_every=None, progress=False):
    """Run a validated problem through the schedule.

    Per step: neighbor re-search, interface classification, deformation
    stage, bond failure, flow stage, outputs on schedule. Deterministic:
    identical inputs and flags give identical outputs.
    """
    from . import io as pio

    if dt is not None:
        problem.config.dt = float(dt)
    if stab is not None:
        for m in problem.materials:
            m.G_stab = float(stab)
    sim = Simulation(problem)
    if steps is None:
        if problem.config.t_end <= 0.0:
            raise ValueError("either steps or config.t_end must be set")
        steps = int(round(problem.config.t_end / problem.config.dt))
    every = snapshot_every or problem.output_every

    snapshots = [pio.Snapshot.from_fields(sim.field_dict())]
    series = [_series_row(sim)]
    for k in range(steps):
        sim.step()
        series.append(_series_row(sim))
        if (k + 1) % every == 0 or k == steps - 1:
            snapshots.append(pio.Snapshot.from_fields(sim.field_dict()))
        if progress:
            rep = sim.reports[-1]
            print(f"step {rep.step:5d}  t={rep.time:.6g}  "
                  f"newton u/p = {rep.newton_u}/{rep.newton_p}")

    result = RunResult(
        snapshots=snapshots, series=series, reports=sim.reports,
        bisection_events=sim.bisection_events, simulation=sim,
    )
    if out_dir is not None:
        pio.write_run(result, out_dir)
    return result


def _series_row(sim):
    rx, ry, rz = sim.reaction_force()
    return {
        "time": sim.time,
        "reaction_x": rx, "reaction_y": ry, "reaction_z": rz,
        "total_fluid_mass": sim.fluid_content(),
        "max_damage": float(sim.particles.damage.max()),
    }
