import numpy as np
import pytest

from peripore import (MaterialModel, Simulation, SolverConfig,
                      assemble_residuals, neighbor_search, run)
from peripore.core import IllPosedMaterialError, NonConvergenceError
from peripore.discretization import classify_interface, partition_family
from peripore.newton import dense_jacobian, tangent_apply
from peripore.problem import (drive_solid, fix_solid, make_column_problem,
                              prescribe_pressure, select_box, shake_solid,
                              set_uniform_pressure, set_uniform_stress)
from peripore.solver import newmark_predict, pressure_predictor_rate

from .oracles import naive_bulk_residuals, newmark_scalar


def _material(**over):
    base = dict(rho_s=2.1e3, rho_w=1.0e3, mu_w=1.0e-3, K=3.3e7, mu_s=1.62e7,
                K_w=2.0e8, k_w=1.0e-14, a1=1.0e-4, a2=0.0, n_vg=1.25,
                G_stab=1.0)
    base.update(over)
    return MaterialModel(**base)


def test_newmark_predict_examples():
    u = np.zeros((1, 3))
    v = np.zeros((1, 3))
    a = np.zeros((1, 3))
    up, vp = newmark_predict(u, v, a, 0.1)
    assert np.all(up == 0.0) and np.all(vp == 0.0)

    v = np.array([[1.0, 0.0, 0.0]])
    a = np.array([[2.0, 0.0, 0.0]])
    up, vp = newmark_predict(u, v, a, 0.1)
    assert up[0, 0] == pytest.approx(1.0 * 0.1 + 0.5 * 2.0 * 0.01)
    assert vp[0, 0] == pytest.approx(1.0 + 2.0 * 0.1)


def test_newmark_against_scalar_oracle():
    # a single point driven by a prescribed acceleration history follows
    # the hand-rolled Newmark recursion exactly
    mat = _material()
    cfg = SolverConfig(dt=0.05, beta1=0.6, beta2=0.6)
    prob = make_column_problem(0.1, 0.1, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 0.0)
    series = [(0.0, 0.0), (0.05, 1.3), (0.10, 0.6), (0.15, -0.9),
              (0.20, 0.2), (10.0, 0.2)]
    shake_solid(prob, [0], series, components="x")
    sim = Simulation(prob)
    for _ in range(4):
        sim.step()
    hist = newmark_scalar(lambda t: np.interp(t, [r[0] for r in series],
                                              [r[1] for r in series]),
                          0.0, 0.0, 0.0, 0.05, 4, 0.6, 0.6)
    t, u, v, a = hist[-1]
    assert sim.particles.u[0, 0] == pytest.approx(u, rel=1e-12, abs=1e-15)
    assert sim.particles.v[0, 0] == pytest.approx(v, rel=1e-12, abs=1e-15)
    assert sim.particles.a[0, 0] == pytest.approx(a, rel=1e-12, abs=1e-15)


def test_pressure_predictor_algebra():
    # incompressible-rigid limit: no volume change, no flow
    out = pressure_predictor_rate(np.array([1e-9]), np.array([1.0]),
                                  np.array([0.0]), np.array([0.0]), 1e3)
    assert out[0] == 0.0

    # undrained uniform compression: pdot = K_w eps_v_rate / phi
    K_w, phi, rate = 2e8, 0.33, 1e-4
    storage = np.array([phi / K_w])
    out = pressure_predictor_rate(storage, np.array([1.0]),
                                  np.array([-rate]), np.array([0.0]), 1e3)
    assert out[0] == pytest.approx(K_w * rate / phi, rel=1e-12)

    with pytest.raises(IllPosedMaterialError):
        pressure_predictor_rate(np.array([0.0]), np.array([1.0]),
                                np.array([0.0]), np.array([0.0]), 1e3)


def test_pressure_predictor_three_point_hand_assembly():
    # hand-assembled flow divergence for three points on a line feeding
    # the predictor formula directly
    rho_w = 1e3
    Q = {(0, 1): 2.0e-3, (1, 0): -1.5e-3, (1, 2): 0.5e-3, (2, 1): -0.25e-3}
    vol = 1e-3
    flowdiv_1 = ((Q[(1, 0)] - Q[(0, 1)]) + (Q[(1, 2)] - Q[(2, 1)])) * vol
    storage = 1.65e-9
    trL = -2.0e-5
    S_r = 0.9
    expected = -(rho_w * S_r * trL + flowdiv_1) / (rho_w * storage)
    got = pressure_predictor_rate(np.array([storage]), np.array([S_r]),
                                  np.array([trL]), np.array([flowdiv_1]),
                                  rho_w)
    assert got[0] == pytest.approx(expected, rel=1e-12)


def test_static_equilibrium_converges_immediately():
    mat = _material()
    cfg = SolverConfig(dt=1e-3)
    prob = make_column_problem(0.3, 0.3, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 0.0)  # saturated at zero pressure
    sim = Simulation(prob)
    sim.step()
    assert sim.reports[-1].newton_u == 0
    assert np.abs(sim.particles.v).max() == 0.0


def test_single_point_free_fall():
    mat = _material()
    cfg = SolverConfig(dt=1e-3, gravity=(0.0, 0.0, -9.81))
    prob = make_column_problem(0.1, 0.1, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 0.0)
    sim = Simulation(prob)
    sim.step()
    # converged to the solver tolerance (1e-8 relative on the residual)
    assert sim.particles.a[0, 2] == pytest.approx(-9.81, rel=1e-7)
    assert sim.particles.a[0, 0] == pytest.approx(0.0, abs=1e-7)


def test_zero_load_run_keeps_fields_constant():
    mat = _material()
    cfg = SolverConfig(dt=1e-3, t_end=5e-3)
    prob = make_column_problem(0.3, 0.3, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 0.0)
    result = run(prob, steps=5)
    first, last = result.snapshots[0], result.snapshots[-1]
    assert np.array_equal(first.u, last.u)
    assert np.array_equal(first.pw, last.pw)
    assert np.array_equal(first.damage, last.damage)
    assert last.time > first.time


def test_impervious_uniform_column_pressure_unchanged():
    mat = _material()
    cfg = SolverConfig(dt=1.0, rigid_skeleton=True)
    prob = make_column_problem(0.3, 0.6, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 2.5e4)
    sim = Simulation(prob)
    for _ in range(3):
        sim.step()
    assert np.allclose(sim.particles.p_w, 2.5e4, rtol=1e-12)


def test_two_chamber_exchange_relaxes_and_conserves_mass():
    # the smallest symmetric cluster: a 2x2x2 cube whose left and right
    # halves start at different saturated pressures; symmetry reduces the
    # dynamics to the two-chamber ODE p_L - p_R ~ exp(-t/tau)
    mat = _material(k_w=1e-12)
    cfg = SolverConfig(dt=1e-3, rigid_skeleton=True, tol_p=1e-10)
    prob = make_column_problem(0.2, 0.2, 0.1, mat, cfg, porosity=0.33)
    x = prob.particles.x_ref
    left = x[:, 0] < 0.1
    prob.particles.p_w[:] = np.where(left, 2.0e4, 1.0e4)
    prob.particles.p_f[:] = prob.particles.p_w
    sim = Simulation(prob)
    content0 = sim.fluid_content()
    gaps = [1.0e4]
    means = [1.5e4]
    for _ in range(6):
        sim.step()
        p = sim.particles.p_w
        gaps.append(p[left].mean() - p[~left].mean())
        means.append(p.mean())
    gaps = np.array(gaps)
    # monotone relaxation toward each other
    assert np.all(np.diff(gaps) < 0.0)
    assert np.all(gaps > 0.0)
    # exponential decay: constant ratio once past the rate start-up step
    ratios = gaps[1:] / gaps[:-1]
    assert np.allclose(ratios[1:], ratios[1], rtol=1e-6)
    # total fluid mass conserved to 1e-10 relative
    assert abs(sim.fluid_content() - content0) <= 1e-10 * content0
    # symmetry: the mean pressure never drifts
    assert np.allclose(means, 1.5e4, rtol=1e-10)


def test_tangent_apply_contract():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(6, 6))

    def res(x):
        return A @ x + 3.0

    x0 = rng.normal(size=6)
    d = rng.normal(size=6)
    got = tangent_apply(res, x0, d)
    assert np.allclose(got, A @ d, rtol=1e-6)
    # linear in the direction
    got2 = tangent_apply(res, x0, 2 * d)
    assert np.allclose(got2, 2 * got, rtol=1e-6)
    # zero direction gives exactly zero
    assert np.all(tangent_apply(res, x0, np.zeros(6)) == 0.0)


def test_dense_jacobian_matches_tangent_apply_on_ten_point_problem():
    from peripore.core import Particles
    from peripore.problem import Problem

    mat = _material()
    cfg = SolverConfig(dt=1e-3)
    rng = np.random.default_rng(17)
    pts = Particles.zeros(10)
    pts.x_ref[:] = rng.uniform(0.0, 0.2, (10, 3))
    pts.volume_ref[:] = 1e-3
    pts.volume[:] = 1e-3
    pts.phi_ref[:] = 0.33
    pts.phi[:] = 0.33
    prob = Problem(particles=pts, materials=[mat], config=cfg, spacing=0.12)
    set_uniform_pressure(prob, 0.0)
    prob.particles.v[:, 2] = 0.01 * prob.particles.x_ref[:, 2]
    sim = Simulation(prob)
    resfn, nfree = sim.motion_residual_function(cfg.dt)
    x0 = np.zeros(nfree)
    r0 = resfn(x0)
    # characteristic acceleration scale of this problem sizes the steps
    scale = float(np.linalg.norm(r0) / np.linalg.norm(1700.0 * np.ones(nfree)))
    scale = max(scale, 1.0)
    J = dense_jacobian(resfn, x0, r0, x_scale=scale)
    rng = np.random.default_rng(0)
    for _ in range(4):
        d = rng.normal(size=nfree)
        d /= np.linalg.norm(d)
        jd = tangent_apply(resfn, x0, d, r0=r0, x_scale=scale)
        assert np.linalg.norm(jd - J @ d) <= 1e-6 * np.linalg.norm(J @ d)


def test_matrix_free_stage_matches_dense_newton_solve():
    # independent dense-direct Newton on the same residual closure
    # reproduces the production (Krylov) stage update
    mat = _material()
    cfg = SolverConfig(dt=1e-3)
    prob = make_column_problem(0.3, 1.0, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, -1.5e4)
    set_uniform_stress(prob, [-12.33e3 * 0.8223] * 3 + [0.0] * 3)
    ids_bot = select_box(prob.particles.x_ref, (-1, -1, -1), (1, 1, 0.11))
    fix_solid(prob, ids_bot)
    ids_top = select_box(prob.particles.x_ref, (-1, -1, 0.89), (1, 1, 1))
    drive_solid(prob, ids_top, [0.0, 0.0, -0.01], components="z")
    sim = Simulation(prob)

    resfn, nfree = sim.motion_residual_function(cfg.dt)
    assert nfree > 200  # exercises the Krylov path in production
    x = np.zeros(nfree)
    r = resfn(x)
    r0n = np.linalg.norm(r)
    for _ in range(12):
        J = dense_jacobian(resfn, x, resfn(x))
        x = x + np.linalg.solve(J, -resfn(x))
        if np.linalg.norm(resfn(x)) <= 1e-10 * r0n:
            break
    oracle_dx = x

    sim2 = Simulation(prob)
    sim2.step()
    # compare tip accelerations: production committed state vs oracle
    mask = ~sim2.solid_mask
    a_oracle = sim2.particles.a.copy()
    # rebuild oracle accelerations: a = a_n + delta_a with a_n = 0
    delta_a = np.zeros((len(prob.particles), 3))
    delta_a[mask] = oracle_dx
    scale = np.abs(delta_a).max()
    assert np.allclose(sim2.particles.a[mask.any(axis=1) == False],
                       delta_a[mask.any(axis=1) == False],
                       atol=1e-6 * scale)


def test_assembled_residuals_match_naive_double_loop():
    # 27-point cube against the plain double-loop oracle
    mat = _material()
    cfg = SolverConfig(dt=1e-3)
    prob = make_column_problem(0.3, 0.3, 0.1, mat, cfg, porosity=0.33)
    pts = prob.particles
    assert len(pts) == 27
    rng = np.random.default_rng(42)
    pts.p_w[:] = -1.2e4 + 2e3 * rng.random(27)
    pts.p_f[:] = pts.p_w
    pts.p_w_rate[:] = 10.0 * rng.standard_normal(27)
    pts.u[:] = 1e-4 * rng.standard_normal((27, 3))
    pts.v[:] = 1e-3 * rng.standard_normal((27, 3))
    pts.a[:] = 1e-2 * rng.standard_normal((27, 3))
    sig = 1e4 * rng.standard_normal((27, 3, 3))
    pts.sigma_eff[:, 0] = 0.5 * (sig + np.swapaxes(sig, 1, 2))

    delta = cfg.delta_ratio * prob.spacing
    fam = neighbor_search(pts.x_ref, delta)  # families in build config
    classify_interface(fam, pts.p_w)
    assert not pts.p_w[pts.p_w >= 0].size  # all suction: bulk everywhere
    partition_family(fam, pts.volume)
    got = assemble_residuals(pts, fam, prob.materials, cfg)

    mat_dict = dict(rho_s=mat.rho_s, rho_w=mat.rho_w, mu_w=mat.mu_w,
                    K=mat.K, mu_s=mat.mu_s, K_w=mat.K_w, k_w=mat.k_w,
                    a1=mat.a1, a2=mat.a2, n_vg=mat.n_vg, G_stab=mat.G_stab)
    r_u, r_p, gross_u, gross_p = naive_bulk_residuals(
        pts.x_ref, pts.x_cur, pts.v, pts.a, pts.p_w, pts.p_w_rate,
        pts.stress(), pts.J, pts.phi, pts.volume, mat_dict, delta,
        np.zeros(3))
    # unordered summation bound: n_terms * eps * sum(|contributions|)
    tol_u = 1e-14 * gross_u[:, None]
    tol_p = 1e-14 * gross_p
    assert np.all(np.abs(got.r_u - r_u) <= tol_u)
    assert np.all(np.abs(got.r_p - r_p) <= tol_p)


def test_quasi_static_reaction_balances_weight():
    # undrained settling under gravity on the smooth suction branch
    mat = _material()
    cfg = SolverConfig(dt=0.02, gravity=(0.0, 0.0, -9.81))
    prob = make_column_problem(0.3, 0.6, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, -1.5e4)
    ids_bot = select_box(prob.particles.x_ref, (-1, -1, -1), (1, 1, 0.11))
    fix_solid(prob, ids_bot)
    sim = Simulation(prob)
    for _ in range(60):
        sim.step()
    from peripore.core import mixture_density
    rho = mixture_density(sim.particles.phi, sim.particles.S_r,
                          mat.rho_s, mat.rho_w)
    weight = float(np.sum(rho * 9.81 * sim.particles.volume))
    rz = sim.reaction_force()[2]
    # the base pushes the column's weight upward once transients die out
    assert rz == pytest.approx(weight, rel=0.01)


def test_step_rejection_bisects_then_aborts():
    mat = _material()
    cfg = SolverConfig(dt=0.5, max_newton=4, max_bisections=2)
    prob = make_column_problem(0.3, 0.6, 0.1, mat, cfg, porosity=0.33)
    set_uniform_pressure(prob, 0.0)
    ids_bot = select_box(prob.particles.x_ref, (-1, -1, -1), (1, 1, 0.11))
    fix_solid(prob, ids_bot)
    ids_top = select_box(prob.particles.x_ref, (-1, -1, 0.49), (1, 1, 1))
    # absurd crushing rate: guaranteed rejection
    drive_solid(prob, ids_top, [0.0, 0.0, -2.0], components="z")
    sim = Simulation(prob)
    u_before = sim.particles.u.copy()
    with pytest.raises(NonConvergenceError):
        sim.step()
    assert len(sim.bisection_events) == cfg.max_bisections + 1
    # failed step restores the pre-step state
    assert np.array_equal(sim.particles.u, u_before)
