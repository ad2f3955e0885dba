import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peripore.constitutive import (darcy_flux, elastic_stress_update,
                                   isotropic_stress_increment,
                                   porosity_update, relative_permeability,
                                   saturation)
from peripore.core import PorosityRangeError


def test_volumetric_response():
    K, mu = 3.3e7, 1.62e7
    eps_v_rate = 1e-3
    D = (eps_v_rate / 3.0) * np.eye(3)
    dt = 0.1
    sig = elastic_stress_update(np.zeros((3, 3)), D, dt, np.eye(3), np.eye(3),
                                K, mu)
    assert np.trace(sig) / 3.0 == pytest.approx(K * eps_v_rate * dt, rel=1e-12)


def test_pure_shear_response():
    K, mu = 3.3e7, 1.62e7
    gdot = 2.5e-3
    D = np.zeros((3, 3))
    D[0, 1] = D[1, 0] = gdot / 2.0
    dt = 0.05
    sig = elastic_stress_update(np.zeros((3, 3)), D, dt, np.eye(3), np.eye(3),
                                K, mu)
    assert sig[0, 1] == pytest.approx(mu * gdot * dt, rel=1e-12)
    assert abs(np.trace(sig)) < 1e-9 * abs(sig[0, 1])


def test_rigid_rotation_transforms_stress_objectively():
    K, mu = 1e7, 5e6
    sig0 = np.array([[2.0e4, 5.0e3, 0.0],
                     [5.0e3, -1.0e4, 2.0e3],
                     [0.0, 2.0e3, 4.0e4]])
    th = np.deg2rad(40.0)
    Q = np.array([[np.cos(th), -np.sin(th), 0],
                  [np.sin(th), np.cos(th), 0],
                  [0, 0, 1.0]])
    # rotation with zero rate of deformation: R_old = I, R_new = Q
    sig1 = elastic_stress_update(sig0, np.zeros((3, 3)), 0.1, Q, np.eye(3),
                                 K, mu)
    assert np.allclose(sig1, Q @ sig0 @ Q.T, atol=1e-9)
    assert np.trace(sig1) == pytest.approx(np.trace(sig0), rel=1e-12)
    i2 = 0.5 * (np.trace(sig0) ** 2 - np.trace(sig0 @ sig0))
    i2r = 0.5 * (np.trace(sig1) ** 2 - np.trace(sig1 @ sig1))
    assert i2r == pytest.approx(i2, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_update_is_exactly_objective(seed):
    # rotated kinematics give the rotation of the plain update
    rng = np.random.default_rng(seed)
    K, mu = 2e7, 9e6
    sig0 = rng.normal(0, 1e4, (3, 3))
    sig0 = 0.5 * (sig0 + sig0.T)
    D = rng.normal(0, 1e-3, (3, 3))
    D = 0.5 * (D + D.T)
    ang = rng.uniform(0, np.pi)
    axis = rng.normal(0, 1, 3)
    axis /= np.linalg.norm(axis)
    Kx = np.array([[0, -axis[2], axis[1]],
                   [axis[2], 0, -axis[0]],
                   [-axis[1], axis[0], 0]])
    Q = np.eye(3) + np.sin(ang) * Kx + (1 - np.cos(ang)) * (Kx @ Kx)
    dt = 0.01
    plain = elastic_stress_update(sig0, D, dt, np.eye(3), np.eye(3), K, mu)
    rotated = elastic_stress_update(sig0, Q @ D @ Q.T, dt, Q, np.eye(3), K, mu)
    assert np.allclose(rotated, Q @ plain @ Q.T, atol=1e-10 * (1 + np.abs(plain).max()))


def test_saturation_limits():
    ret = saturation(1.0, 0.33, np.array([-1e-6, 0.0, 5e3]), 1e-4, 0.0, 1.25)
    assert ret.S_r[0] == pytest.approx(1.0, abs=1e-6)
    assert ret.S_r[1] == 1.0 and ret.S_r[2] == 1.0
    assert ret.k_r[1] == 1.0
    assert ret.dSr_dpw[1] == 0.0


def test_relative_permeability_endpoints_and_reference_value():
    assert relative_permeability(1.0, 1.25) == pytest.approx(1.0)
    assert relative_permeability(0.0, 1.25) == pytest.approx(0.0)
    # n = 1.25 (m = 0.2), S_r = 0.82
    assert relative_permeability(0.82, 1.25) == pytest.approx(7.089251006e-3,
                                                              rel=1e-9)


def test_saturation_reference_state():
    # the column material realizes S_r(-15 kPa) = 0.822 at J=1, phi=0.33
    ret = saturation(1.0, 0.33, -1.5e4, 1e-4, 0.0, 1.25)
    assert float(ret.S_r) == pytest.approx(0.8222860557, rel=1e-8)


def test_saturation_rejects_bad_exponent():
    with pytest.raises(ValueError):
        saturation(1.0, 0.3, -1e4, 1e-4, 0.0, 1.0)


def test_derivative_matches_central_differences():
    a1, a2, n = 3.8e-5, 3.49, 1.78
    J, phi = 1.02, 0.28
    suctions = -np.logspace(2.5, 6.5, 60)
    ret = saturation(J, phi, suctions, a1, a2, n)
    h = np.maximum(1e-7 * np.abs(suctions), 1e-3)
    up = saturation(J, phi, suctions + h, a1, a2, n).S_r
    dn = saturation(J, phi, suctions - h, a1, a2, n).S_r
    fd = (up - dn) / (2 * h)
    assert np.allclose(ret.dSr_dpw, fd, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0),
       st.floats(1.05, 6.0))
def test_relative_permeability_monotone(s1, s2, n):
    lo, hi = sorted((s1, s2))
    assert relative_permeability(lo, n) <= relative_permeability(hi, n) + 1e-12


def test_porosity_update_examples():
    assert porosity_update(1.0, 0.25) == pytest.approx(0.25)
    assert porosity_update(1e9, 0.25) == pytest.approx(1.0, abs=1e-6)
    assert porosity_update(1.1, 0.25) == pytest.approx(1.0 - 0.75 / 1.1,
                                                       rel=1e-12)


def test_porosity_update_flags_out_of_range():
    with pytest.raises(PorosityRangeError):
        porosity_update(0.5, 0.25)  # squeezed below zero porosity


def test_darcy_flux_examples():
    g = np.array([1.0e4, 0.0, 0.0])
    q = darcy_flux(g, np.eye(3), 1.0, 1e-14, 1e-3)
    assert np.allclose(q, [-1e-7, 0.0, 0.0])
    assert np.allclose(darcy_flux(np.zeros(3), np.eye(3), 0.7, 1e-14, 1e-3), 0)


def test_darcy_flux_rotation_invariant_for_isotropic_permeability():
    th = np.deg2rad(63.0)
    Q = np.array([[np.cos(th), 0, np.sin(th)],
                  [0, 1, 0],
                  [-np.sin(th), 0, np.cos(th)]])
    g = np.array([2.0e3, -4.0e3, 1.0e3])
    q_plain = darcy_flux(g, np.eye(3), 0.4, 2e-15, 1e-3)
    q_rot = darcy_flux(g, Q, 0.4, 2e-15, 1e-3)
    assert np.allclose(q_rot, q_plain, rtol=1e-12)


def test_isotropic_increment_is_linear_in_rate():
    D = np.diag([1e-3, -2e-3, 5e-4])
    one = isotropic_stress_increment(D, 0.1, 1e7, 5e6)
    two = isotropic_stress_increment(2 * D, 0.1, 1e7, 5e6)
    assert np.allclose(two, 2 * one)
