import numpy as np
import pytest
from hypothesis import given, strategies as st

from peripore import (MaterialModel, Particles, SolverConfig,
                      mixture_density, validate_problem)


def test_mixture_density_reference_value():
    # phi=0.33, S_r=0.82, rho_s=2.1e3, rho_w=1e3
    rho = mixture_density(0.33, 0.82, 2.1e3, 1.0e3)
    assert rho == pytest.approx(1677.6, abs=1e-9)


def test_mixture_density_no_pore_space():
    assert mixture_density(0.0, 0.5, 2650.0, 1000.0) == 2650.0


def test_mixture_density_identical_phases():
    assert mixture_density(0.5, 1.0, 1000.0, 1000.0) == 1000.0


@given(
    s1=st.floats(0.0, 1.0), s2=st.floats(0.0, 1.0),
    phi=st.floats(0.01, 0.99),
)
def test_mixture_density_monotone_in_saturation(s1, s2, phi):
    lo, hi = sorted((s1, s2))
    assert mixture_density(phi, lo, 2000.0, 1000.0) <= \
        mixture_density(phi, hi, 2000.0, 1000.0)


def _valid_setup(column_material):
    pts = Particles.zeros(8)
    pts.x_ref[:] = np.random.default_rng(0).uniform(0, 1, (8, 3))
    pts.phi_ref[:] = 0.33
    pts.phi[:] = 0.33
    pts.S_r[:] = 0.82
    pts.volume_ref[:] = 1e-3
    pts.volume[:] = 1e-3
    cfg = SolverConfig(dt=1e-3)
    return pts, [column_material], cfg


def test_validate_accepts_consistent_problem(column_material):
    pts, mats, cfg = _valid_setup(column_material)
    assert validate_problem(pts, mats, cfg) == []


def test_validate_rejects_newmark_violation(column_material):
    pts, mats, cfg = _valid_setup(column_material)
    cfg.beta2 = 0.4
    errors = validate_problem(pts, mats, cfg)
    assert any("Newmark stability" in e for e in errors)


def test_validate_rejects_negative_porosity(column_material):
    pts, mats, cfg = _valid_setup(column_material)
    pts.phi[0] = -0.1
    errors = validate_problem(pts, mats, cfg)
    assert any("porosity" in e for e in errors)


def test_validate_rejects_bad_retention_exponent(column_material):
    pts, mats, cfg = _valid_setup(column_material)
    bad = MaterialModel(**{**column_material.__dict__, "n_vg": 0.9,
                           "k_f": None})
    errors = validate_problem(pts, [bad], cfg)
    assert any("n_vg" in e for e in errors)


def test_particles_position_identity():
    pts = Particles.zeros(3)
    pts.x_ref[:] = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    pts.u[:] = 0.25
    assert np.allclose(pts.x_cur, pts.x_ref + 0.25)


def test_material_defaults():
    m = MaterialModel(rho_s=2e3, rho_w=1e3, mu_w=1e-3, K=1e7, mu_s=1e7,
                      K_w=2e8, k_w=1e-14, a1=1e-4, a2=0.0, n_vg=2.0)
    assert m.k_f == m.k_w
    assert m.G0 is None
    assert m.validate() == []
