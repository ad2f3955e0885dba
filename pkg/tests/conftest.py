import numpy as np
import pytest

from peripore import MaterialModel, SolverConfig


@pytest.fixture
def column_material():
    """Elastic unsaturated soil; initial suction 15 kPa gives S_r = 0.82."""
    return MaterialModel(
        rho_s=2.1e3, rho_w=1.0e3, mu_w=1.0e-3,
        K=3.3e7, mu_s=1.62e7, K_w=2.0e8, k_w=1.0e-14,
        a1=1.0e-4, a2=0.0, n_vg=1.25, s_a=1.0e4,
        G_stab=1.0,
    )


@pytest.fixture
def brittle_material():
    """Stiff brittle porous solid with a fracture energy."""
    return MaterialModel(
        rho_s=2.0e3, rho_w=1.0e3, mu_w=1.0e-3,
        K=1.346e10, mu_s=1.095e10, K_w=2.0e8, k_w=1.0e-16,
        a1=3.8e-5, a2=3.49, n_vg=1.78, s_a=1.2e7,
        G0=225.0, G_stab=1.0, phi_cr=0.35,
    )


@pytest.fixture
def default_config():
    return SolverConfig(dt=1.0e-3)


def lattice_points(nx, ny, nz, dx):
    axes = [(np.arange(k) + 0.5) * dx for k in (nx, ny, nz)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
