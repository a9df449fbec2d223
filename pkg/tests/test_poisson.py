import numpy as np
import pytest

from greenflow.constants import EPS0_F_PER_NM, Q_E
from greenflow.device import DeviceSpec, build_device
from greenflow.poisson import (ELECTRON_DENSITY, Field, core_solve,
                               density_field, device_boundary,
                               initial_potential, log_density_field,
                               potential_field, solve_poisson, zero_density)


def test_field_tags_and_invariants():
    with pytest.raises(ValueError):
        density_field(np.array([[-1.0]]))
    f = log_density_field(density_field(np.array([[0.0, 1e20]])))
    assert f.values[0, 0] == 0.0            # floored at 1 cm^-3
    assert f.values[0, 1] == pytest.approx(20.0)


def test_constant_dirichlet_everywhere():
    # zero charge, all boundaries held at 0.3 V: harmonic -> 0.3 V everywhere
    nx, ny = 12, 9
    eps = np.full((nx, ny), 5.0)
    mask = np.zeros((nx, ny), bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    vals = np.full((nx, ny), 0.3)
    v = core_solve(eps, np.zeros((nx, ny)), mask, vals, 0.5)
    assert np.abs(v - 0.3).max() < 1e-12


def test_no_dirichlet_is_singular():
    nx, ny = 4, 4
    with pytest.raises(ValueError, match="Dirichlet"):
        core_solve(np.ones((nx, ny)), np.zeros((nx, ny)),
                   np.zeros((nx, ny), bool), np.zeros((nx, ny)), 1.0)


def _mms_error(n: int) -> float:
    """Max error against V* = sin(pi x / L) sin(pi y / W), uniform eps."""
    lx, ly = 8.0, 4.0
    nx, ny = n + 1, n // 2 + 1
    a = lx / n
    x = np.linspace(0.0, lx, nx)[:, None]
    y = np.linspace(0.0, ly, ny)[None, :]
    v_exact = np.sin(np.pi * x / lx) * np.sin(np.pi * y / ly)
    eps_r = 1.0
    lap = -(np.pi ** 2 / lx ** 2 + np.pi ** 2 / ly ** 2) * v_exact
    rhs = eps_r * lap
    mask = np.zeros((nx, ny), bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    v = core_solve(np.full((nx, ny), eps_r), rhs, mask, v_exact, a)
    return float(np.abs(v - v_exact).max())


def test_manufactured_solution_second_order():
    e1 = _mms_error(16)
    e2 = _mms_error(32)
    e3 = _mms_error(64)
    assert e1 / e2 == pytest.approx(4.0, rel=0.2)
    assert e2 / e3 == pytest.approx(4.0, rel=0.2)


def test_discrete_maximum_principle(rng):
    nx, ny = 15, 11
    eps = np.exp(rng.normal(0.0, 0.5, (nx, ny)))
    mask = np.zeros((nx, ny), bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    vals = np.where(mask, rng.normal(0.0, 1.0, (nx, ny)), 0.0)
    v = core_solve(eps, np.zeros((nx, ny)), mask, vals, 0.5)
    assert v.max() <= vals[mask].max() + 1e-12
    assert v.min() >= vals[mask].min() - 1e-12


def test_linearity_in_charge(default_grid, rng):
    # with fixed boundary values the charge response is affine: subtract the
    # zero-charge solve and superpose
    g = default_grid
    rho1 = density_field(rng.uniform(0, 1e19, (g.nx, g.ny)))
    rho2 = density_field(rng.uniform(0, 1e19, (g.nx, g.ny)))
    alpha, beta = 0.7, 0.4
    combo = density_field(alpha * rho1.values + beta * rho2.values)
    v1 = solve_poisson(g, rho1, 0.0, 0.0).values
    v2 = solve_poisson(g, rho2, 0.0, 0.0).values
    v0 = solve_poisson(g, zero_density(g), 0.0, 0.0).values
    lhs = solve_poisson(g, combo, 0.0, 0.0).values - v0
    rhs = alpha * (v1 - v0) + beta * (v2 - v0)
    scale = max(np.abs(lhs).max(), 1e-30)
    assert np.abs(lhs - rhs).max() / scale < 1e-9


def test_gate_dirichlet_value(default_grid):
    # n = 0, vg = 0.7: potential maximum sits on the gate nodes at vg - offset
    g = default_grid
    vg = 0.7
    v = initial_potential(g, vg, 0.0)
    expected = vg - g.spec.gate_workfunction_offset
    assert v.values[g.gate_mask] == pytest.approx(expected)
    assert v.values.max() == pytest.approx(max(expected, 0.0))


def test_contact_columns_pinned(default_grid):
    g = default_grid
    v = initial_potential(g, 0.3, 0.25)
    assert np.abs(v.values[0, :]).max() < 1e-14
    assert v.values[-1, :] == pytest.approx(0.25)


def test_solve_poisson_validates_inputs(default_grid):
    g = default_grid
    with pytest.raises(ValueError, match="electron density"):
        solve_poisson(g, potential_field(np.zeros((g.nx, g.ny))), 0.0, 0.0)
    with pytest.raises(ValueError, match="shape"):
        solve_poisson(g, density_field(np.zeros((3, 3))), 0.0, 0.0)


def test_donor_charge_raises_potential(default_grid):
    # positive space charge (donors, no electrons) bows the potential upward
    g = default_grid
    v = solve_poisson(g, zero_density(g), 0.0, 0.0).values
    v0 = initial_potential(g, 0.0, 0.0).values
    si = g.silicon_rows
    assert v[1:-1, si].max() > v0[1:-1, si].max() + 0.01
