import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.special import ellipj

from mrrk.kdv import SpectralGrid, spectral_derivative
from mrrk.problems import (DomainError, get_problem, jacobi_sn_cn_dn, kepler_initial_state,
                           perturbed_kepler, runge_lenz, soliton)

ODE_NAMES = ["rigid_body", "lotka_volterra", "kepler", "perturbed_kepler"]


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(0.0, 0.95))
def test_jacobi_functions_match_scipy(u, m):
    assert np.allclose(jacobi_sn_cn_dn(u, m), ellipj(u, m)[:3], atol=1e-13)


def _fd_jacobian(G, u, h=1e-6):
    cols = []
    for j in range(u.size):
        e = np.zeros(u.size)
        e[j] = h
        cols.append((G(u + e) - G(u - e)) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("name", ODE_NAMES)
def test_invariant_jacobian_matches_finite_differences(name):
    p = get_problem(name)
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = p.initial_state * (1 + 0.1 * rng.normal(size=p.dimension))
        assert np.allclose(p.invariant_jacobian(u), _fd_jacobian(p.invariants, u), atol=1e-7, rtol=1e-7)


@pytest.mark.parametrize("name", ODE_NAMES)
def test_invariants_are_conserved_by_the_vector_field(name):
    p = get_problem(name)
    rng = np.random.default_rng(2)
    for _ in range(5):
        u = p.initial_state * (1 + 0.1 * rng.normal(size=p.dimension))
        rate = p.invariant_jacobian(u) @ p.rhs(0.0, u)
        assert np.max(np.abs(rate)) < 1e-13 * (1 + np.max(np.abs(p.rhs(0.0, u))))


@pytest.mark.parametrize("name", ["rigid_body", "kepler"])
def test_exact_solution_solves_the_ode(name):
    p = get_problem(name)
    assert np.allclose(p.exact(0.0), p.initial_state, atol=1e-14)
    h = 1e-5
    for t in (0.3, 1.7, 4.2):
        du = (p.exact(t + h) - p.exact(t - h)) / (2 * h)
        assert np.allclose(du, p.rhs(t, p.exact(t)), atol=1e-8)
        assert np.allclose(p.invariants(p.exact(t)), p.invariants(p.initial_state), atol=1e-13)


def test_rigid_body_invariant_values():
    p = get_problem("rigid_body")
    s = math.sqrt(1.51)
    G = p.invariants(p.initial_state)
    assert G[0] == pytest.approx(2.0)
    assert G[1] == pytest.approx((1 - 0.51 / s) + (1 + 1 / s))


def test_kepler_invariants():
    p = get_problem("kepler")
    H, L, A = p.invariants(p.initial_state)
    e = 0.5
    assert H == pytest.approx(-0.5)
    assert L == pytest.approx(math.sqrt(1 - e * e))
    assert A == pytest.approx(e)
    # |A|^2 = 1 + 2 H L^2 makes the three invariants dependent
    assert A * A == pytest.approx(1 + 2 * H * L * L)


def test_kepler_period_is_two_pi():
    p = get_problem("kepler")
    assert np.allclose(p.exact(2 * math.pi), p.initial_state, atol=1e-12)


def test_runge_lenz_points_to_pericentre():
    V = runge_lenz(kepler_initial_state(0.3))
    assert V[0] == pytest.approx(0.3) and abs(V[1]) < 1e-15


def test_perturbed_kepler_energy():
    p = perturbed_kepler()
    H, L = p.invariants(p.initial_state)
    # q = (0.4, 0), p = (0, 2)
    assert H == pytest.approx(0.5 * 4 - 1 / 0.4 - 0.005 / (3 * 0.4 ** 3), rel=1e-15)
    assert H == pytest.approx(-0.526041666666667, abs=1e-14)
    assert L == pytest.approx(0.8)


def test_domain_errors():
    lv = get_problem("lotka_volterra")
    with pytest.raises(DomainError):
        lv.invariants(np.array([1.0, -1.0, 1.0]))
    kep = get_problem("kepler")
    with pytest.raises(DomainError):
        kep.rhs(0.0, np.array([0.0, 0.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        kepler_initial_state(1.0)
    with pytest.raises(KeyError):
        get_problem("pendulum")


def test_select_keeps_chosen_invariants():
    p = get_problem("kepler").select([0, 2])
    assert p.invariant_count == 2
    assert p.invariant_names == ("H", "A")
    assert p.invariant_jacobian(p.initial_state).shape == (2, 4)


# -- solitons --------------------------------------------------------------------

@pytest.mark.parametrize("n, mass", [(1, 2 * math.sqrt(2)), (2, 4.828427124746190),
                                     (3, 2 * math.sqrt(2) * (math.sqrt(0.4) + math.sqrt(0.7) + 1.0))])
def test_soliton_mass(n, mass):
    sol = soliton(n)
    x = np.linspace(-200, 200, 400001)
    u = sol(x, 0.0)
    assert trapezoid(u, x) == pytest.approx(mass, rel=1e-9)
    assert sol.mass == pytest.approx(mass, rel=1e-12)


def test_one_soliton_energy():
    x = np.linspace(-100, 100, 200001)
    u = soliton(1)(x, 0.0)
    assert trapezoid(u * u, x) == pytest.approx(4 / 3 * math.sqrt(2), rel=1e-9)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_solitons_satisfy_kdv(n):
    """Residual of u_t + 6 u u_x + u_xxx on a wide periodic grid at an interaction time."""
    sol = soliton(n)
    grid = SpectralGrid(4096, -150.0, 150.0)
    h = 1e-4
    for t in (-3.0, 0.0, 2.0):
        u = sol(grid.x, t)
        ut = (sol(grid.x, t + h) - sol(grid.x, t - h)) / (2 * h)
        res = ut + 6 * u * spectral_derivative(u, grid, 1) + spectral_derivative(u, grid, 3)
        assert np.max(np.abs(res)) < 1e-6


def test_multi_soliton_is_finite_across_poles():
    for n in (2, 3):
        sol = soliton(n)
        x = np.linspace(-60, 60, 120001)
        for t in (-10.0, 0.0, 10.0):
            u = sol(x, t)
            assert np.all(np.isfinite(u)) and u.max() < 1.01 and u.min() > -1e-12


def test_soliton_count_validation():
    with pytest.raises(ValueError):
        soliton(4)
