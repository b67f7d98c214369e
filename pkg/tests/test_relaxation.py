import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrrk.problems import get_problem
from mrrk.relaxation import (NonConvergence, RelaxationResidual, SolverConfig, fitted_slope,
                             gamma_scaling_probe, jacobian_core, relaxed_integrate, solve_relaxation)
from mrrk.stepper import explicit_step
from mrrk.tableaux import get_method

EXPLICIT = ["SSPRK(2,2)", "SSPRK(3,3)", "Heun(3,3)", "RK(4,4)", "Fehlberg(6,4)", "Fehlberg(6,5)", "DP(7,5)"]


def _quadratic_root(rec, u):
    """Root nearest zero of |u_base + g v|^2 = |u|^2, cancellation free."""
    base, v = rec.baseline_update, rec.step_size * rec.directions[0]
    a, b, c = v @ v, 2 * base @ v, (base - u) @ (base + u)
    q = -0.5 * (b + math.copysign(math.sqrt(b * b - 4 * a * c), b))
    return min((q / a, c / q), key=abs), b


def test_single_invariant_matches_closed_form_root():
    """1000 random steps: the solver error stays within a few units of the
    resolution limit eps |G| / |dr/dgamma| of a directly evaluated residual."""
    rng = np.random.default_rng(0)
    p = get_problem("rigid_body").select([0])
    eps = np.finfo(float).eps
    worst = 0.0
    for _ in range(1000):
        emb = get_method(EXPLICIT[rng.integers(len(EXPLICIT))]).subset(1)
        u = rng.normal(size=3)
        rec = explicit_step(p, emb, 0.0, u, rng.uniform(0.01, 0.5))
        target = p.invariants(u)
        gamma = solve_relaxation(p, rec, target).gamma[0]
        exact, b = _quadratic_root(rec, u)
        worst = max(worst, abs(gamma - exact) * abs(b) / (eps * (1 + target[0])))
    assert worst < 16


def test_planted_quadratic_root_is_recovered():
    """Targets planted at a known small gamma on a non-conserved quadratic form
    (dr/dgamma = O(dt)); the root comes back to the same resolution limit."""
    rng = np.random.default_rng(3)
    base = get_problem("rigid_body")
    p = base.__class__("skewed", base.rhs, lambda u: np.array([u @ u]), lambda u: 2 * u[None, :],
                       base.initial_state)
    emb = get_method("RK(4,4)").subset(1)
    for _ in range(200):
        u = rng.normal(size=3)
        rec = explicit_step(p, emb, 0.0, u, rng.uniform(0.05, 0.3))
        g_true = rng.uniform(-0.05, 0.05)
        target = p.invariants(rec.baseline_update + g_true * rec.step_size * rec.directions[0])
        gamma = solve_relaxation(p, rec, target).gamma[0]
        v = rec.step_size * rec.directions[0]
        a, b = v @ v, 2 * rec.baseline_update @ v
        other = -b / a - g_true
        assert abs(g_true) < abs(other)
        eps = np.finfo(float).eps
        assert abs(gamma - g_true) * abs(b) < 16 * eps * (1 + target[0])


@pytest.mark.parametrize("name", ["rigid_body", "lotka_volterra", "kepler", "perturbed_kepler"])
def test_residual_jacobian_matches_finite_differences(name):
    p = get_problem(name)
    ell = p.invariant_count
    rng = np.random.default_rng(4)
    for method in ("RK(4,4)", "DP(7,5)", "SSPRK(3,3)"):
        emb = get_method(method)
        if emb.count < ell:
            continue
        rec = explicit_step(p, emb.subset(ell), 0.0, p.initial_state, 0.1)
        res = RelaxationResidual(p, rec, p.invariants(p.initial_state))
        g = 0.01 * rng.normal(size=ell)
        J = res.jacobian(g)
        h = 1e-5
        for j in range(ell):
            e = np.zeros(ell)
            e[j] = h
            fd = (res(g + e) - res(g - e)) / (2 * h)
            scale = np.linalg.norm(p.invariant_jacobian(res.state(g)), axis=1) * np.linalg.norm(res.dtD[:, j])
            assert np.max(np.abs(J[:, j] - fd) / scale) < 1e-6


def test_jacobian_core_at_zero():
    p = get_problem("rigid_body")
    rec = explicit_step(p, get_method("RK(4,4)"), 0.0, p.initial_state, 0.1)
    res = RelaxationResidual(p, rec, p.invariants(p.initial_state))
    assert np.allclose(res.jacobian(np.zeros(2)), 0.1 * jacobian_core(p, rec, 2))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.2), st.sampled_from(["Heun(3,3)", "RK(4,4)", "Fehlberg(6,4)", "DP(7,5)"]))
def test_two_invariants_are_restored(dt, method):
    p = get_problem("rigid_body")
    u = p.exact(1.3)
    rec = explicit_step(p, get_method(method).subset(2), 1.3, u, dt)
    target = p.invariants(p.initial_state)
    r = solve_relaxation(p, rec, target, SolverConfig(allow_inexact=True))
    if r.converged:
        assert np.max(np.abs(p.invariants(r.relaxed_state) - target)) <= 1e-13 * 3
    assert r.adjusted_dt == pytest.approx((1 + r.gamma.sum()) * dt)


def test_zero_gamma_when_base_already_conserves():
    p = get_problem("rigid_body")
    rec = explicit_step(p, get_method("RK(4,4)"), 0.0, p.initial_state, 0.1)
    r = solve_relaxation(p, rec, p.invariants(rec.baseline_update))
    assert np.all(np.abs(r.gamma) < 1e-14)
    assert r.method == "newton"


def test_unreachable_target_raises_unless_inexact():
    p = get_problem("rigid_body")
    rec = explicit_step(p, get_method("RK(4,4)"), 0.0, p.initial_state, 0.1)
    target = p.invariants(p.initial_state) + np.array([1.0, -1.0])
    cfg = SolverConfig(fallback=False)
    with pytest.raises(NonConvergence) as info:
        solve_relaxation(p, rec, target, cfg)
    assert info.value.result.residual_norm > 1e-3
    r = solve_relaxation(p, rec, target, SolverConfig(fallback=False, allow_inexact=True))
    assert not r.converged


def test_more_invariants_than_directions():
    with pytest.raises(ValueError):
        relaxed_integrate(get_problem("kepler"), get_method("RK(4,4)"), 0.1, 1.0)


def test_dependent_kepler_invariants_converge():
    """|A|^2 = 1 + 2 H L^2 makes the 3x3 Jacobian rank 2; the min-norm stage copes."""
    p = get_problem("kepler")
    traj = relaxed_integrate(p, get_method("SSPRK(3,3)"), 0.05, 5.0)
    dev = np.array([p.invariants(u) for u in traj.states]) - p.invariants(p.initial_state)
    assert np.max(np.abs(dev)) < 1e-13
    assert traj.converged.all()
    assert "min-norm" in traj.methods


def test_relaxed_run_advances_time_and_conserves():
    p = get_problem("rigid_body")
    traj = relaxed_integrate(p, get_method("RK(4,4)"), 0.1, 5.0)
    assert traj.times[-1] >= 5.0 and traj.times[-2] < 5.0
    assert np.all(np.diff(traj.times) > 0)
    dev = np.array([p.invariants(u) for u in traj.states]) - p.invariants(p.initial_state)
    assert np.max(np.abs(dev)) < 1e-14
    assert np.all(np.abs(traj.gammas[1:]).max(axis=1) < 1.0)


def test_box_keeps_search_off_trivial_root():
    """SSPRK(2,2) has steps without a nearby root; best-residual steps must
    still advance time instead of settling on gamma = (-1, 0)."""
    p = get_problem("rigid_body")
    traj = relaxed_integrate(p, get_method("SSPRK(2,2)"), 0.1, 5.0, cfg=SolverConfig(allow_inexact=True))
    steps = np.diff(traj.times)
    assert np.all(steps > 0.02)
    assert traj.times[-1] >= 5.0
    assert not traj.converged.all()


def test_gamma_sum_scales_one_order_below_method():
    p = get_problem("rigid_body")
    dts = 0.1 / 2.0 ** np.arange(5)
    gs = gamma_scaling_probe(p, get_method("RK(4,4)"), dts, t0=0.5, u0=p.exact(0.5))
    assert gs.converged.all()
    assert gs.slope("Gamma") == pytest.approx(3.0, abs=0.3)
    # individual parameters cancel at leading order and scale like dt^(p-2)
    assert gs.slope("max_gamma") == pytest.approx(2.0, abs=0.3)


def test_branch_bound_flags_large_roots():
    p = get_problem("rigid_body")
    rec = explicit_step(p, get_method("Heun(3,3)"), 0.5, p.exact(0.5), 0.1)
    r = solve_relaxation(p, rec, p.invariants(p.initial_state), SolverConfig(branch_bound=1e-9))
    assert r.wrong_branch


def test_fitted_slope():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert fitted_slope(x, 3 * x ** 2.5) == pytest.approx(2.5)
