"""Multiple relaxation: choose step coefficients so several invariants are conserved.

After a step with stage slopes ``k_j`` the embedded weights give directions
``d_i = sum_j b^i_j k_j``. The relaxed update is

    u_gamma = u_base + dt * sum_i gamma_i d_i,     u_base = u_n + dt d_1,

with ``gamma`` solving ``G(u_gamma) = G(u_n)`` and the new time
``t_n + (1 + sum(gamma)) dt``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .problems import DomainError, OdeProblem
from .stepper import StepFailure, StepRecord, explicit_step
from .tableaux import EmbeddedSet

log = logging.getLogger(__name__)


class RelaxationError(RuntimeError):
    pass


class SingularJacobian(RelaxationError):
    pass


class NonConvergence(RelaxationError):
    def __init__(self, message, result: "RelaxedStep | None" = None, step_index: int | None = None):
        super().__init__(message)
        self.result = result
        self.step_index = step_index


@dataclass
class SolverConfig:
    """Knobs for the relaxation solve.

    ``tol`` is absolute on the invariant residual; when ``None`` it is
    ``rel_tol * (1 + max|G_target|)``.
    """

    tol: float | None = None
    rel_tol: float = 1e-13
    max_iter: int = 50
    fallback: bool = True
    fallback_grid: int = 11
    fallback_range: float = 0.1
    allow_inexact: bool = False
    max_condition: float = 1e12
    branch_bound: float | None = None

    def tolerance(self, target: np.ndarray) -> float:
        if self.tol is not None:
            return self.tol
        return self.rel_tol * (1.0 + float(np.max(np.abs(target))))


@dataclass
class RelaxedStep:
    gamma: np.ndarray
    relaxed_state: np.ndarray
    adjusted_dt: float
    residual: np.ndarray
    iterations: int
    method: str
    converged: bool
    wrong_branch: bool = False

    @property
    def Gamma(self) -> float:
        return float(np.sum(self.gamma))

    @property
    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.residual)))


def direction_matrix(record: StepRecord, count: int) -> np.ndarray:
    """Directions ``d_1 .. d_count`` as columns of an ``(m, count)`` matrix."""
    if count > record.directions.shape[0]:
        raise ValueError(f"{count} invariants need {count} directions, step has {record.directions.shape[0]}")
    return record.directions[:count].T


def jacobian_core(problem, record: StepRecord, count: int) -> np.ndarray:
    """``grad G(u_base) @ D``: the residual Jacobian at ``gamma = 0`` divided by ``dt``."""
    return problem.invariant_jacobian(record.baseline_update) @ direction_matrix(record, count)


class RelaxationResidual:
    def __init__(self, problem, record: StepRecord, target: np.ndarray):
        self.G = problem.invariants
        self.dG = problem.invariant_jacobian
        self.target = np.asarray(target, dtype=float)
        self.count = self.target.size
        self.base = record.baseline_update
        self.dtD = record.step_size * direction_matrix(record, self.count)

    def state(self, gamma):
        return self.base + self.dtD @ gamma

    def __call__(self, gamma):
        return self.G(self.state(gamma)) - self.target

    def jacobian(self, gamma):
        return self.dG(self.state(gamma)) @ self.dtD

    def safe_norm(self, gamma):
        try:
            r = self(gamma)
        except DomainError:
            return np.inf
        n = float(np.max(np.abs(r)))
        return n if np.isfinite(n) else np.inf


def _newton(res: RelaxationResidual, gamma0, tol, cfg: SolverConfig, pseudo: bool = False):
    """Damped Newton. With ``pseudo`` the step is the minimum-norm least-squares
    solution with singular values below ``1/max_condition`` (relative) discarded,
    which tracks the root nearest the start when the invariants are dependent."""
    gamma = np.array(gamma0, dtype=float)
    r = res(gamma)
    norm = float(np.max(np.abs(r)))
    roundoff = 16 * np.finfo(float).eps * (1.0 + float(np.max(np.abs(res.target))))
    it = 0
    while it < cfg.max_iter:
        polishing = norm <= tol
        J = res.jacobian(gamma)
        if pseudo:
            delta = np.linalg.lstsq(J, -r, rcond=1.0 / cfg.max_condition)[0]
        elif np.linalg.cond(J) > cfg.max_condition:
            raise SingularJacobian(f"relaxation Jacobian condition number exceeds {cfg.max_condition:g}")
        else:
            delta = np.linalg.solve(J, -r)
        it += 1
        if polishing:
            # One last full step. At a roundoff-level residual the Newton
            # correction is still the best estimate of the root, so it is kept
            # when it is small and does not push the residual above roundoff.
            trial = gamma + delta
            tnorm = res.safe_norm(trial)
            if (tnorm <= max(norm, roundoff)
                    and np.max(np.abs(delta)) <= 1e-6 * (1.0 + np.max(np.abs(gamma)))):
                gamma, norm = trial, tnorm
            break
        alpha = 1.0
        for _ in range(30):
            trial = gamma + alpha * delta
            tnorm = res.safe_norm(trial)
            if tnorm < norm:
                break
            alpha *= 0.5
        else:
            break
        gamma = trial
        r = res(gamma)
        norm = tnorm
    return gamma, norm, it


def _continuation(problem, record: StepRecord, res: RelaxationResidual, tol, cfg: SolverConfig,
                  substeps=(8, 64)):
    """Track the root through ``gamma = 0`` while the target moves from
    ``G(u_base)`` to the requested value, correcting with minimum-norm Newton.

    This follows the branch the scaling argument selects even when plain
    Newton from zero overshoots or stalls on a nearly singular Jacobian.
    """
    start = problem.invariants(res.base)
    best = (np.inf, np.zeros(res.count), 0)
    total = 0
    for k in substeps:
        gamma = np.zeros(res.count)
        for s in np.linspace(0.0, 1.0, k + 1)[1:]:
            sub = RelaxationResidual(problem, record, start + s * (res.target - start))
            gamma, norm, it = _newton(sub, gamma, tol, cfg, pseudo=True)
            total += it
        norm = res.safe_norm(gamma)
        if norm < best[0]:
            best = (norm, gamma, total)
        if norm <= tol:
            break
    return best[1], best[0], total


def _fallback(res: RelaxationResidual, cfg: SolverConfig):
    """Grid search plus simplex refinement of the squared residual.

    Both stay inside the box ``|gamma_i| <= fallback_range``. This also keeps the
    search away from the trivial root ``gamma = (-1, 0, ...)``, which reproduces
    ``u_n`` and so conserves everything while making no progress in time.
    """
    def objective(g):
        n = res.safe_norm(g)
        if not np.isfinite(n):
            return 1e300
        r = res(g)
        return float(r @ r)

    ranges = [(-cfg.fallback_range, cfg.fallback_range)] * res.count
    start = optimize.brute(objective, ranges, Ns=cfg.fallback_grid, finish=None)
    start = np.atleast_1d(start)
    opt = optimize.minimize(objective, start, method="Nelder-Mead", bounds=ranges,
                            options={"xatol": 1e-16, "fatol": 1e-32, "maxiter": 4000 * res.count,
                                     "maxfev": 8000 * res.count})
    gamma = np.atleast_1d(opt.x)
    return gamma, res.safe_norm(gamma), int(opt.nit)


def solve_relaxation(problem, record: StepRecord, target: Sequence[float],
                     cfg: SolverConfig | None = None) -> RelaxedStep:
    """Find ``gamma`` with ``G(u_base + dt D gamma) = target``.

    ``problem`` is anything with ``invariants`` and ``invariant_jacobian``
    callables. Damped Newton from ``gamma = 0`` runs first; if it fails
    (singular Jacobian or residual above tolerance) the later stages run in
    turn until one meets the tolerance: minimum-norm Newton from zero, a
    continuation in the target, and a derivative-free search. The candidate
    with the smallest residual is returned; when none meets the tolerance,
    candidates inside the box ``|gamma_i| <= fallback_range`` take precedence.
    """
    cfg = cfg or SolverConfig()
    res = RelaxationResidual(problem, record, target)
    tol = cfg.tolerance(res.target)
    ell = res.count
    candidates = []
    iterations = 0
    try:
        g, n, iterations = _newton(res, np.zeros(ell), tol, cfg)
        candidates.append((n, g, "newton"))
    except (SingularJacobian, np.linalg.LinAlgError) as exc:
        log.debug("newton failed: %s", exc)
    if not candidates or candidates[0][0] > tol:
        g, n, it = _newton(res, np.zeros(ell), tol, cfg, pseudo=True)
        iterations += it
        candidates.append((n, g, "min-norm"))
    if min(c[0] for c in candidates) > tol:
        g, n, it = _continuation(problem, record, res, tol, cfg)
        iterations += it
        candidates.append((n, g, "continuation"))
    if cfg.fallback and min(c[0] for c in candidates) > tol:
        g, n, it = _fallback(res, cfg)
        iterations += it
        try:
            g2, n2, it2 = _newton(res, g, tol, cfg)
            iterations += it2
            if n2 < n and np.max(np.abs(g2)) <= cfg.fallback_range:
                g, n = g2, n2
        except (SingularJacobian, np.linalg.LinAlgError):
            pass
        candidates.append((n, g, "fallback"))
    if not candidates:
        raise NonConvergence("relaxation Jacobian singular and fallback disabled")
    norm, gamma, method = min(candidates, key=lambda c: c[0])
    if norm > tol:
        # No root met the tolerance. An inexact answer far from zero drifts
        # towards the trivial root and stalls the clock, so prefer the best
        # candidate inside the search box.
        boxed = [c for c in candidates if np.max(np.abs(c[1])) <= cfg.fallback_range]
        if boxed:
            norm, gamma, method = min(boxed, key=lambda c: c[0])
    dt = record.step_size
    result = RelaxedStep(gamma=gamma, relaxed_state=res.state(gamma),
                         adjusted_dt=(1.0 + float(np.sum(gamma))) * dt,
                         residual=res(gamma), iterations=iterations, method=method,
                         converged=norm <= tol)
    if cfg.branch_bound is not None and np.max(np.abs(gamma)) > 10.0 * cfg.branch_bound:
        result.wrong_branch = True
        log.warning("relaxation root |gamma| = %.3e exceeds branch bound %.3e",
                    np.max(np.abs(gamma)), cfg.branch_bound)
    if not result.converged and not cfg.allow_inexact:
        raise NonConvergence(f"relaxation residual {norm:.3e} above tolerance {tol:.3e}", result)
    return result


# -- integration loops -------------------------------------------------------------

StepFunction = Callable[[float, np.ndarray, float], StepRecord]


@dataclass
class RelaxedTrajectory:
    times: np.ndarray
    states: np.ndarray
    gammas: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    methods: list[str] = field(default_factory=list)


def relaxed_loop(step: StepFunction, problem, t0: float, u0: np.ndarray, dt: float, t_final: float,
                 cfg: SolverConfig | None = None, target: np.ndarray | None = None,
                 callback: Callable[[float, np.ndarray], None] | None = None) -> RelaxedTrajectory:
    """Relaxed stepping until the first adjusted time at or beyond ``t_final``.

    Each step conserves ``target`` (default: the invariants at ``u0``).
    Using the initial values rather than the previous step's values keeps
    roundoff from accumulating as a random walk.
    """
    cfg = cfg or SolverConfig()
    u = np.array(u0, dtype=float)
    target = problem.invariants(u) if target is None else np.asarray(target, dtype=float)
    ell = target.size
    t = t0
    times, states = [t], [u]
    gammas, residuals, conv, methods = [np.zeros(ell)], [np.zeros(ell)], [True], ["initial"]
    n = 0
    while t < t_final - 1e-12 * max(1.0, abs(t_final)):
        record = step(t, u, dt)
        try:
            r = solve_relaxation(problem, record, target, cfg)
        except NonConvergence as exc:
            exc.step_index = n
            raise
        except DomainError as exc:
            raise StepFailure(f"relaxation left the domain at step {n}, t={t}: {exc}", time=t, state=u) from exc
        if r.adjusted_dt <= 0:
            raise NonConvergence(f"non-positive relaxed step at step {n}", r, n)
        u = r.relaxed_state
        t = t + r.adjusted_dt
        n += 1
        times.append(t)
        states.append(u)
        gammas.append(r.gamma)
        residuals.append(r.residual)
        conv.append(r.converged)
        methods.append(r.method)
        if callback is not None:
            callback(t, u)
    return RelaxedTrajectory(np.array(times), np.array(states), np.array(gammas),
                             np.array(residuals), np.array(conv), methods)


def relaxed_integrate(problem: OdeProblem, emb: EmbeddedSet, dt: float, t_final: float,
                      invariants: Sequence[int] | None = None,
                      cfg: SolverConfig | None = None) -> RelaxedTrajectory:
    """MRRK integration of an ODE problem, enforcing the selected invariants."""
    prob = problem if invariants is None else problem.select(invariants)
    ell = prob.invariant_count
    if emb.count < ell:
        raise ValueError(f"{emb.name} offers {emb.count} directions; {ell} invariants requested")
    used = emb.subset(ell)
    step = lambda t, u, h: explicit_step(prob, used, t, u, h)
    return relaxed_loop(step, prob, prob.initial_time, prob.initial_state, dt, t_final, cfg)


@dataclass
class GammaScaling:
    """Per-step-size results of :func:`gamma_scaling_probe`."""

    dts: np.ndarray
    max_gamma: np.ndarray
    Gamma: np.ndarray
    residual: np.ndarray
    converged: np.ndarray

    def slope(self, which: str = "max_gamma") -> float:
        """Log-log slope over the step sizes where the quantity is nonzero."""
        y = np.abs(getattr(self, which))
        keep = y > 0
        if keep.sum() < 2:
            return float("nan")
        return fitted_slope(self.dts[keep], y[keep])


def gamma_scaling_probe(problem: OdeProblem, emb: EmbeddedSet, dts: Sequence[float],
                        cfg: SolverConfig | None = None, t0: float | None = None,
                        u0: np.ndarray | None = None) -> GammaScaling:
    """One relaxed step of each size in ``dts`` from a common state.

    The state defaults to the problem's initial state; ``t0``/``u0`` start
    from another point (for instance a point on the exact trajectory).
    """
    ell = problem.invariant_count
    used = emb.subset(ell)
    t = problem.initial_time if t0 is None else t0
    u = np.asarray(problem.initial_state if u0 is None else u0, dtype=float)
    target = problem.invariants(u)
    rows = []
    for dt in dts:
        record = explicit_step(problem, used, t, u, dt)
        r = solve_relaxation(problem, record, target, cfg)
        rows.append((float(np.max(np.abs(r.gamma))), r.Gamma, r.residual_norm, r.converged))
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    return GammaScaling(np.asarray(dts, dtype=float), np.array(cols[0]), np.array(cols[1]),
                        np.array(cols[2]), np.array(cols[3], dtype=bool))


def fitted_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
