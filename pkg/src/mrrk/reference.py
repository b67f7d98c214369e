"""High-accuracy reference trajectories for problems without a closed form.

The integrator is scipy's ``RK45``: the Dormand-Prince 5(4) pair with the
standard step controller and quartic dense output over accepted steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

#: tolerances below this are not attainable in double precision
MIN_TOLERANCE = 1e-13


class StepUnderflow(RuntimeError):
    """The controller asked for a step below the resolvable size."""


@dataclass(frozen=True)
class ReferenceSolution:
    """Dense evaluator of an adaptive run on ``[t0, t_final]``.

    Attributes
    ----------
    mesh : ndarray
        Accepted step times.
    nfev : int
        Right-hand side evaluations.
    rtol, atol : float
        Tolerances actually used (after clamping).
    """

    _dense: object
    t0: float
    t_final: float
    mesh: np.ndarray
    nfev: int
    rtol: float
    atol: float

    def __call__(self, t):
        """State at time(s) ``t``; shape ``(m,)`` for scalar ``t``, ``(len(t), m)`` otherwise."""
        ta = np.asarray(t, dtype=float)
        span = self.t_final - self.t0
        slack = 1e-12 * max(1.0, abs(self.t_final))
        if np.any(ta < self.t0 - slack) or np.any(ta > self.t_final + slack):
            raise ValueError(f"reference solution defined on [{self.t0}, {self.t_final}]")
        ta = np.clip(ta, self.t0, self.t_final) if span > 0 else ta
        out = self._dense(ta)
        return out if ta.ndim == 0 else out.T

    @property
    def steps(self) -> int:
        return len(self.mesh) - 1


def solve_reference(problem, t_final: float, rtol: float = MIN_TOLERANCE,
                    atol: float = MIN_TOLERANCE) -> ReferenceSolution:
    """Integrate ``problem`` from its initial state to ``t_final``.

    Tolerances below ``1e-13`` are raised to ``1e-13``.

    Raises
    ------
    StepUnderflow
        If the step size collapses below ``1e-14 |t|``.
    """
    rtol, atol = max(rtol, MIN_TOLERANCE), max(atol, MIN_TOLERANCE)
    t0 = float(problem.initial_time)
    if t_final < t0:
        raise ValueError("t_final precedes the initial time")
    sol = solve_ivp(problem.rhs, (t0, t_final), np.asarray(problem.initial_state, dtype=float),
                    method="RK45", rtol=rtol, atol=atol, dense_output=True)
    if sol.status != 0:
        raise StepUnderflow(f"reference integration stopped at t={sol.t[-1]}: {sol.message}")
    mesh = sol.t
    if t_final > t0 and mesh.size > 1 and np.min(np.diff(mesh)) < 1e-14 * max(1.0, abs(t_final)):
        raise StepUnderflow("accepted step below 1e-14 |t|")
    return ReferenceSolution(sol.sol, t0, float(t_final), mesh, int(sol.nfev), rtol, atol)
