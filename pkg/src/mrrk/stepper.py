"""Explicit Runge-Kutta steps that expose every embedded update direction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import DomainError, OdeProblem
from .tableaux import EmbeddedSet


class StepFailure(RuntimeError):
    """A right-hand side evaluation failed inside a step."""

    def __init__(self, message: str, stage: int | None = None, time: float | None = None,
                 state: np.ndarray | None = None):
        super().__init__(message)
        self.stage = stage
        self.time = time
        self.state = state


@dataclass(frozen=True)
class StepRecord:
    """Stages and directions of one step.

    ``directions[k] = sum_j weights[k, j] * slopes[j]``; the baseline update
    is ``start_state + step_size * directions[0]``.
    """

    start_time: float
    start_state: np.ndarray
    step_size: float
    stage_states: np.ndarray
    stage_slopes: np.ndarray
    directions: np.ndarray

    @property
    def baseline_update(self) -> np.ndarray:
        return self.start_state + self.step_size * self.directions[0]

    def update(self, k: int) -> np.ndarray:
        """Update of the ``k``-th embedded method on its own."""
        return self.start_state + self.step_size * self.directions[k]


def explicit_step(problem: OdeProblem, emb: EmbeddedSet, t: float, u: np.ndarray,
                  dt: float) -> StepRecord:
    """One step of an explicit embedded set; ``s`` right-hand side evaluations."""
    A, c = emb.A, emb.c
    if np.any(np.triu(A)):
        raise ValueError(f"{emb.name} is not explicit")
    if not dt > 0:
        raise ValueError("step size must be positive")
    s = emb.stage_count
    u = np.asarray(u, dtype=float)
    stages = np.empty((s, u.size))
    slopes = np.empty((s, u.size))
    for i in range(s):
        g = u + dt * (A[i, :i] @ slopes[:i]) if i else u.copy()
        stages[i] = g
        try:
            slopes[i] = problem.rhs(t + c[i] * dt, g)
        except DomainError as exc:
            raise StepFailure(f"stage {i + 1}: {exc}", stage=i, time=t, state=u) from exc
    if not np.all(np.isfinite(slopes)):
        raise StepFailure("non-finite stage slope", time=t, state=u)
    return StepRecord(t, u, dt, stages, slopes, emb.weights @ slopes)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray


def fixed_grid_integrate(problem: OdeProblem, emb: EmbeddedSet, dt: float, t_final: float,
                         t0: float | None = None, u0: np.ndarray | None = None) -> Trajectory:
    """Baseline integration with the first weight vector; the last step is shortened to hit ``t_final``."""
    t = problem.initial_time if t0 is None else t0
    u = np.array(problem.initial_state if u0 is None else u0, dtype=float)
    n_full = int(np.floor((t_final - t) / dt + 1e-9))
    times, states = [t], [u]
    start = t
    for n in range(1, n_full + 2):
        target = start + n * dt
        if target > t_final - 1e-12 * max(1.0, abs(t_final)):
            target = t_final
        h = target - t
        if h <= 0:
            break
        try:
            u = explicit_step(problem, emb, t, u, h).baseline_update
        except StepFailure as exc:
            raise StepFailure(f"baseline run failed at t={t}: {exc}", exc.stage, t, u) from exc
        t = target
        times.append(t)
        states.append(u)
        if t >= t_final:
            break
    return Trajectory(np.array(times), np.array(states))
