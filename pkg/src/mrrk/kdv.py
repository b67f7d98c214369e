"""Fourier pseudospectral KdV in split form, stepped with additive RK pairs.

The semi-discretization of ``u_t + 6 u u_x + u_xxx = 0`` is

    dU/dt = f_E(U) + f_I(U),
    f_E(U) = -2 (D1(U*U) + U*D1(U)),      f_I(U) = -D3(U),

with ``D1``/``D3`` Fourier differentiation on a periodic grid. The split
form makes ``eta0 = dx sum U`` and ``eta1 = dx sum U^2`` exact invariants of
the semi-discrete system. The stiff linear term is treated implicitly; as it
is diagonal in Fourier space every implicit stage is a pointwise division.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problems import SolitonSolution, soliton
from .relaxation import RelaxedTrajectory, SolverConfig, relaxed_loop
from .stepper import StepFailure, StepRecord
from .tableaux import ArkPair, get_method

#: Grids and time windows of the three soliton studies.
SOLITON_SETUPS = {
    1: dict(N=512, domain=(-20.0, 60.0), t0=0.0, tf=20.0),
    2: dict(N=1024, domain=(-80.0, 80.0), t0=-25.0, tf=25.0),
    3: dict(N=1536, domain=(-130.0, 130.0), t0=-50.0, tf=50.0),
}

RELAX_MODES = ("off", "energy", "energy+whitham")


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic grid ``x_j = x_L + (j-1) dx``, ``j = 1..N``, ``dx = (x_R - x_L)/N``."""

    N: int
    x_left: float
    x_right: float

    def __post_init__(self):
        if self.N < 8 or self.N % 2:
            raise ValueError("N must be even and at least 8")
        if not self.x_right > self.x_left:
            raise ValueError("empty domain")

    @property
    def length(self) -> float:
        return self.x_right - self.x_left

    @property
    def dx(self) -> float:
        return self.length / self.N

    @property
    def x(self) -> np.ndarray:
        return self.x_left + self.dx * np.arange(self.N)

    @property
    def wavenumbers(self) -> np.ndarray:
        """Wavenumbers of the ``rfft`` coefficients."""
        return 2 * np.pi * np.fft.rfftfreq(self.N, d=self.dx)

    def symbol(self, order: int) -> np.ndarray:
        """Fourier multiplier ``(ik)^order``; the Nyquist entry is zero for odd orders."""
        s = (1j * self.wavenumbers) ** order
        if order % 2:
            s[-1] = 0.0
        return s


def spectral_derivative(U: np.ndarray, grid: SpectralGrid, order: int = 1) -> np.ndarray:
    """Derivative of a real periodic grid function by multiplication in Fourier space."""
    return np.fft.irfft(grid.symbol(order) * np.fft.rfft(U), n=grid.N)


# -- discrete invariants ----------------------------------------------------------------

def whitham_weights(N: int) -> np.ndarray:
    """Weights ``w`` with ``sum_j w_j F_j`` equal to the bracketed sums of the discrete
    Whitham functional.

    The bracket ``F_1 + sum_{j=2}^{N-1} (4 F_j + 2 F_{j+1}) + F_{N+1}`` is used as
    written, with ``F_{N+1} = F_1`` by periodicity. Away from the ends each
    interior point collects 4 + 2 = 6, twice the mean composite-Simpson weight,
    so the functional approximates ``2 * int(2u^3 - u_x^2) dx``.
    """
    w = np.zeros(N)
    w[0] += 2.0
    w[1:N - 1] += 4.0
    w[2:N] += 2.0
    return w


def kdv_invariants(U: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """``(eta0, eta1, eta2)``: discrete mass, energy (no factor 1/2) and Whitham functional."""
    U = np.asarray(U, dtype=float)
    dx = grid.dx
    w = whitham_weights(grid.N)
    V = spectral_derivative(U, grid, 1)
    eta2 = 2 * dx / 3 * (w @ U ** 3) - dx / 3 * (w @ V ** 2)
    return np.array([dx * U.sum(), dx * (U @ U), eta2])


def kdv_invariant_gradients(U: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Rows ``grad eta0``, ``grad eta1``, ``grad eta2`` (shape ``(3, N)``)."""
    U = np.asarray(U, dtype=float)
    dx = grid.dx
    w = whitham_weights(grid.N)
    V = spectral_derivative(U, grid, 1)
    # D1 is skew-symmetric, so D1^T (w V) = -D1 (w V)
    g2 = 2 * dx * w * U ** 2 + 2 * dx / 3 * spectral_derivative(w * V, grid, 1)
    return np.vstack([np.full(grid.N, dx), 2 * dx * U, g2])


# -- semi-discretization ----------------------------------------------------------------

INVARIANT_NAMES = ("eta0", "eta1", "eta2")


@dataclass(frozen=True)
class KdvSemiDiscretization:
    """Split-form semi-discretization; ``enforce`` selects the relaxed invariants.

    ``invariants`` and ``invariant_jacobian`` return only the selected rows,
    so an instance can be handed to the relaxation solver directly.
    """

    grid: SpectralGrid
    enforce: tuple[int, ...] = (1,)

    def explicit(self, U: np.ndarray) -> np.ndarray:
        return -2.0 * (spectral_derivative(U * U, self.grid, 1) + U * spectral_derivative(U, self.grid, 1))

    def implicit(self, U: np.ndarray) -> np.ndarray:
        return -spectral_derivative(U, self.grid, 3)

    def rhs(self, t: float, U: np.ndarray) -> np.ndarray:
        return self.explicit(U) + self.implicit(U)

    def all_invariants(self, U: np.ndarray) -> np.ndarray:
        return kdv_invariants(U, self.grid)

    def invariants(self, U: np.ndarray) -> np.ndarray:
        return kdv_invariants(U, self.grid)[list(self.enforce)]

    def invariant_jacobian(self, U: np.ndarray) -> np.ndarray:
        return kdv_invariant_gradients(U, self.grid)[list(self.enforce)]

    @property
    def invariant_count(self) -> int:
        return len(self.enforce)

    @property
    def invariant_names(self) -> tuple[str, ...]:
        return tuple(INVARIANT_NAMES[i] for i in self.enforce)


def imex_step(semi: KdvSemiDiscretization, pair: ArkPair, t: float, U: np.ndarray,
              dt: float) -> StepRecord:
    """One additive RK step.

    Stage ``i`` solves ``(I + dt a^I_ii D3) g_i = U + dt sum_{j<i} (a^E_ij f_E(g_j) + a^I_ij f_I(g_j))``
    exactly in Fourier space. Slopes are ``f_E(g_j) + f_I(g_j)`` and the
    directions use the shared weight vectors.
    """
    if not dt > 0:
        raise ValueError("step size must be positive")
    grid = semi.grid
    AE, AI = pair.explicit.A, pair.implicit.A
    s = pair.stage_count
    U = np.asarray(U, dtype=float)
    minus_d3 = -grid.symbol(3)
    stages = np.empty((s, grid.N))
    fE = np.empty((s, grid.N))
    fI = np.empty((s, grid.N))
    for i in range(s):
        rhs = U + dt * (AE[i, :i] @ fE[:i] + AI[i, :i] @ fI[:i]) if i else U.copy()
        if AI[i, i] != 0.0:
            g_hat = np.fft.rfft(rhs) / (1.0 - dt * AI[i, i] * minus_d3)
            g = np.fft.irfft(g_hat, n=grid.N)
            fI[i] = np.fft.irfft(minus_d3 * g_hat, n=grid.N)
        else:
            g = rhs
            fI[i] = semi.implicit(g)
        stages[i] = g
        fE[i] = semi.explicit(g)
        if not (np.all(np.isfinite(fE[i])) and np.all(np.isfinite(g))):
            raise StepFailure(f"non-finite KdV stage {i + 1}", stage=i, time=t, state=U)
    slopes = fE + fI
    return StepRecord(t, U, dt, stages, slopes, pair.weights @ slopes)


def eta2_drift_probe(n_solitons: int, grid: SpectralGrid | None = None,
                     horizon: tuple[float, float] | None = None, samples: int = 401) -> float:
    """``max_t |d eta2/dt|`` along the exact soliton, by the chain rule through the
    semi-discrete right-hand side: ``grad eta2(U) . f(U)`` with ``U`` the exact
    solution sampled on the grid."""
    setup = SOLITON_SETUPS[n_solitons]
    grid = grid or SpectralGrid(setup["N"], *setup["domain"])
    t0, tf = horizon or (setup["t0"], setup["tf"])
    exact = soliton(n_solitons)
    semi = KdvSemiDiscretization(grid, (2,))
    worst = 0.0
    for t in np.linspace(t0, tf, samples):
        U = exact(grid.x, t)
        rate = float(semi.invariant_jacobian(U)[0] @ semi.rhs(t, U))
        worst = max(worst, abs(rate))
    return worst


def exact_on_grid(exact: SolitonSolution, grid: SpectralGrid, t: float) -> np.ndarray:
    """Exact solution sampled on the grid, periodized for a single soliton.

    A lone soliton leaves the window after a while; its periodic extension
    (the solution of the periodic problem, up to sech^2 tails below roundoff
    on the standard grids) is obtained by wrapping ``x`` around its centre.
    Multi-soliton windows are sized so that no wrapping is needed.
    """
    x = grid.x
    if exact.count == 1:
        centre = 2 * exact.betas[0] * t
        L = grid.length
        x = centre + np.mod(x - centre + L / 2, L) - L / 2
    return exact(x, t)


# -- experiments ----------------------------------------------------------------------

@dataclass
class KdvConfig:
    """One KdV run. Unset grid/time fields come from :data:`SOLITON_SETUPS`."""

    solitons: int = 1
    method: str = "ARK3(2)4L[2]SA"
    dt: float = 0.1
    relax: str = "off"
    N: int | None = None
    domain: tuple[float, float] | None = None
    t0: float | None = None
    tf: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)

    def resolved(self) -> "KdvConfig":
        if self.solitons not in SOLITON_SETUPS:
            raise ValueError(f"solitons must be one of {sorted(SOLITON_SETUPS)}")
        if self.relax not in RELAX_MODES:
            raise ValueError(f"relax must be one of {RELAX_MODES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        setup = SOLITON_SETUPS[self.solitons]
        return KdvConfig(self.solitons, self.method, self.dt, self.relax,
                         self.N or setup["N"], tuple(self.domain or setup["domain"]),
                         setup["t0"] if self.t0 is None else self.t0,
                         setup["tf"] if self.tf is None else self.tf, self.solver)


@dataclass
class KdvResult:
    """Per-step time series of a KdV run; row 0 is the initial state."""

    config: KdvConfig
    times: np.ndarray
    errors: np.ndarray
    invariant_deviation: np.ndarray
    gammas: np.ndarray
    residuals: np.ndarray
    final_state: np.ndarray

    def max_deviation(self) -> np.ndarray:
        return np.max(np.abs(self.invariant_deviation), axis=0)

    def header(self) -> list[str]:
        g = [f"gamma{i + 1}" for i in range(self.gammas.shape[1])]
        return ["t", "error", "eta0_dev", "eta1_dev", "eta2_dev", *g, "residual"]

    def rows(self):
        for i in range(self.times.size):
            yield [self.times[i], self.errors[i], *self.invariant_deviation[i], *self.gammas[i],
                   self.residuals[i]]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])


def _enforced(relax: str) -> tuple[int, ...]:
    return {"off": (1,), "energy": (1,), "energy+whitham": (1, 2)}[relax]


def kdv_experiment(config: KdvConfig) -> KdvResult:
    """Run one soliton study and collect errors and invariant deviations.

    Errors are max-norm differences from the exact soliton at the (relaxed)
    step times. In ``energy+whitham`` mode inexact relaxation solves are
    accepted, since the semi-discretization conserves ``eta2`` only approximately.
    """
    cfg = config.resolved()
    pair = get_method(cfg.method)
    if not isinstance(pair, ArkPair):
        raise ValueError(f"{cfg.method} is not an additive RK pair")
    grid = SpectralGrid(cfg.N, *cfg.domain)
    exact: SolitonSolution = soliton(cfg.solitons)
    semi = KdvSemiDiscretization(grid, _enforced(cfg.relax))
    U0 = exact_on_grid(exact, grid, cfg.t0)
    step = lambda t, u, h: imex_step(semi, pair, t, u, h)

    if cfg.relax == "off":
        times, states = [cfg.t0], [U0]
        t, U = cfg.t0, U0
        n_full = int(np.floor((cfg.tf - cfg.t0) / cfg.dt + 1e-9))
        for n in range(1, n_full + 2):
            target = min(cfg.t0 + n * cfg.dt, cfg.tf)
            if target - t <= 1e-12 * max(1.0, abs(cfg.tf)):
                break
            U = step(t, U, target - t).baseline_update
            t = target
            times.append(t)
            states.append(U)
        ell = 1
        traj = RelaxedTrajectory(np.array(times), np.array(states), np.zeros((len(times), 0)),
                                 np.zeros((len(times), ell)), np.ones(len(times), bool))
    else:
        solver = cfg.solver
        if cfg.relax == "energy+whitham" and not solver.allow_inexact:
            solver = SolverConfig(**{**solver.__dict__, "allow_inexact": True})
        traj = relaxed_loop(step, semi, cfg.t0, U0, cfg.dt, cfg.tf, solver)

    G0 = kdv_invariants(U0, grid)
    dev = np.array([kdv_invariants(U, grid) for U in traj.states]) - G0
    errors = np.array([np.max(np.abs(U - exact_on_grid(exact, grid, t)))
                       for t, U in zip(traj.times, traj.states)])
    if not np.all(np.isfinite(traj.states[-1])):
        raise StepFailure("non-finite KdV state")
    residuals = np.max(np.abs(traj.residuals), axis=1) if traj.residuals.size else np.zeros(traj.times.size)
    return KdvResult(cfg, traj.times, errors, dev, traj.gammas, residuals, traj.states[-1])


def kdv_error_slope(result: KdvResult, window: tuple[float, float] | None = None) -> float:
    """Log-log slope of the running-max error against elapsed time over the final
    half of the run (or over ``window`` in elapsed time)."""
    elapsed = result.times - result.times[0]
    env = np.maximum.accumulate(result.errors)
    lo, hi = window or (elapsed[-1] / 2, elapsed[-1])
    keep = (elapsed >= lo) & (elapsed <= hi) & (elapsed > 0) & (env > 0)
    return float(np.polyfit(np.log(elapsed[keep]), np.log(env[keep]), 1)[0])
