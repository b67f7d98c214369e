"""Experiment drivers, the manifest format and the pass/fail summary.

Every experiment is described by an :class:`ExperimentConfig`. ``execute``
runs one config and returns its metrics and CSV tables; ``run_all`` runs a
whole manifest (optionally in parallel worker processes), writes the tables
and produces one :class:`SummaryRow` per checked metric plus one row per
acceptance criterion.

Manifest format
---------------
Line-oriented ``key = value`` blocks separated by blank lines; ``#`` starts a
comment. ``expect`` may repeat and reads ``<criterion> <metric> <lo> <hi>``;
a criterion of ``-`` marks an informational check that does not affect the
exit status. ``inf`` is accepted as a bound.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .kdv import (SOLITON_SETUPS, KdvConfig, KdvSemiDiscretization, SpectralGrid, eta2_drift_probe,
                  kdv_error_slope, kdv_experiment, kdv_invariant_gradients, spectral_derivative)
from .problems import OdeProblem, get_problem
from .reference import ReferenceSolution, solve_reference
from .relaxation import (GammaScaling, RelaxationResidual, SolverConfig, fitted_slope,
                         gamma_scaling_probe, relaxed_integrate, solve_relaxation)
from .stepper import explicit_step, fixed_grid_integrate
from .tableaux import ArkPair, EmbeddedSet, check_embedded_set, get_method

log = logging.getLogger(__name__)

KINDS = ("convergence", "invariants", "error-growth", "gamma-scaling", "kdv",
         "tableau-audit", "kdv-structure", "eta2-probe", "oracle")
ODE_RELAX = ("off", "on", "both")

#: errors below this are treated as roundoff when fitting convergence orders
ERROR_FLOOR = 1e-11


class ManifestError(ValueError):
    """A manifest entry that cannot be turned into a valid config."""


# -- configuration --------------------------------------------------------------------

@dataclass(frozen=True)
class Expectation:
    """A tolerance band ``lo <= value <= hi`` on one metric.

    ``criterion`` is the acceptance criterion number, or ``None`` for an
    informational check.
    """

    criterion: int | None
    metric: str
    lo: float
    hi: float

    def check(self, value: float) -> bool:
        return bool(np.isfinite(value) or math.isinf(self.hi)) and self.lo <= value <= self.hi

    @property
    def band(self) -> str:
        return f"[{self.lo:g}, {self.hi:g}]"


@dataclass
class ExperimentConfig:
    """One experiment.

    ``dt`` is a tuple so that convergence and gamma-scaling studies can carry
    a list of step sizes. ``relax`` is ``off``/``on``/``both`` for ODE studies
    and one of :data:`mrrk.kdv.RELAX_MODES` for KdV runs. ``window`` is the
    elapsed-time interval used for error-growth slopes (default: the final
    decade for ODEs, the final half for KdV).
    """

    id: str
    kind: str
    problem: str | None = None
    method: str | None = None
    dt: tuple[float, ...] = ()
    tf: float | None = None
    t0: float | None = None
    relax: str = "off"
    solver: SolverConfig = field(default_factory=SolverConfig)
    out: str | None = None
    seed: int = 0
    invariants: tuple[int, ...] | None = None
    window: tuple[float, float] | None = None
    solitons: int | None = None
    N: int | None = None
    domain: tuple[float, float] | None = None
    orders: tuple[int, ...] | None = None
    samples: int | None = None
    states: bool = False
    studies: tuple[str, ...] = ()
    expect: tuple[Expectation, ...] = ()
    note: str = ""

    def validate(self) -> "ExperimentConfig":
        """Resolve names and check ranges; raises ``ManifestError``."""
        if self.kind not in KINDS:
            raise ManifestError(f"{self.id}: unknown kind {self.kind!r}")
        try:
            if self.method is not None:
                get_method(self.method)
            if self.problem is not None:
                get_problem(self.problem)
        except KeyError as exc:
            raise ManifestError(f"{self.id}: {exc.args[0]}") from None
        if any(not h > 0 for h in self.dt):
            raise ManifestError(f"{self.id}: step sizes must be positive")
        needs = {"convergence": ("problem", "method", "dt", "tf"),
                 "invariants": ("problem", "method", "dt", "tf"),
                 "error-growth": ("problem", "method", "dt", "tf"),
                 "gamma-scaling": ("problem", "method", "dt"),
                 "kdv": ("solitons", "method", "dt"),
                 "tableau-audit": ("method",),
                 "eta2-probe": ("solitons",)}.get(self.kind, ())
        missing = [k for k in needs if getattr(self, k) in (None, ())]
        if missing:
            raise ManifestError(f"{self.id}: {self.kind} needs {', '.join(missing)}")
        if self.kind == "kdv":
            KdvConfig(self.solitons, self.method, self.dt[0], self.relax).resolved()
        elif self.kind in ("convergence", "invariants", "error-growth") and self.relax not in ODE_RELAX:
            raise ManifestError(f"{self.id}: relax must be one of {ODE_RELAX}")
        return self


# -- manifest parsing -----------------------------------------------------------------

def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.replace(",", " ").split())


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.replace(",", " ").split())


def _flag(value: str) -> bool:
    v = value.strip().lower()
    if v in ("yes", "true", "1", "on"):
        return True
    if v in ("no", "false", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _expectation(value: str) -> Expectation:
    parts = value.split()
    if len(parts) != 4:
        raise ValueError(f"expect needs '<criterion> <metric> <lo> <hi>', got {value!r}")
    crit = None if parts[0] == "-" else int(parts[0])
    return Expectation(crit, parts[1], float(parts[2]), float(parts[3]))


_SOLVER_KEYS = {"relax_tol": ("tol", float), "relax_rel_tol": ("rel_tol", float),
                "relax_max_iter": ("max_iter", int), "relax_fallback": ("fallback", _flag),
                "relax_fallback_grid": ("fallback_grid", int),
                "relax_fallback_range": ("fallback_range", float),
                "relax_allow_inexact": ("allow_inexact", _flag)}

_CONFIG_KEYS = {"id": str, "kind": str, "problem": str, "method": str, "dt": _floats, "tf": float,
                "t0": float, "relax": str, "out": str, "seed": int, "invariants": _ints,
                "window": _floats, "solitons": int, "N": int, "domain": _floats, "orders": _ints,
                "samples": int, "states": _flag, "note": str,
                "studies": lambda v: tuple(s.strip() for s in v.split(",") if s.strip())}


def parse_manifest(text: str) -> list[dict[str, list[str]]]:
    """Split manifest text into blocks of ``key -> [values]`` (keys may repeat)."""
    blocks, current = [], {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            if not raw.strip() and current:
                blocks.append(current)
                current = {}
            continue
        if "=" not in line:
            raise ManifestError(f"manifest line without '=': {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        current.setdefault(key, []).append(value)
    if current:
        blocks.append(current)
    return blocks


def config_from_block(block: dict[str, list[str]]) -> ExperimentConfig:
    """Build and validate a config from one manifest block."""
    ident = block.get("id", ["<unnamed>"])[0]
    kwargs, solver, expect = {}, {}, []
    try:
        for key, values in block.items():
            if key == "expect":
                expect.extend(_expectation(v) for v in values)
            elif key in _SOLVER_KEYS:
                name, conv = _SOLVER_KEYS[key]
                solver[name] = conv(values[-1])
            elif key in _CONFIG_KEYS:
                kwargs[key] = _CONFIG_KEYS[key](values[-1])
            else:
                raise ManifestError(f"unknown key {key!r}")
    except (ValueError, ManifestError) as exc:
        raise ManifestError(f"{ident}: {exc}") from None
    if "id" not in kwargs or "kind" not in kwargs:
        raise ManifestError(f"{ident}: every entry needs id and kind")
    for key in ("window", "domain"):
        if key in kwargs and len(kwargs[key]) != 2:
            raise ManifestError(f"{ident}: {key} takes two numbers")
    return ExperimentConfig(solver=SolverConfig(**solver), expect=tuple(expect), **kwargs).validate()


def default_manifest_text() -> str:
    return resources.files("mrrk").joinpath("data").joinpath("default_manifest.txt").read_text()


# -- results --------------------------------------------------------------------------

@dataclass
class Table:
    header: list[str]
    rows: list[list[float]]

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


@dataclass
class ExperimentResult:
    id: str
    metrics: dict[str, float] = field(default_factory=dict)
    tables: dict[str, Table] = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class SummaryRow:
    """One checked metric. ``criterion`` is ``None`` for informational rows."""

    experiment: str
    metric: str
    value: float
    band: str
    passed: bool
    criterion: int | None = None


@dataclass
class Summary:
    rows: list[SummaryRow]
    results: list[ExperimentResult]

    @property
    def criteria(self) -> dict[int, bool]:
        out: dict[int, bool] = {}
        for r in self.rows:
            if r.criterion is not None and r.experiment != f"criterion-{r.criterion}":
                out[r.criterion] = out.get(r.criterion, True) and r.passed
        return dict(sorted(out.items()))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows if r.criterion is not None)

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["experiment", "criterion", "metric", "value", "band", "status"])
            for r in self.rows:
                w.writerow([r.experiment, "-" if r.criterion is None else r.criterion, r.metric,
                            _fmt(r.value), r.band, "pass" if r.passed else "FAIL"])


# -- ODE helpers ----------------------------------------------------------------------

_REFERENCES: dict[str, ReferenceSolution] = {}


def _truth(problem: OdeProblem, t_end: float):
    """Exact solution if available, else a cached reference run reaching ``t_end``."""
    if problem.exact is not None:
        return lambda t: np.array([problem.exact(s) for s in np.atleast_1d(t)])
    ref = _REFERENCES.get(problem.name)
    if ref is None or ref.t_final < t_end:
        ref = solve_reference(problem, t_end)
        _REFERENCES[problem.name] = ref
    return lambda t: np.atleast_2d(ref(np.atleast_1d(t)))


def _explicit(cfg: ExperimentConfig) -> EmbeddedSet:
    method = get_method(cfg.method)
    if isinstance(method, ArkPair):
        raise ManifestError(f"{cfg.id}: {cfg.method} is an additive pair; ODE studies need an explicit set")
    return method


def _trajectory(cfg: ExperimentConfig, dt: float, relaxed: bool):
    """``(problem, times, states)`` of a baseline or relaxed run."""
    problem = get_problem(cfg.problem)
    emb = _explicit(cfg)
    if relaxed:
        traj = relaxed_integrate(problem, emb, dt, cfg.tf, cfg.invariants, cfg.solver)
    else:
        traj = fixed_grid_integrate(problem, emb, dt, cfg.tf)
    return problem, traj.times, traj.states


# -- ODE studies ----------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    dts: np.ndarray
    errors: np.ndarray
    final_times: np.ndarray

    @property
    def orders(self) -> np.ndarray:
        """log2-type ratios of successive errors (NaN in the first row)."""
        out = np.full(self.dts.size, np.nan)
        for i in range(1, self.dts.size):
            out[i] = math.log(self.errors[i - 1] / self.errors[i]) / math.log(self.dts[i - 1] / self.dts[i])
        return out

    @property
    def fitted_order(self) -> float:
        """Least-squares slope over errors above :data:`ERROR_FLOOR`."""
        keep = self.errors > ERROR_FLOOR
        return fitted_slope(self.dts[keep], self.errors[keep]) if keep.sum() >= 2 else float("nan")

    def table(self) -> Table:
        if self.dts.size == 1:
            return Table(["dt", "error", "t_final"],
                         [[self.dts[0], self.errors[0], self.final_times[0]]])
        rows = [[h, e, t, o] for h, e, t, o in zip(self.dts, self.errors, self.final_times, self.orders)]
        return Table(["dt", "error", "t_final", "order"], rows)


def run_convergence(cfg: ExperimentConfig) -> ConvergenceTable:
    """Max-norm error at the final time for each step size.

    Relaxed runs end at their own final time, where the error is measured.
    Integrator failures are re-raised with the step size attached.
    """
    relaxed = cfg.relax == "on"
    errors, finals = [], []
    for dt in cfg.dt:
        try:
            problem, times, states = _trajectory(cfg, dt, relaxed)
        except Exception as exc:
            raise type(exc)(f"dt={dt:g}: {exc}") from exc
        truth = _truth(problem, times[-1])
        errors.append(float(np.max(np.abs(states[-1] - truth(times[-1])[0]))))
        finals.append(float(times[-1]))
    return ConvergenceTable(np.array(cfg.dt, dtype=float), np.array(errors), np.array(finals))


@dataclass
class ErrorGrowth:
    times: np.ndarray
    errors: np.ndarray
    states: np.ndarray
    window: tuple[float, float]

    @property
    def slope(self) -> float:
        """Log-log slope of the running-max error over ``window`` (elapsed time)."""
        if self.times.size < 2:
            return float("nan")
        elapsed = self.times - self.times[0]
        env = np.maximum.accumulate(self.errors)
        keep = (elapsed >= self.window[0]) & (elapsed <= self.window[1]) & (elapsed > 0) & (env > 0)
        return fitted_slope(elapsed[keep], env[keep]) if keep.sum() >= 2 else float("nan")

    def table(self) -> Table:
        return Table(["t", "error"], [[t, e] for t, e in zip(self.times, self.errors)])

    def state_table(self) -> Table:
        m = self.states.shape[1] if self.states.ndim == 2 else 0
        return Table(["t", *[f"u{i + 1}" for i in range(m)]],
                     [[t, *u] for t, u in zip(self.times, self.states)])


def run_error_growth(cfg: ExperimentConfig) -> ErrorGrowth:
    """Error against the exact or reference solution at every step.

    The slope window defaults to the final decade ``[tf/10, tf]`` of elapsed
    time. The envelope (running maximum) is fitted, which removes the zeros
    of oscillating errors without changing the growth rate.
    """
    problem = get_problem(cfg.problem)
    horizon = cfg.tf - problem.initial_time
    window = cfg.window or (horizon / 10, horizon)
    if horizon <= 0:
        return ErrorGrowth(np.zeros(0), np.zeros(0), np.zeros((0, problem.dimension)), window)
    problem, times, states = _trajectory(cfg, cfg.dt[0], cfg.relax == "on")
    truth = _truth(problem, times[-1])
    errors = np.max(np.abs(states - truth(times)), axis=1)
    return ErrorGrowth(times, errors, states, window)


@dataclass
class InvariantDrift:
    times: np.ndarray
    deviations: np.ndarray
    names: tuple[str, ...]

    def table(self) -> Table:
        return Table(["t", *[f"{n}_dev" for n in self.names]],
                     [[t, *d] for t, d in zip(self.times, self.deviations)])


def run_invariant_drift(cfg: ExperimentConfig) -> InvariantDrift:
    """``G(u_n) - G(u_0)`` for every invariant of the problem at every step."""
    problem, times, states = _trajectory(cfg, cfg.dt[0], cfg.relax == "on")
    G0 = problem.invariants(states[0])
    dev = np.array([problem.invariants(u) - G0 for u in states])
    names = problem.invariant_names or tuple(f"G{i + 1}" for i in range(G0.size))
    return InvariantDrift(times, dev, names)


def run_gamma_scaling(cfg: ExperimentConfig) -> GammaScaling:
    """One relaxed step of every size in ``cfg.dt`` from a common state.

    The state is the initial state, or the exact solution at ``cfg.t0`` when
    that is given.
    """
    problem = get_problem(cfg.problem)
    if cfg.invariants is not None:
        problem = problem.select(cfg.invariants)
    u0 = None
    if cfg.t0 is not None:
        if problem.exact is None:
            raise ManifestError(f"{cfg.id}: t0 needs a problem with an exact solution")
        u0 = problem.exact(cfg.t0)
    return gamma_scaling_probe(problem, _explicit(cfg), cfg.dt, cfg.solver, cfg.t0, u0)


# -- audits and oracles ---------------------------------------------------------------

def run_tableau_audit(cfg: ExperimentConfig) -> tuple[dict[str, float], Table]:
    """Verified orders against the stated ones, weight rank and ``c - A e``.

    For additive pairs both halves are audited and the worst value is kept.
    """
    method = get_method(cfg.method)
    halves = [method.explicit, method.implicit] if isinstance(method, ArkPair) else [method]
    stated = cfg.orders or halves[0].orders
    rows, match, deficit, defect = [], True, 0, 0.0
    for half in halves:
        if len(stated) != half.count:
            raise ManifestError(f"{cfg.id}: {len(stated)} stated orders for {half.count} weight vectors")
        report = check_embedded_set(half)
        for k, got in enumerate(report.verified_orders):
            rows.append([k + 1, stated[k], got])
            match &= got >= stated[k]
        deficit = max(deficit, half.count - report.rank)
        defect = max(defect, report.abscissa_residual)
    metrics = {"orders_match": float(match), "rank_deficit": float(deficit), "abscissa_defect": defect}
    return metrics, Table(["vector", "stated_order", "verified_order"], rows)


def _smooth_field(grid: SpectralGrid, rng: np.random.Generator, modes: int = 8) -> np.ndarray:
    k = 2 * np.pi * np.arange(1, modes + 1) / grid.length
    a, b = rng.normal(size=(2, modes)) / np.arange(1, modes + 1)
    return rng.normal() + np.cos(np.outer(grid.x, k)) @ a + np.sin(np.outer(grid.x, k)) @ b


def run_kdv_structure(cfg: ExperimentConfig) -> dict[str, float]:
    """Skew-symmetry of ``D1``/``D3`` and the mass/energy rates on random smooth fields.

    Values are the worst over ``cfg.samples`` fields (default 100) of
    ``|<v, D w> + <D v, w>|`` and of ``|<e, f(U)>|``, ``|<U, f(U)>|`` with the
    ``dx``-weighted inner product.
    """
    n = cfg.solitons or 1
    setup = SOLITON_SETUPS[n]
    grid = SpectralGrid(cfg.N or setup["N"], *(cfg.domain or setup["domain"]))
    semi = KdvSemiDiscretization(grid, (0, 1))
    rng = np.random.default_rng(cfg.seed)
    dx = grid.dx
    worst = dict(skew_D1=0.0, skew_D3=0.0, mass_rate=0.0, energy_rate=0.0)
    for _ in range(cfg.samples or 100):
        v, w, U = (_smooth_field(grid, rng) for _ in range(3))
        for order in (1, 3):
            s = dx * (v @ spectral_derivative(w, grid, order) + spectral_derivative(v, grid, order) @ w)
            worst[f"skew_D{order}"] = max(worst[f"skew_D{order}"], abs(s))
        rates = kdv_invariant_gradients(U, grid)[:2] @ semi.rhs(0.0, U)
        worst["mass_rate"] = max(worst["mass_rate"], abs(rates[0]))
        worst["energy_rate"] = max(worst["energy_rate"], abs(rates[1]))
    return worst


def run_eta2_probe(cfg: ExperimentConfig) -> dict[str, float]:
    setup = SOLITON_SETUPS[cfg.solitons]
    grid = SpectralGrid(cfg.N or setup["N"], *(cfg.domain or setup["domain"]))
    return {"max_rate": eta2_drift_probe(cfg.solitons, grid, samples=cfg.samples or 401)}


_ORACLE_METHODS = ("SSPRK(2,2)", "SSPRK(3,3)", "Heun(3,3)", "RK(4,4)", "Fehlberg(6,4)",
                   "Fehlberg(6,5)", "DP(7,5)")


def run_oracle(cfg: ExperimentConfig) -> dict[str, float]:
    """Closed-form and finite-difference checks of the relaxation solver.

    *Quadratic root.* With ``G(u) = |u|^2`` on the rigid body, one relaxed
    direction and target ``G(u_n)``, the residual is the quadratic
    ``a g^2 + b g + c`` with ``a = |v|^2``, ``b = 2 u_base . v``,
    ``c = (u_base - u_n) . (u_base + u_n)`` and ``v = dt d_1``. Its root
    nearest zero is computed in the cancellation-free form and compared with
    the solver. The solver evaluates ``G(u_gamma) - G_target`` directly and so
    cannot resolve the root better than ``eps |G| / |b|``; the error in those
    units is reported as ``quadratic_root_error_scaled``.

    *Jacobian.* Central differences (``h = 1e-5``) of the residual at random
    small ``gamma`` on every ODE problem, with all its invariants. Errors are
    relative to ``|grad G| |dt d|``, the size of the factors of each entry.
    """
    rng = np.random.default_rng(cfg.seed)
    samples = cfg.samples or 1000
    problem = get_problem(cfg.problem or "rigid_body").select([0])
    eps = np.finfo(float).eps
    err = scaled = 0.0
    for _ in range(samples):
        emb = get_method(_ORACLE_METHODS[rng.integers(len(_ORACLE_METHODS))]).subset(1)
        u = rng.normal(size=3)
        dt = rng.uniform(0.01, 0.5)
        rec = explicit_step(problem, emb, 0.0, u, dt)
        target = problem.invariants(u)
        gamma = solve_relaxation(problem, rec, target, cfg.solver).gamma[0]
        base, v = rec.baseline_update, dt * rec.directions[0]
        a, b, c = v @ v, 2 * base @ v, (base - u) @ (base + u)
        q = -0.5 * (b + math.copysign(math.sqrt(b * b - 4 * a * c), b))
        exact = min((q / a, c / q), key=abs)
        err = max(err, abs(gamma - exact))
        scaled = max(scaled, abs(gamma - exact) * abs(b) / (eps * (1.0 + abs(target[0]))))

    jac = 0.0
    h = 1e-5
    for name in ("rigid_body", "lotka_volterra", "kepler", "perturbed_kepler"):
        prob = get_problem(name)
        ell = prob.invariant_count
        for _ in range(max(1, samples // 40)):
            candidates = [m for m in _ORACLE_METHODS if get_method(m).count >= ell]
            emb = get_method(candidates[rng.integers(len(candidates))]).subset(ell)
            t = rng.uniform(0.0, 5.0)
            u = fixed_grid_integrate(prob, emb, 0.05, t).states[-1] if t > 0 else prob.initial_state
            rec = explicit_step(prob, emb, t, u, rng.uniform(0.01, 0.2))
            res = RelaxationResidual(prob, rec, prob.invariants(u))
            g = 0.01 * rng.normal(size=ell)
            J = res.jacobian(g)
            for j in range(ell):
                e = np.zeros(ell)
                e[j] = h
                fd = (res(g + e) - res(g - e)) / (2 * h)
                scale = np.linalg.norm(prob.invariant_jacobian(res.state(g)), axis=1) * np.linalg.norm(res.dtD[:, j])
                jac = max(jac, float(np.max(np.abs(J[:, j] - fd) / scale)))
    return {"quadratic_root_error": err, "quadratic_root_error_scaled": scaled, "jacobian_fd_error": jac}


# -- dispatch -------------------------------------------------------------------------

def _ode_variant(cfg: ExperimentConfig) -> dict[str, tuple[str, Table] | dict]:
    """Run one ODE study in the requested relax mode(s)."""
    modes = {"off": ["baseline"], "on": ["mrrk"], "both": ["baseline", "mrrk"]}[cfg.relax]
    metrics, tables = {}, {}
    for mode in modes:
        sub = replace(cfg, relax="on" if mode == "mrrk" else "off")
        if cfg.kind == "convergence":
            conv = run_convergence(sub)
            metrics[f"{mode}_order"] = conv.fitted_order
            metrics[f"{mode}_final_error"] = float(conv.errors[-1])
            tables[mode] = conv.table()
        elif cfg.kind == "error-growth":
            growth = run_error_growth(sub)
            metrics[f"{mode}_slope"] = growth.slope
            metrics[f"{mode}_max_error"] = float(growth.errors.max()) if growth.errors.size else float("nan")
            tables[mode] = growth.table()
            if cfg.states:
                tables[f"{mode}_states"] = growth.state_table()
        else:
            drift = run_invariant_drift(sub)
            worst = np.max(np.abs(drift.deviations), axis=0)
            metrics[f"{mode}_max_drift"] = float(worst.max())
            for name, w in zip(drift.names, worst):
                metrics[f"{mode}_drift_{name}"] = float(w)
            tables[mode] = drift.table()
    return {"metrics": metrics, "tables": tables}


def _kdv(cfg: ExperimentConfig) -> dict:
    kc = KdvConfig(cfg.solitons, cfg.method, cfg.dt[0], cfg.relax, cfg.N, cfg.domain, cfg.t0,
                   cfg.tf, cfg.solver)
    result = kdv_experiment(kc)
    worst = result.max_deviation()
    metrics = {"mass_drift": float(worst[0]), "energy_drift": float(worst[1]),
               "whitham_drift": float(worst[2]), "final_error": float(result.errors[-1]),
               "error_slope": kdv_error_slope(result, cfg.window),
               "max_residual": float(np.max(result.residuals))}
    return {"metrics": metrics,
            "tables": {"": Table(result.header(), [list(r) for r in result.rows()])}}


def execute(cfg: ExperimentConfig) -> ExperimentResult:
    """Run one experiment. Failures are captured in ``error`` rather than raised."""
    try:
        cfg.validate()
        if cfg.kind in ("convergence", "invariants", "error-growth"):
            out = _ode_variant(cfg)
        elif cfg.kind == "gamma-scaling":
            gs = run_gamma_scaling(cfg)
            rows = [[h, g, G, r, c] for h, g, G, r, c in
                    zip(gs.dts, gs.max_gamma, gs.Gamma, gs.residual, gs.converged)]
            out = {"metrics": {"slope": gs.slope("max_gamma"), "Gamma_slope": gs.slope("Gamma"),
                               "all_converged": float(np.all(gs.converged))},
                   "tables": {"": Table(["dt", "max_gamma", "Gamma", "residual", "converged"], rows)}}
        elif cfg.kind == "kdv":
            out = _kdv(cfg)
        elif cfg.kind == "tableau-audit":
            metrics, table = run_tableau_audit(cfg)
            out = {"metrics": metrics, "tables": {"": table}}
        elif cfg.kind == "kdv-structure":
            out = {"metrics": run_kdv_structure(cfg), "tables": {}}
        elif cfg.kind == "eta2-probe":
            out = {"metrics": run_eta2_probe(cfg), "tables": {}}
        else:
            out = {"metrics": run_oracle(cfg), "tables": {}}
    except Exception as exc:  # reported as a failed entry
        log.warning("experiment %s failed: %s", cfg.id, exc)
        return ExperimentResult(cfg.id, error=f"{type(exc).__name__}: {exc}")
    return ExperimentResult(cfg.id, out["metrics"], out["tables"])


def write_tables(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for suffix, table in sorted(result.tables.items()):
        path = out_dir / (f"{result.id}_{suffix}.csv" if suffix else f"{result.id}.csv")
        table.write(path)
        paths.append(path)
    return paths


def summarize(configs: list[ExperimentConfig], results: list[ExperimentResult]) -> list[SummaryRow]:
    """Expectation rows per experiment followed by one row per criterion."""
    rows = []
    for cfg, res in zip(configs, results):
        if res.error is not None:
            rows.append(SummaryRow(cfg.id, "error", float("nan"), res.error, False,
                                   min((e.criterion for e in cfg.expect if e.criterion is not None), default=None)))
        for e in cfg.expect:
            value = res.metrics.get(e.metric, float("nan"))
            rows.append(SummaryRow(cfg.id, e.metric, value, e.band, res.error is None and e.check(value),
                                   e.criterion))
    verdicts: dict[int, list[bool]] = {}
    for r in rows:
        if r.criterion is not None:
            verdicts.setdefault(r.criterion, []).append(r.passed)
    for crit in sorted(verdicts):
        ok = verdicts[crit]
        rows.append(SummaryRow(f"criterion-{crit}", "checks_passed", float(sum(ok)),
                               f"[{len(ok)}, {len(ok)}]", all(ok), crit))
    return rows


def load_manifest(text: str) -> tuple[list[ExperimentConfig], list[ExperimentResult]]:
    """Parse every block; blocks that fail to parse come back as failed results."""
    configs, failed = [], []
    for i, block in enumerate(parse_manifest(text)):
        try:
            configs.append(config_from_block(block))
        except ManifestError as exc:
            ident = block.get("id", [f"entry-{i + 1}"])[0]
            expect = []
            for v in block.get("expect", []):
                try:
                    expect.append(_expectation(v))
                except ValueError:
                    pass
            configs.append(ExperimentConfig(ident, block.get("kind", ["?"])[0], expect=tuple(expect)))
            failed.append(ExperimentResult(ident, error=f"ManifestError: {exc}"))
    return configs, failed


def run_all(manifest: str, out_dir: str | Path | None = None, workers: int = 1,
            criteria_only: bool = False) -> Summary:
    """Run every entry of a manifest and build the summary.

    ``criteria_only`` skips entries without acceptance expectations.
    Entries run concurrently across ``workers`` processes; results are
    collected in manifest order so the output does not depend on scheduling.
    """
    configs, failed = load_manifest(manifest)
    failed_ids = {r.id for r in failed}
    if criteria_only:
        configs = [c for c in configs if any(e.criterion is not None for e in c.expect)]
    todo = [c for c in configs if c.id not in failed_ids]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = dict(zip((c.id for c in todo), pool.map(execute, todo)))
    else:
        done = {c.id: execute(c) for c in todo}
    done.update({r.id: r for r in failed})
    results = [done[c.id] for c in configs]
    summary = Summary(summarize(configs, results), results)
    if out_dir is not None:
        for res in results:
            write_tables(res, out_dir)
        summary.write(Path(out_dir) / "summary.csv")
    return summary


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
