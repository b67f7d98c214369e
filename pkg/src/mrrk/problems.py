"""Conservative test systems and KdV soliton closed forms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class DomainError(ValueError):
    """State outside the region where a right-hand side or invariant is defined."""


@dataclass(frozen=True)
class OdeProblem:
    """Autonomous-or-not ODE ``u' = f(t, u)`` with a vector of invariants.

    ``invariant_jacobian(u)`` returns the ``(l, m)`` matrix whose rows are the
    gradients of the invariants.
    """

    name: str
    rhs: Callable[[float, np.ndarray], np.ndarray]
    invariants: Callable[[np.ndarray], np.ndarray]
    invariant_jacobian: Callable[[np.ndarray], np.ndarray]
    initial_state: np.ndarray
    initial_time: float = 0.0
    exact: Optional[Callable[[float], np.ndarray]] = None
    invariant_names: tuple[str, ...] = ()

    @property
    def dimension(self) -> int:
        return len(self.initial_state)

    @property
    def invariant_count(self) -> int:
        return len(self.invariants(self.initial_state))

    def select(self, indices) -> "OdeProblem":
        """Same system with only the invariants at ``indices``."""
        idx = list(indices)
        G, J = self.invariants, self.invariant_jacobian
        names = tuple(self.invariant_names[i] for i in idx) if self.invariant_names else ()
        return OdeProblem(self.name, self.rhs, lambda u: G(u)[idx], lambda u: J(u)[idx],
                          self.initial_state, self.initial_time, self.exact, names)


# -- Jacobi elliptic functions --------------------------------------------------

def jacobi_sn_cn_dn(u: float, m: float, tol: float = 1e-16) -> tuple[float, float, float]:
    """``sn, cn, dn`` with parameter ``m = k**2`` by the descending AGM/Landen scheme."""
    if not 0.0 <= m < 1.0:
        raise ValueError("parameter m must lie in [0, 1)")
    if m == 0.0:
        return math.sin(u), math.cos(u), 1.0
    a, b, c = 1.0, math.sqrt(1.0 - m), math.sqrt(m)
    cs = [c]
    an = [a]
    while abs(c) > tol and len(an) < 30:
        a, b, c = 0.5 * (a + b), math.sqrt(a * b), 0.5 * (a - b)
        an.append(a)
        cs.append(c)
    n = len(an) - 1
    phi = (2 ** n) * an[-1] * u
    for j in range(n, 0, -1):
        phi = 0.5 * (phi + math.asin(cs[j] / an[j] * math.sin(phi)))
    sn, cn = math.sin(phi), math.cos(phi)
    return sn, cn, math.sqrt(1.0 - m * sn * sn)


# -- Euler rigid body -----------------------------------------------------------

def rigid_body() -> OdeProblem:
    """Free rigid body with the two quadratic invariants (norm and kinetic energy)."""
    s = math.sqrt(1.51)
    alpha = 1.0 + 1.0 / s
    beta = 1.0 - 0.51 / s
    weights = np.array([1.0, beta, alpha])

    def rhs(t, u):
        return np.array([(alpha - beta) * u[1] * u[2],
                         (1.0 - alpha) * u[2] * u[0],
                         (beta - 1.0) * u[0] * u[1]])

    def invariants(u):
        sq = u * u
        return np.array([sq.sum(), weights @ sq])

    def jacobian(u):
        return np.vstack([2.0 * u, 2.0 * weights * u])

    def exact(t):
        sn, cn, dn = jacobi_sn_cn_dn(t, 0.51)
        return np.array([s * sn, cn, dn])

    return OdeProblem("rigid_body", rhs, invariants, jacobian, np.array([0.0, 1.0, 1.0]),
                      0.0, exact, ("G1", "G2"))


# -- bi-Hamiltonian Lotka-Volterra ----------------------------------------------

def lotka_volterra_3d(a=-1.0, b=-1.0, c=-1.0, lam=0.0, mu=1.0, nu=-1.0) -> OdeProblem:
    """Three-species Lotka-Volterra system with two logarithmic Casimirs."""

    def rhs(t, u):
        return np.array([u[0] * (c * u[1] + u[2] + lam),
                         u[1] * (u[0] + a * u[2] + mu),
                         u[2] * (b * u[0] + u[1] + nu)])

    def _check(u):
        if np.any(u <= 0.0):
            raise DomainError(f"Lotka-Volterra invariants need positive state, got {u}")

    def invariants(u):
        _check(u)
        lu = np.log(u)
        return np.array([a * b * lu[0] - b * lu[1] + lu[2],
                         a * b * u[0] + u[1] - a * u[2] + nu * lu[1] - mu * lu[2]])

    def jacobian(u):
        _check(u)
        return np.array([[a * b / u[0], -b / u[1], 1.0 / u[2]],
                         [a * b, 1.0 + nu / u[1], -a - mu / u[2]]])

    return OdeProblem("lotka_volterra", rhs, invariants, jacobian, np.array([1.0, 1.9, 0.5]),
                      0.0, None, ("H1", "H2"))


# -- Kepler -----------------------------------------------------------------------

def _radius(u) -> float:
    r2 = u[0] * u[0] + u[1] * u[1]
    if r2 == 0.0:
        raise DomainError("Kepler problem is singular at q = 0")
    return math.sqrt(r2)


def kepler_initial_state(e: float) -> np.ndarray:
    if not 0.0 < e < 1.0:
        raise ValueError("eccentricity must lie in (0, 1)")
    return np.array([1.0 - e, 0.0, 0.0, math.sqrt((1.0 + e) / (1.0 - e))])


def runge_lenz(u) -> np.ndarray:
    """Laplace-Runge-Lenz vector ``p x (0,0,L) - q/|q|`` (third component is zero)."""
    q1, q2, p1, p2 = u
    r = _radius(u)
    L = q1 * p2 - q2 * p1
    return np.array([p2 * L - q1 / r, -p1 * L - q2 / r, 0.0])


def _kepler_exact(e: float):
    """Closed-form orbit through Kepler's equation (period ``2 pi``)."""
    a = 1.0
    n = 1.0

    def exact(t):
        M = n * t
        E = M
        for _ in range(50):
            dE = (E - e * math.sin(E) - M) / (1.0 - e * math.cos(E))
            E -= dE
            if abs(dE) < 1e-16:
                break
        cE, sE = math.cos(E), math.sin(E)
        b = math.sqrt(1.0 - e * e)
        # pericentre at +x at t = 0 with counter-clockwise motion
        q1, q2 = a * (cE - e), a * b * sE
        Edot = n / (1.0 - e * cE)
        return np.array([q1, q2, -a * sE * Edot, a * b * cE * Edot])

    return exact


def kepler_two_body(e: float = 0.5) -> OdeProblem:
    """Planar Kepler problem with energy, angular momentum and |LRL|."""

    def rhs(t, u):
        r = _radius(u)
        r3 = r ** 3
        return np.array([u[2], u[3], -u[0] / r3, -u[1] / r3])

    def invariants(u):
        q1, q2, p1, p2 = u
        r = _radius(u)
        V = runge_lenz(u)
        return np.array([0.5 * (p1 * p1 + p2 * p2) - 1.0 / r,
                         q1 * p2 - q2 * p1,
                         math.hypot(V[0], V[1])])

    def jacobian(u):
        q1, q2, p1, p2 = u
        r = _radius(u)
        r3 = r ** 3
        L = q1 * p2 - q2 * p1
        dH = [q1 / r3, q2 / r3, p1, p2]
        dL = [p2, -p1, -q2, q1]
        V1, V2, _ = runge_lenz(u)
        A = math.hypot(V1, V2)
        if A == 0.0:
            raise DomainError("Runge-Lenz vector vanishes (circular orbit)")
        # d(q_i/r)/dq_j = delta_ij/r - q_i q_j / r^3
        dV1 = np.array([p2 * p2 - 1.0 / r + q1 * q1 / r3, -p2 * p1 + q1 * q2 / r3,
                        -p2 * q2, L + p2 * q1])
        dV2 = np.array([-p1 * p2 + q2 * q1 / r3, p1 * p1 - 1.0 / r + q2 * q2 / r3,
                        -L + p1 * q2, -p1 * q1])
        dA = (V1 * dV1 + V2 * dV2) / A
        return np.vstack([dH, dL, dA])

    return OdeProblem("kepler", rhs, invariants, jacobian, kepler_initial_state(e), 0.0,
                      _kepler_exact(e), ("H", "L", "A"))


def perturbed_kepler(mu: float = 0.005, e: float = 0.6) -> OdeProblem:
    """Kepler problem with an ``r**-5`` force correction; energy and angular momentum.

    The conserved energy paired with the force ``-q/r**3 - mu q/r**5`` is
    ``|p|**2/2 - 1/r - mu/(3 r**3)``.
    """

    def rhs(t, u):
        r = _radius(u)
        k = 1.0 / r ** 3 + mu / r ** 5
        return np.array([u[2], u[3], -k * u[0], -k * u[1]])

    def invariants(u):
        q1, q2, p1, p2 = u
        r = _radius(u)
        return np.array([0.5 * (p1 * p1 + p2 * p2) - 1.0 / r - mu / (3.0 * r ** 3),
                         q1 * p2 - q2 * p1])

    def jacobian(u):
        q1, q2, p1, p2 = u
        r = _radius(u)
        k = 1.0 / r ** 3 + mu / r ** 5
        return np.array([[k * q1, k * q2, p1, p2],
                         [p2, -p1, -q2, q1]])

    return OdeProblem("perturbed_kepler", rhs, invariants, jacobian, kepler_initial_state(e),
                      0.0, None, ("H", "L"))


PROBLEMS: dict[str, Callable[[], OdeProblem]] = {
    "rigid_body": rigid_body,
    "lotka_volterra": lotka_volterra_3d,
    "kepler": kepler_two_body,
    "perturbed_kepler": perturbed_kepler,
}


def get_problem(name: str) -> OdeProblem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


# -- KdV solitons -----------------------------------------------------------------

SOLITON_PARAMETERS = {1: (1.0,), 2: (0.5, 1.0), 3: (0.4, 0.7, 1.0)}


def _phase(beta, x, t):
    return math.sqrt(beta / 2.0) * (x - 2.0 * beta * t)


def _pair_terms(b1, b2, x1, x2):
    """Potential ``W`` and its x-derivative for the tanh/coth superposition of two waves.

    Written with ``sinh(x2)`` cleared from numerator and denominator so the
    coth/csch poles at ``x2 = 0`` cancel analytically.
    """
    s1, s2 = math.sqrt(2.0 * b1), math.sqrt(2.0 * b2)
    sh2, ch2 = np.sinh(x2), np.cosh(x2)
    den = s1 * np.tanh(x1) * sh2 - s2 * ch2
    W = 2.0 * (b1 - b2) * sh2 / den
    dW = -2.0 * (b1 - b2) * (b1 * sh2 ** 2 / np.cosh(x1) ** 2 + b2) / den ** 2
    return W, dW


@dataclass(frozen=True)
class SolitonSolution:
    """Closed-form n-soliton of ``u_t + 6 u u_x + u_xxx = 0``."""

    count: int
    betas: tuple[float, ...]

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        xi = [_phase(b, x, t) for b in self.betas]
        if self.count == 1:
            return self.betas[0] / np.cosh(xi[0]) ** 2
        if self.count == 2:
            return _pair_terms(self.betas[0], self.betas[1], xi[0], xi[1])[1]
        b1, b2, b3 = self.betas
        x1, x2, x3 = xi
        W12, dW12 = _pair_terms(b1, b2, x1, x2)
        w1, w3 = math.sqrt(2.0 * b1) * np.tanh(x1), math.sqrt(2.0 * b3) * np.tanh(x3)
        d1, d3 = b1 / np.cosh(x1) ** 2, b3 / np.cosh(x3) ** 2
        # W13 = 2(b3 - b1)/P has a pole where P = 0; clear it from the quotient
        P = w3 - w1
        k = 2.0 * (b3 - b1)
        return d1 - 2.0 * (b2 - b3) * (dW12 * P ** 2 + k * (d3 - d1)) / (W12 * P - k) ** 2

    @property
    def mass(self) -> float:
        """Integral over the real line: each wave carries ``2 sqrt(2 beta)``."""
        return sum(2.0 * math.sqrt(2.0 * b) for b in self.betas)


def soliton(n: int) -> SolitonSolution:
    if n not in SOLITON_PARAMETERS:
        raise ValueError("soliton count must be 1, 2 or 3")
    return SolitonSolution(n, SOLITON_PARAMETERS[n])
