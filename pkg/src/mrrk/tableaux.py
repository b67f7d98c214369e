"""Butcher tableaux, embedded weight families and additive (IMEX) pairs.

Coefficients live in plain-text files under ``mrrk/data`` and are parsed
with exact rational arithmetic before being rounded once to float64.
Order checks use the classical rooted-tree conditions up to order 5.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

MAX_CHECKED_ORDER = 5
ORDER_TOL = 1e-12


def parse_coefficient(token: str) -> Fraction:
    """Parse ``"p/q"`` or a decimal string exactly."""
    token = token.strip()
    if "/" in token:
        num, den = token.split("/")
        return Fraction(int(num), int(den))
    return Fraction(Decimal(token))


def _to_array(rows) -> np.ndarray:
    return np.array([[float(x) for x in row] for row in rows], dtype=float)


@dataclass(frozen=True)
class ButcherTableau:
    """A single Runge-Kutta method ``(A, b, c)``."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    stated_order: int
    name: str = ""

    def __post_init__(self):
        for attr in ("A", "b", "c"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        s = self.b.shape[0]
        if self.A.shape != (s, s) or self.c.shape != (s,):
            raise ValueError(f"{self.name}: inconsistent tableau shapes")

    @property
    def stage_count(self) -> int:
        return self.b.shape[0]

    @property
    def is_explicit(self) -> bool:
        return not np.any(np.triu(self.A))


@dataclass(frozen=True)
class EmbeddedSet:
    """Methods sharing ``A`` and ``c`` with weight vectors ``b^1 .. b^l``.

    By convention ``weights[0]`` advances the solution; the remaining rows
    only supply extra update directions.
    """

    A: np.ndarray
    c: np.ndarray
    weights: np.ndarray
    orders: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        c = np.array(self.c, dtype=float)
        W = np.atleast_2d(np.array(self.weights, dtype=float))
        for arr in (A, c, W):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "orders", tuple(int(p) for p in self.orders))
        if W.shape[0] != len(self.orders):
            raise ValueError(f"{self.name}: {W.shape[0]} weight rows but {len(self.orders)} orders")
        if W.shape[1] != A.shape[0] or A.shape[0] != A.shape[1] or c.shape[0] != A.shape[0]:
            raise ValueError(f"{self.name}: inconsistent shapes")

    @property
    def stage_count(self) -> int:
        return self.A.shape[0]

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def p_min(self) -> int:
        return min(self.orders)

    def method(self, k: int = 0) -> ButcherTableau:
        return ButcherTableau(self.A, self.weights[k], self.c, self.orders[k], f"{self.name}[b{k + 1}]")

    def subset(self, count: int) -> "EmbeddedSet":
        """The first ``count`` weight vectors as a smaller set."""
        if not 1 <= count <= self.count:
            raise ValueError(f"{self.name} has {self.count} weight vectors, asked for {count}")
        return EmbeddedSet(self.A, self.c, self.weights[:count], self.orders[:count], self.name)


@dataclass(frozen=True)
class ArkPair:
    """Additive RK pair: explicit and ESDIRK parts sharing ``c`` and weights."""

    explicit: EmbeddedSet
    implicit: EmbeddedSet
    name: str = ""

    def __post_init__(self):
        if not np.array_equal(self.explicit.c, self.implicit.c):
            raise ValueError(f"{self.name}: explicit and implicit abscissae differ")
        if not np.array_equal(self.explicit.weights, self.implicit.weights):
            raise ValueError(f"{self.name}: explicit and implicit weights differ")

    @property
    def c(self) -> np.ndarray:
        return self.explicit.c

    @property
    def weights(self) -> np.ndarray:
        return self.explicit.weights

    @property
    def orders(self) -> tuple[int, ...]:
        return self.explicit.orders

    @property
    def stage_count(self) -> int:
        return self.explicit.stage_count

    @property
    def count(self) -> int:
        return self.explicit.count

    @property
    def p_min(self) -> int:
        return self.explicit.p_min

    @property
    def gamma(self) -> float:
        """Common diagonal entry of the implicit part."""
        return float(self.implicit.A[1, 1])


# -- rooted trees -------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def rooted_trees(order: int) -> tuple[tuple, ...]:
    """All rooted trees with ``order`` nodes, as sorted tuples of subtrees."""
    if order == 1:
        return ((),)

    def forests(nodes, bound):
        # multisets of subtrees with `nodes` nodes, keys non-increasing to skip permutations
        if nodes == 0:
            yield ()
            return
        for k in range(nodes, 0, -1):
            for tree in rooted_trees(k):
                key = (k, tree)
                if bound is not None and key > bound:
                    continue
                for rest in forests(nodes - k, key):
                    yield (tree,) + rest

    found = {tuple(sorted(f)) for f in forests(order - 1, None)}
    return tuple(sorted(found))


def tree_order(tree: tuple) -> int:
    return 1 + sum(tree_order(t) for t in tree)


def tree_density(tree: tuple) -> int:
    value = tree_order(tree)
    for t in tree:
        value *= tree_density(t)
    return value


def elementary_weights(A: np.ndarray, tree: tuple) -> np.ndarray:
    """Stage vector ``Phi`` such that the condition for ``tree`` reads ``b . Phi = 1/gamma``."""
    phi = np.ones(A.shape[0])
    for sub in tree:
        phi = phi * (A @ elementary_weights(A, sub))
    return phi


def order_residuals(tableau: ButcherTableau, order: int) -> np.ndarray:
    """Residuals ``b . Phi(t) - 1/gamma(t)`` for every tree with exactly ``order`` nodes."""
    return np.array([
        tableau.b @ elementary_weights(tableau.A, t) - 1.0 / tree_density(t)
        for t in rooted_trees(order)
    ])


def verify_order(tableau: ButcherTableau, up_to: int = MAX_CHECKED_ORDER, tol: float = ORDER_TOL) -> int:
    """Largest ``q <= up_to`` such that every order condition through ``q`` holds."""
    if up_to > MAX_CHECKED_ORDER:
        raise ValueError(f"order conditions are only tabulated up to {MAX_CHECKED_ORDER}")
    achieved = 0
    for q in range(1, up_to + 1):
        if np.max(np.abs(order_residuals(tableau, q))) > tol:
            break
        achieved = q
    return achieved


@dataclass
class ValidationReport:
    name: str
    abscissa_residual: float
    rank: int
    count: int
    verified_orders: tuple[int, ...]
    stated_orders: tuple[int, ...]
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def weight_rank(weights: np.ndarray, tol: float = 1e-10) -> int:
    rows = np.atleast_2d(weights)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    sv = np.linalg.svd(rows, compute_uv=False)
    return int(np.sum(sv > tol))


def check_embedded_set(emb: EmbeddedSet) -> ValidationReport:
    """Audit abscissae, weight independence and the order of every weight row."""
    res = float(np.max(np.abs(emb.c - emb.A.sum(axis=1))))
    rank = weight_rank(emb.weights)
    verified = tuple(verify_order(emb.method(k)) for k in range(emb.count))
    report = ValidationReport(emb.name, res, rank, emb.count, verified, emb.orders)
    if res > 1e-14:
        report.failures.append(f"c - A e residual {res:.3e}")
    if rank < emb.count:
        report.failures.append(f"weight rank {rank} < {emb.count}")
    for k, (got, want) in enumerate(zip(verified, emb.orders)):
        if got < want:
            report.failures.append(f"b{k + 1}: verified order {got} < stated {want}")
    return report


# -- coefficient files --------------------------------------------------------

def read_coefficient_file(text: str) -> dict:
    """Parse a coefficient file into exact rationals.

    Layout: ``name``, ``orders`` and optional ``kind`` header lines, then an
    ``A`` block (one row per line, upper entries may be omitted), a
    ``weights`` block and a ``c`` line block. ``#`` starts a comment.
    """
    header: dict = {}
    blocks: dict[str, list[list[Fraction]]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key in ("name", "kind"):
            header[key] = rest.strip()
        elif key == "orders":
            header["orders"] = tuple(int(p) for p in rest.split())
        elif key in ("A", "weights", "c") and not rest:
            current = key
            blocks[current] = []
        elif current is None:
            raise ValueError(f"coefficient row outside a block: {raw!r}")
        else:
            blocks[current].append([parse_coefficient(tok) for tok in line.split()])
    missing = {"A", "weights"} - blocks.keys()
    if missing or "orders" not in header:
        raise ValueError(f"coefficient file missing {sorted(missing) or ['orders']}")
    s = len(blocks["A"])
    A = [row + [Fraction(0)] * (s - len(row)) for row in blocks["A"]]
    if "c" in blocks:
        c = [x for row in blocks["c"] for x in row]
    else:
        c = [sum(row, Fraction(0)) for row in A]
    return {**header, "A": A, "weights": blocks["weights"], "c": c}


def embedded_set_from_text(text: str) -> EmbeddedSet:
    data = read_coefficient_file(text)
    return EmbeddedSet(_to_array(data["A"]), np.array([float(x) for x in data["c"]]),
                       _to_array(data["weights"]), data["orders"], data.get("name", ""))


def load_embedded_set(path: str | Path) -> EmbeddedSet:
    return embedded_set_from_text(Path(path).read_text())


def format_coefficient_file(emb: EmbeddedSet, kind: str = "explicit") -> str:
    """Serialise a set with 17 significant digits (round-trips float64)."""
    fmt = lambda x: f"{x:.17g}"
    lines = [f"name {emb.name}", f"kind {kind}", "orders " + " ".join(map(str, emb.orders)), "A"]
    lines += [" ".join(fmt(x) for x in row) for row in emb.A]
    lines.append("weights")
    lines += [" ".join(fmt(x) for x in row) for row in emb.weights]
    lines += ["c", " ".join(fmt(x) for x in emb.c)]
    return "\n".join(lines) + "\n"


_EXPLICIT_FILES = {
    "SSPRK(2,2)": "ssprk22.txt",
    "SSPRK(3,3)": "ssprk33.txt",
    "Heun(3,3)": "heun33.txt",
    "RK(4,4)": "rk44.txt",
    "Fehlberg(6,4)": "fehlberg64.txt",
    "Fehlberg(6,5)": "fehlberg65.txt",
    "DP(7,5)": "dp75.txt",
}
_ARK_FILES = {
    "ARK3(2)4L[2]SA": ("ark324l2sa_erk.txt", "ark324l2sa_esdirk.txt"),
    "ARK4(3)6L[2]SA": ("ark436l2sa_erk.txt", "ark436l2sa_esdirk.txt"),
}


def _data_text(filename: str) -> str:
    return resources.files("mrrk").joinpath("data").joinpath(filename).read_text()


@functools.lru_cache(maxsize=None)
def builtin_catalogue() -> dict[str, EmbeddedSet | ArkPair]:
    """Every method used in the experiments, keyed by its display name."""
    out: dict[str, EmbeddedSet | ArkPair] = {}
    for name, fname in _EXPLICIT_FILES.items():
        out[name] = embedded_set_from_text(_data_text(fname))
    for name, (erk, esdirk) in _ARK_FILES.items():
        out[name] = ArkPair(embedded_set_from_text(_data_text(erk)),
                            embedded_set_from_text(_data_text(esdirk)), name)
    return out


def get_method(name: str) -> EmbeddedSet | ArkPair:
    catalogue = builtin_catalogue()
    try:
        return catalogue[name]
    except KeyError:
        raise KeyError(f"unknown method {name!r}; choose from {sorted(catalogue)}") from None
