"""Monotone gain functions, cyclic small-gain checks and gain regularization.

Gains are immutable trees of primitive functions on [0, inf).  Every node
evaluates vectorized over numpy arrays and carries a class tag (N1, K, Kinf)
that propagates conservatively through the constructors.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

MAX_CYCLE_DIM = 12
INVERSE_RTOL = 1e-12
MAX_DOUBLINGS = 1023            # 2**1023 is the largest finite power of two
MARGINAL_RTOL = 1e-9
BRENT_MAX_BATCH = 8


class GainDomainError(ValueError):
    """Raised when a gain is evaluated at a negative argument."""


class GainConvergenceError(RuntimeError):
    """Raised when a numeric inverse cannot be bracketed."""


class CycleCapError(ValueError):
    """Raised when the gain matrix is too large for cycle enumeration."""


class GainClass(IntEnum):
    N1 = 0
    K = 1
    KINF = 2


def _as_array(s) -> np.ndarray:
    return np.asarray(s, dtype=float)


class MonotoneFn:
    """Base class; subclasses implement ``_eval`` on nonnegative arrays."""

    tag: GainClass = GainClass.N1

    def __call__(self, s):
        arr = _as_array(s)
        if np.any(arr < 0) or np.any(np.isnan(arr)):
            raise GainDomainError(f"gain evaluated at negative or NaN argument: {s!r}")
        out = self._eval(arr)
        if np.ndim(s) == 0:
            return float(out)
        return out

    def _eval(self, s: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    def to_json(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class Zero(MonotoneFn):
    tag = GainClass.N1

    def _eval(self, s):
        return np.zeros_like(s)

    @property
    def is_zero(self):
        return True

    def to_json(self):
        return {"kind": "zero"}


@dataclass(frozen=True)
class Identity(MonotoneFn):
    tag = GainClass.KINF

    def _eval(self, s):
        return s.copy()

    def to_json(self):
        return {"kind": "identity"}


@dataclass(frozen=True)
class Linear(MonotoneFn):
    slope: float

    def __post_init__(self):
        if not (self.slope >= 0 and math.isfinite(self.slope)):
            raise ValueError(f"linear gain needs a finite slope >= 0, got {self.slope}")

    @property
    def tag(self):
        return GainClass.KINF if self.slope > 0 else GainClass.N1

    def _eval(self, s):
        return self.slope * s

    @property
    def is_zero(self):
        return self.slope == 0

    def to_json(self):
        return {"kind": "linear", "slope": self.slope}


@dataclass(frozen=True)
class Power(MonotoneFn):
    """coeff * s**exponent."""

    coeff: float
    exponent: float

    def __post_init__(self):
        if not (self.coeff >= 0 and math.isfinite(self.coeff)):
            raise ValueError(f"power gain needs coeff >= 0, got {self.coeff}")
        if not (self.exponent > 0 and math.isfinite(self.exponent)):
            raise ValueError(f"power gain needs exponent > 0, got {self.exponent}")

    @property
    def tag(self):
        return GainClass.KINF if self.coeff > 0 else GainClass.N1

    def _eval(self, s):
        return self.coeff * np.power(s, self.exponent)

    @property
    def is_zero(self):
        return self.coeff == 0

    def to_json(self):
        return {"kind": "power", "coeff": self.coeff, "exponent": self.exponent}


@dataclass(frozen=True)
class Compose(MonotoneFn):
    """outer(inner(s))."""

    outer: MonotoneFn
    inner: MonotoneFn

    @property
    def tag(self):
        return min(self.outer.tag, self.inner.tag)

    def _eval(self, s):
        return self.outer._eval(self.inner._eval(s))

    @property
    def is_zero(self):
        return self.outer.is_zero or self.inner.is_zero

    def to_json(self):
        return {"kind": "compose", "outer": self.outer.to_json(), "inner": self.inner.to_json()}


@dataclass(frozen=True)
class Max(MonotoneFn):
    first: MonotoneFn
    second: MonotoneFn

    @property
    def tag(self):
        return max(self.first.tag, self.second.tag)

    def _eval(self, s):
        return np.maximum(self.first._eval(s), self.second._eval(s))

    @property
    def is_zero(self):
        return self.first.is_zero and self.second.is_zero

    def to_json(self):
        return {"kind": "max", "first": self.first.to_json(), "second": self.second.to_json()}


@dataclass(frozen=True)
class Sum(MonotoneFn):
    first: MonotoneFn
    second: MonotoneFn

    @property
    def tag(self):
        return max(self.first.tag, self.second.tag)

    def _eval(self, s):
        return self.first._eval(s) + self.second._eval(s)

    @property
    def is_zero(self):
        return self.first.is_zero and self.second.is_zero

    def to_json(self):
        return {"kind": "sum", "first": self.first.to_json(), "second": self.second.to_json()}


@dataclass(frozen=True)
class ScaledInverse(MonotoneFn):
    """s -> post * inner^{-1}(pre * s), inverse found by bracketing + bisection."""

    inner: MonotoneFn
    pre: float = 1.0
    post: float = 1.0

    def __post_init__(self):
        if self.inner.tag != GainClass.KINF:
            raise ValueError("ScaledInverse needs a class-Kinf inner function")
        if not (self.pre >= 0 and self.post >= 0):
            raise ValueError("ScaledInverse scales must be nonnegative")

    @property
    def tag(self):
        return GainClass.KINF if (self.pre > 0 and self.post > 0) else GainClass.N1

    def _eval(self, s):
        return self.post * invert(self.inner, self.pre * s)

    @property
    def is_zero(self):
        return self.pre == 0 or self.post == 0

    def to_json(self):
        return {"kind": "scaled_inverse", "inner": self.inner.to_json(),
                "pre": self.pre, "post": self.post}


@dataclass(frozen=True)
class Tabulated(MonotoneFn):
    """Piecewise-linear interpolation; the last segment is extrapolated."""

    xs: tuple
    ys: tuple
    declared: GainClass = GainClass.N1

    def __post_init__(self):
        xs = np.asarray(self.xs, float)
        ys = np.asarray(self.ys, float)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ValueError("tabulated gain needs matching breakpoint arrays of length >= 2")
        if xs[0] != 0 or ys[0] != 0:
            raise ValueError("tabulated gain must start at (0, 0)")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("tabulated breakpoints must be strictly increasing")
        dy = np.diff(ys)
        if np.any(dy < 0):
            raise ValueError("tabulated values must be nondecreasing")
        if self.declared >= GainClass.K and np.any(dy <= 0):
            raise ValueError("tabulated gain declared K/Kinf but is flat on a segment")
        object.__setattr__(self, "xs", tuple(float(v) for v in xs))
        object.__setattr__(self, "ys", tuple(float(v) for v in ys))

    @property
    def tag(self):
        return self.declared

    def _eval(self, s):
        xs = np.asarray(self.xs)
        ys = np.asarray(self.ys)
        out = np.interp(s, xs, ys)
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        beyond = s > xs[-1]
        if np.any(beyond):
            out = np.where(beyond, ys[-1] + slope * (s - xs[-1]), out)
        return out

    @property
    def is_zero(self):
        return all(y == 0 for y in self.ys)

    def to_json(self):
        return {"kind": "tabulated", "x": list(self.xs), "y": list(self.ys),
                "class": self.declared.name}


def invert(f: MonotoneFn, target) -> np.ndarray:
    """Vectorized inverse of a Kinf function at nonnegative targets."""
    t = np.atleast_1d(_as_array(target)).astype(float)
    out = np.zeros_like(t)
    pos = t > 0
    if not np.any(pos):
        return out.reshape(np.shape(target))
    tp = t[pos]
    hi = np.ones_like(tp)
    for _ in range(MAX_DOUBLINGS):
        low_side = f._eval(hi) < tp
        if not low_side.any():
            break
        hi[low_side] *= 2.0
    else:
        raise GainConvergenceError("inverse exceeds the float range")
    lo = hi * 0.5
    for _ in range(1100):
        too_high = f._eval(lo) >= tp
        if not too_high.any():
            break
        hi[too_high] = lo[too_high]
        lo[too_high] *= 0.5
    else:
        raise GainConvergenceError("could not bracket inverse from below")
    # invariant: f(lo) < t <= f(hi) and hi <= 2 lo
    if tp.size <= BRENT_MAX_BATCH:
        roots = [brentq(lambda v, c=c: float(f._eval(np.asarray(v))) - c, a, b,
                        xtol=1e-300, rtol=INVERSE_RTOL, maxiter=200)
                 for a, b, c in zip(lo, hi, tp)]
        out[pos] = roots
        return out.reshape(np.shape(target))
    for _ in range(60):
        if np.all(hi - lo <= INVERSE_RTOL * hi):
            break
        mid = 0.5 * (lo + hi)
        up = f._eval(mid) >= tp
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    out[pos] = 0.5 * (lo + hi)
    return out.reshape(np.shape(target))


def evaluate(f: MonotoneFn, s: float) -> float:
    """Scalar evaluation with the domain contract of the gain calculus."""
    return f(float(s))


# ---------------------------------------------------------------- JSON

def gain_from_json(doc: dict) -> MonotoneFn:
    kind = doc["kind"]
    if kind == "zero":
        return Zero()
    if kind == "identity":
        return Identity()
    if kind == "linear":
        return Linear(float(doc["slope"]))
    if kind == "power":
        return Power(float(doc["coeff"]), float(doc["exponent"]))
    if kind == "compose":
        return Compose(gain_from_json(doc["outer"]), gain_from_json(doc["inner"]))
    if kind == "max":
        return Max(gain_from_json(doc["first"]), gain_from_json(doc["second"]))
    if kind == "sum":
        return Sum(gain_from_json(doc["first"]), gain_from_json(doc["second"]))
    if kind == "scaled_inverse":
        return ScaledInverse(gain_from_json(doc["inner"]), float(doc.get("pre", 1.0)),
                             float(doc.get("post", 1.0)))
    if kind == "tabulated":
        return Tabulated(tuple(doc["x"]), tuple(doc["y"]), GainClass[doc.get("class", "N1")])
    raise ValueError(f"unknown gain kind {kind!r}")


# ---------------------------------------------------------------- matrices

@dataclass(frozen=True)
class GainMatrix:
    """k x k gains; entry (i, j) bounds the influence of component j on i."""

    entries: tuple

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.entries)
        k = len(rows)
        if k == 0 or any(len(r) != k for r in rows):
            raise ValueError("gain matrix must be square and nonempty")
        for i in range(k):
            if not rows[i][i].is_zero:
                raise ValueError(f"diagonal gain ({i},{i}) must be zero")
        object.__setattr__(self, "entries", rows)

    @property
    def k(self) -> int:
        return len(self.entries)

    def __getitem__(self, ij):
        i, j = ij
        return self.entries[i][j]

    @classmethod
    def zeros(cls, k: int) -> "GainMatrix":
        return cls(tuple(tuple(Zero() for _ in range(k)) for _ in range(k)))

    @classmethod
    def from_dict(cls, k: int, gains: dict) -> "GainMatrix":
        """Build from a sparse {(i, j): fn} mapping; missing entries are Zero."""
        return cls(tuple(tuple(gains.get((i, j), Zero()) for j in range(k)) for i in range(k)))

    def to_json(self) -> dict:
        return {"k": self.k, "entries": [[f.to_json() for f in row] for row in self.entries]}

    @classmethod
    def from_json(cls, doc: dict) -> "GainMatrix":
        g = cls(tuple(tuple(gain_from_json(e) for e in row) for row in doc["entries"]))
        if g.k != int(doc["k"]):
            raise ValueError("gain matrix 'k' does not match entries")
        return g

    def max_influence(self, i: int, values: np.ndarray) -> np.ndarray:
        """max_s gamma_{i,s}(values[s]) along the trailing axis of ``values``."""
        out = np.zeros(np.shape(values)[1:]) if np.ndim(values) > 1 else 0.0
        for s in range(self.k):
            if s == i or self.entries[i][s].is_zero:
                continue
            out = np.maximum(out, self.entries[i][s]._eval(_as_array(values[s])))
        return out


class Verdict(Enum):
    SATISFIED = "Satisfied"
    VIOLATED = "Violated"
    MARGINAL = "Marginal"


@dataclass
class CycleResult:
    indices: tuple
    worst_margin: float
    witness_s: float
    near_zero_slope: float


@dataclass
class CycleReport:
    cycles: list
    verdict: Verdict
    witness_cycle: tuple | None = None
    witness_s: float | None = None

    @property
    def worst_margin(self) -> float:
        if not self.cycles:
            return math.inf
        return min(c.worst_margin for c in self.cycles)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "witness_cycle": list(self.witness_cycle) if self.witness_cycle else None,
            "witness_s": self.witness_s,
            "worst_margin": None if math.isinf(self.worst_margin) else self.worst_margin,
            "cycles": [
                {"indices": list(c.indices), "worst_margin": c.worst_margin,
                 "witness_s": c.witness_s, "near_zero_slope": c.near_zero_slope}
                for c in self.cycles
            ],
        }


def default_grid() -> np.ndarray:
    return np.logspace(-8, 8, 400)


NEAR_ZERO_PROBES = np.array([1e-12, 1e-10])


def simple_cycles(G: GainMatrix):
    """Simple cycles of length >= 2, each listed once starting at its smallest index."""
    k = G.k
    if k > MAX_CYCLE_DIM:
        raise CycleCapError(f"cycle enumeration capped at k <= {MAX_CYCLE_DIM}, got {k}")
    succ = [[j for j in range(k) if j != i and not G[i, j].is_zero] for i in range(k)]
    found = []

    def extend(path, start):
        last = path[-1]
        for nxt in succ[last]:
            if nxt == start and len(path) >= 2:
                found.append(tuple(path))
            elif nxt > start and nxt not in path:
                extend(path + [nxt], start)

    for start in range(k):
        extend([start], start)
    return found


def compose_cycle(G: GainMatrix, cycle: Sequence[int], s: np.ndarray) -> np.ndarray:
    """(gamma_{i1,i2} o gamma_{i2,i3} o ... o gamma_{ir,i1})(s)."""
    y = _as_array(s)
    r = len(cycle)
    for pos in range(r - 1, -1, -1):
        i, j = cycle[pos], cycle[(pos + 1) % r]
        y = G[i, j]._eval(y)
    return y


def check_small_gain(G: GainMatrix, sample_grid=None) -> CycleReport:
    grid = default_grid() if sample_grid is None else np.asarray(sample_grid, float)
    pts = np.concatenate([NEAR_ZERO_PROBES, grid])
    results = []
    violated = None
    marginal = None
    for cyc in simple_cycles(G):
        vals = compose_cycle(G, cyc, pts)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite composition on cycle {cyc}")
        margin = pts - vals
        w = int(np.argmin(margin))
        slope = float(vals[0] / pts[0])
        results.append(CycleResult(tuple(cyc), float(margin[w]), float(pts[w]), slope))
        bad = np.nonzero(vals >= pts)[0]
        if bad.size and violated is None:
            violated = (tuple(cyc), float(pts[bad[0]]))
        rel = margin / pts
        tight = np.nonzero(rel < MARGINAL_RTOL)[0]
        if tight.size and marginal is None:
            marginal = (tuple(cyc), float(pts[tight[0]]))
    if violated is not None:
        return CycleReport(results, Verdict.VIOLATED, *violated)
    if marginal is not None:
        return CycleReport(results, Verdict.MARGINAL, *marginal)
    return CycleReport(results, Verdict.SATISFIED)


# ---------------------------------------------------------------- regularization

def _simple_paths(k: int, src: int, dst: int):
    """Interior vertex sequences of simple paths src -> ... -> dst with >= 1 interior vertex."""
    others = [v for v in range(k) if v not in (src, dst)]
    for length in range(1, len(others) + 1):
        for interior in itertools.permutations(others, length):
            yield interior


def _path_gain(edges: list) -> MonotoneFn:
    """Composition along a path given in path order; the last edge is applied first."""
    fn = edges[0]
    for e in edges[1:]:
        fn = Compose(fn, e)
    return fn


def regularize_gains(G: GainMatrix) -> GainMatrix:
    """Replace every off-diagonal gain by a dominating positive-definite Kinf gain.

    For the pair (i, j) the auxiliary a(s) is the max of gamma_{j,i} and every
    path composition gamma_{j,z1} o ... o gamma_{zl,i} whose edges are first
    lifted to max(gamma, s/2); the new gain is max(gamma_{i,j}, (a + id)^{-1}/2).
    All pairs are replaced at once and the small-gain condition survives.
    """
    report = check_small_gain(G)
    if report.verdict is Verdict.VIOLATED:
        raise ValueError(f"small-gain condition fails on cycle {report.witness_cycle}")
    k = G.k
    half = Linear(0.5)
    lifted = [[Max(G[a, b], half) for b in range(k)] for a in range(k)]
    new = [[Zero() for _ in range(k)] for _ in range(k)]
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            terms: list[MonotoneFn] = [G[j, i]]
            for interior in _simple_paths(k, j, i):
                nodes = (j,) + interior + (i,)
                # gamma_{j,z1}(gamma_{z1,z2}(... gamma_{zl,i}(s)))
                chain = [lifted[nodes[t]][nodes[t + 1]] for t in range(len(nodes) - 1)]
                terms.append(_path_gain(chain))
            a = terms[0]
            for t in terms[1:]:
                a = Max(a, t)
            a_tilde = Sum(a, Identity())
            new[i][j] = Max(G[i, j], ScaledInverse(a_tilde, 1.0, 0.5))
    return GainMatrix(tuple(tuple(r) for r in new))
