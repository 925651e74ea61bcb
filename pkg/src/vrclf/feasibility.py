"""Exact feasibility of scalar-control inequality systems f_i + g_i u < 0, u in U."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np

ZERO_GAIN_RTOL = 1e-12
SELECT_MARGIN = 1e-6


class FeasibilityInputError(ValueError):
    pass


@dataclass(frozen=True)
class AffineConstraint:
    f: float
    g: float
    label: Any = None

    def __post_init__(self):
        if not (math.isfinite(self.f) and math.isfinite(self.g)):
            raise FeasibilityInputError(f"non-finite constraint data f={self.f}, g={self.g}")

    def residual(self, u: float) -> float:
        return self.f + self.g * u


@dataclass(frozen=True)
class ControlSet:
    """P1: the real line; P2: [-a, inf); P3: [-a, b]."""

    case: str = "P1"
    a: float = 0.0
    b: float = math.inf

    def __post_init__(self):
        if self.case not in ("P1", "P2", "P3"):
            raise ValueError(f"unknown control-set case {self.case!r}")
        if self.case in ("P2", "P3") and not (self.a >= 0 and math.isfinite(self.a)):
            raise ValueError("control set needs a finite a >= 0")
        if self.case == "P3":
            if not (self.b >= 0 and math.isfinite(self.b)):
                raise ValueError("P3 needs a finite b >= 0")
            if self.a + self.b <= 0:
                raise ValueError("P3 needs a + b > 0")

    @classmethod
    def reals(cls) -> "ControlSet":
        return cls("P1")

    @classmethod
    def half_line(cls, a: float) -> "ControlSet":
        return cls("P2", a=a)

    @classmethod
    def interval(cls, a: float, b: float) -> "ControlSet":
        return cls("P3", a=a, b=b)

    @property
    def lower(self) -> float:
        return -math.inf if self.case == "P1" else -self.a

    @property
    def upper(self) -> float:
        return self.b if self.case == "P3" else math.inf

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)

    def contains(self, u: float) -> bool:
        return self.lower <= u <= self.upper

    def to_json(self) -> dict:
        doc = {"case": self.case}
        if self.case in ("P2", "P3"):
            doc["a"] = self.a
        if self.case == "P3":
            doc["b"] = self.b
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ControlSet":
        return cls(doc["case"], float(doc.get("a", 0.0)), float(doc.get("b", math.inf)))


@dataclass(frozen=True)
class FeasibleInterval:
    """Open interval (lower, upper) of admissible controls."""

    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, u: float) -> bool:
        return self.lower < u < self.upper

    def to_json(self) -> dict:
        return {"feasible": True, "lower": _json_real(self.lower), "upper": _json_real(self.upper)}


@dataclass(frozen=True)
class Infeasible:
    """``implication`` is one of I..IV; ``witness`` holds the offending index or pair."""

    implication: str
    witness: tuple
    detail: str = ""

    def to_json(self) -> dict:
        return {"feasible": False, "implication": self.implication,
                "witness": list(self.witness), "detail": self.detail}


FeasibilityResult = Union[FeasibleInterval, Infeasible]


def _json_real(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def classify(constraints: Sequence[AffineConstraint]):
    """Split indices into (zero-gain, positive-gain, negative-gain) groups."""
    b0, bp, bm = [], [], []
    for idx, c in enumerate(constraints):
        if abs(c.g) <= ZERO_GAIN_RTOL * max(1.0, abs(c.f)):
            b0.append(idx)
        elif c.g > 0:
            bp.append(idx)
        else:
            bm.append(idx)
    return b0, bp, bm


def feasible_interval(constraints: Sequence[AffineConstraint], control: ControlSet) -> FeasibilityResult:
    if len(constraints) == 0:
        raise FeasibilityInputError("constraint list is empty")
    b0, bp, bm = classify(constraints)

    for i in b0:
        if constraints[i].f >= 0:
            return Infeasible("I", (i,), f"zero-gain constraint has f = {constraints[i].f} >= 0")

    # u < -f/g on B+, u > -f/g on B-
    upper, arg_up = math.inf, None
    for i in bp:
        bound = -constraints[i].f / constraints[i].g
        if bound < upper:
            upper, arg_up = bound, i
    lower, arg_lo = -math.inf, None
    for j in bm:
        bound = -constraints[j].f / constraints[j].g
        if bound > lower:
            lower, arg_lo = bound, j

    if arg_up is not None and arg_lo is not None and not lower < upper:
        return Infeasible("II", (arg_up, arg_lo),
                          f"upper bound {upper} from B+ does not exceed lower bound {lower} from B-")

    if control.case in ("P2", "P3") and arg_up is not None:
        c = constraints[arg_up]
        if c.f - control.a * c.g >= 0:
            return Infeasible("III", (arg_up,), f"f - a g = {c.f - control.a * c.g} >= 0")
    if control.case == "P3" and arg_lo is not None:
        c = constraints[arg_lo]
        if c.f + control.b * c.g >= 0:
            return Infeasible("IV", (arg_lo,), f"f + b g = {c.f + control.b * c.g} >= 0")

    return FeasibleInterval(max(lower, control.lower), min(upper, control.upper))


def _shrink(endpoint: float, width: float) -> float:
    eps = SELECT_MARGIN
    if math.isfinite(endpoint):
        eps = max(eps, 8.0 * np.spacing(abs(endpoint)))
    return min(eps, 0.25 * width)


def select_u(interval: FeasibleInterval, control: ControlSet | None = None) -> float:
    """Min-norm point of the interval after pulling each finite end inward."""
    width = interval.width
    if not width > 0:
        raise FeasibilityInputError(f"empty interval ({interval.lower}, {interval.upper})")
    lo = interval.lower + _shrink(interval.lower, width) if math.isfinite(interval.lower) else -math.inf
    hi = interval.upper - _shrink(interval.upper, width) if math.isfinite(interval.upper) else math.inf
    u = min(max(0.0, lo), hi)
    if not interval.lower < u < interval.upper:
        u = interval.lower + 0.5 * width
        if not interval.lower < u < interval.upper:
            raise FeasibilityInputError(
                f"interval ({interval.lower}, {interval.upper}) has no interior float")
    if control is not None:
        u = float(control.clip(u))
    return float(u)


def solve(constraints: Sequence[AffineConstraint], control: ControlSet) -> tuple[FeasibilityResult, float | None]:
    """Interval plus selected control, or (Infeasible, None)."""
    res = feasible_interval(constraints, control)
    if isinstance(res, Infeasible):
        return res, None
    return res, select_u(res, control)
