"""Vector control Lyapunov data model, sampled implication checks and feedback synthesis.

Systems have the control-affine form x' = f(d, x) + g(x) u with a scalar
control u in U and a disturbance d in a box D.  All state-indexed quantities
use 0-based indices.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .feasibility import (AffineConstraint, ControlSet, FeasibleInterval, Infeasible,
                          feasible_interval, select_u)
from .fields import Expr, FieldBundle, ScalarField, lift, variables
from .gain_calculus import GainClass, GainMatrix, MonotoneFn, Verdict, check_small_gain, regularize_gains

ANTECEDENT_SLACK = 1e-9
CONSEQUENT_RTOL = 1e-9
DISTURBANCE_GRID = 11
MAX_WITNESSES = 20


class SynthesisError(RuntimeError):
    """A sub-controller found no admissible control at a state."""

    def __init__(self, region: str, x, result: Infeasible, constraints):
        self.region = region
        self.x = np.asarray(x, float)
        self.result = result
        self.constraints = constraints
        super().__init__(f"{region}: implication {result.implication} fails at x={self.x.tolist()} "
                         f"({result.detail})")


# ---------------------------------------------------------------- system


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """``drift`` entries may reference disturbance leaves d0..; ``input_gain`` may not."""

    drift: tuple
    input_gain: tuple
    control: ControlSet = ControlSet()
    disturbance_box: tuple = ()

    def __post_init__(self):
        drift = tuple(lift(e.expr if isinstance(e, ScalarField) else e) for e in self.drift)
        gain = tuple(lift(e.expr if isinstance(e, ScalarField) else e) for e in self.input_gain)
        if len(drift) != len(gain) or not drift:
            raise ValueError("drift and input gain need the same nonzero length")
        box = tuple((float(lo), float(hi)) for lo, hi in self.disturbance_box)
        if any(lo > hi for lo, hi in box):
            raise ValueError("disturbance box has an empty side")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "input_gain", gain)
        object.__setattr__(self, "disturbance_box", box)
        n, l = len(drift), len(box)
        for e in gain:
            if variables(e)[1]:
                raise ValueError("input gain must not depend on the disturbance")
        object.__setattr__(self, "_vf", FieldBundle(drift + gain, n, l))
        affine = all(ScalarField(e, n, l).disturbance_affine for e in drift)
        object.__setattr__(self, "d_affine", affine)
        object.__setattr__(self, "d_points", _disturbance_points(box, affine))

    @property
    def n(self) -> int:
        return len(self.drift)

    @property
    def l(self) -> int:
        return len(self.disturbance_box)

    @property
    def conservative(self) -> bool:
        """True when the max over D is a grid estimate rather than exact."""
        return self.l > 0 and not self.d_affine

    def fields(self, x, d=()):
        """(f(d, x), g(x)) as tuples of floats."""
        vals = self._vf.values_and_grads(x, d)[0]
        return vals[: self.n], vals[self.n:]

    def rhs(self, x, u: float, d=()) -> list:
        f, g = self.fields(x, d)
        return [fi + gi * u for fi, gi in zip(f, g)]

    def batch_fields(self, X, d=()):
        vals, _ = self._vf.batch_values_and_grads(X, _broadcast_d(d, X.shape[1]))
        return vals[: self.n], vals[self.n:]


def _disturbance_points(box, affine: bool) -> tuple:
    if not box:
        return ((),)
    axes = []
    for lo, hi in box:
        if lo == hi:
            axes.append((lo,))
        elif affine:
            axes.append((lo, hi))
        else:
            axes.append(tuple(np.linspace(lo, hi, DISTURBANCE_GRID)))
    return tuple(itertools.product(*axes))


def _broadcast_d(d, N):
    return tuple(np.full(N, float(v)) for v in d)


def lie_derivatives(system: ControlAffineSystem, phi: ScalarField, x, d=()) -> tuple[float, float]:
    grad = phi.gradient(list(map(float, x)), tuple(d))
    f, g = system.fields(list(map(float, x)), tuple(d))
    return float(np.dot(grad, f)), float(np.dot(grad, g))


def max_over_disturbance(system: ControlAffineSystem, phi: ScalarField, x) -> tuple[float, bool]:
    """(max_d L_f phi(d, x), conservative flag)."""
    best = -math.inf
    for d in system.d_points:
        best = max(best, lie_derivatives(system, phi, x, d)[0])
    return best, system.conservative


# ---------------------------------------------------------------- specification


def _as_gain_fn(fn):
    if isinstance(fn, MonotoneFn):
        return lambda s: fn(np.maximum(s, 0.0))
    return fn


@dataclass(frozen=True, eq=False)
class VRCLFSpec:
    """Candidate VRCLF data.

    ``delta``, ``Kfun`` and ``rho`` are vectorized callables of a real
    argument; ``local_feedback`` is a gain vector (u = k.x) or a ScalarField.
    """

    V: tuple
    eta: Expr
    W: Expr
    delta: Callable
    Kfun: Callable
    rho: Callable
    epsilon: float
    gains: GainMatrix
    local_feedback: object
    radius: float
    a1: MonotoneFn | None = None
    a2: MonotoneFn | None = None

    def __post_init__(self):
        object.__setattr__(self, "V", tuple(lift(v.expr if isinstance(v, ScalarField) else v) for v in self.V))
        object.__setattr__(self, "eta", lift(self.eta.expr if isinstance(self.eta, ScalarField) else self.eta))
        object.__setattr__(self, "W", lift(self.W.expr if isinstance(self.W, ScalarField) else self.W))
        if self.gains.k != len(self.V):
            raise ValueError("gain matrix size must equal the number of Lyapunov components")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.radius > 0:
            raise ValueError("locality radius must be positive")
        for name in ("delta", "Kfun", "rho"):
            object.__setattr__(self, name, _as_gain_fn(getattr(self, name)))

    @property
    def k(self) -> int:
        return len(self.V)


def prepare_gains(G: GainMatrix) -> GainMatrix:
    """Keep G if every off-diagonal gain is already Kinf, else regularize it."""
    k = G.k
    if all(G[i, j].tag == GainClass.KINF for i in range(k) for j in range(k) if i != j):
        return G
    return regularize_gains(G)


# ---------------------------------------------------------------- evaluation


@dataclass
class BatchEval:
    X: np.ndarray
    V: np.ndarray          # (k, N)
    LfV: np.ndarray        # (k, N) max over D
    LgV: np.ndarray
    eta: np.ndarray
    Lf_eta: np.ndarray
    Lg_eta: np.ndarray
    W: np.ndarray
    Lf_W: np.ndarray
    Lg_W: np.ndarray
    active: np.ndarray     # (k, N) bool
    f: np.ndarray          # (n, N) at the first disturbance point
    g: np.ndarray


class SpecEvaluator:
    """Compiled evaluation of V, eta, W and their Lie derivatives."""

    def __init__(self, system: ControlAffineSystem, spec: VRCLFSpec):
        self.system = system
        self.spec = spec
        k = spec.k
        exprs = list(spec.V) + [spec.eta, spec.W]
        self.bundle = FieldBundle(exprs, system.n, 0, with_grad=range(k + 2))

    # batched -------------------------------------------------------
    def batch(self, X) -> BatchEval:
        X = np.asarray(X, float)
        sysm, spec = self.system, self.spec
        k, N = spec.k, X.shape[1]
        vals, grads = self.bundle.batch_values_and_grads(X)
        lf = np.full((k + 2, N), -np.inf)
        f0 = g = None
        for d in sysm.d_points:
            f, g = sysm.batch_fields(X, d)
            if f0 is None:
                f0 = f
            lf = np.maximum(lf, np.einsum("ajn,jn->an", grads, f))
        lg = np.einsum("ajn,jn->an", grads, g)
        active = batch_active(spec.gains, vals[:k])
        return BatchEval(X, vals[:k], lf[:k], lg[:k], vals[k], lf[k], lg[k], vals[k + 1],
                         lf[k + 1], lg[k + 1], active, f0, g)

    # single point --------------------------------------------------
    def point(self, x):
        """Scalar evaluation; returns (V, LfV, LgV) lists then eta and W triples."""
        x = [float(v) for v in x]
        sysm = self.system
        k, n = self.spec.k, sysm.n
        vals, grads = self.bundle.values_and_grads(x, ())
        lf = [-math.inf] * (k + 2)
        g = None
        for d in sysm.d_points:
            f, g = sysm.fields(x, d)
            for a in range(k + 2):
                ga = grads[a]
                s = 0.0
                for j in range(n):
                    s += ga[j] * f[j]
                if s > lf[a]:
                    lf[a] = s
        lg = []
        for a in range(k + 2):
            ga = grads[a]
            s = 0.0
            for j in range(n):
                s += ga[j] * g[j]
            lg.append(s)
        return vals, lf, lg


def batch_active(G: GainMatrix, V: np.ndarray) -> np.ndarray:
    k = G.k
    out = np.empty(V.shape, bool)
    Vc = np.maximum(V, 0.0)
    for i in range(k):
        peer = G.max_influence(i, Vc)
        out[i] = peer <= V[i] * (1.0 + ANTECEDENT_SLACK)
    return out


def active_set(spec: VRCLFSpec, x, evaluator: SpecEvaluator | None = None) -> tuple:
    """Indices j with max_s gamma_{j,s}(V_s(x)) <= V_j(x) (relative slack 1e-9)."""
    vals = _values_only(spec, x, evaluator)
    return _active_from_values(spec.gains, vals[: spec.k])


def _values_only(spec, x, evaluator):
    if evaluator is not None:
        return evaluator.bundle.values_and_grads([float(v) for v in x], ())[0]
    b = FieldBundle(list(spec.V), len(x), 0)
    return b.values_and_grads([float(v) for v in x], ())[0]


def _active_from_values(G: GainMatrix, V) -> tuple:
    k = G.k
    out = []
    for j in range(k):
        peer = 0.0
        for s in range(k):
            if s != j and not G[j, s].is_zero:
                peer = max(peer, float(G[j, s]._eval(np.asarray(max(V[s], 0.0)))))
        if peer <= V[j] * (1.0 + ANTECEDENT_SLACK):
            out.append(j)
    return tuple(out)


# ---------------------------------------------------------------- implication checks


@dataclass
class Witness:
    x: list
    value: float
    index: tuple = ()


@dataclass
class ImplicationResult:
    id: str
    tested: int = 0
    hits: int = 0
    violations: int = 0
    witnesses: list = field(default_factory=list)
    worst: float = -math.inf
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        return {"id": self.id, "tested": self.tested, "antecedent_hits": self.hits,
                "violations": self.violations, "passed": self.passed,
                "worst_residual": None if not math.isfinite(self.worst) else self.worst,
                "witnesses": [{"x": w.x, "residual": w.value, "index": list(w.index)}
                              for w in self.witnesses],
                "note": self.note}


@dataclass
class ImplicationReport:
    results: dict = field(default_factory=dict)
    min_hits: int = 1

    def add(self, res: ImplicationResult):
        if res.id in self.results:
            old = self.results[res.id]
            old.tested += res.tested
            old.hits += res.hits
            old.violations += res.violations
            old.worst = max(old.worst, res.worst)
            old.witnesses = (old.witnesses + res.witnesses)[:MAX_WITNESSES]
        else:
            self.results[res.id] = res

    def __getitem__(self, key) -> ImplicationResult:
        return self.results[key]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def starved(self) -> list:
        """Implications whose antecedent was hit fewer than ``min_hits`` times."""
        return [r.id for r in self.results.values() if r.hits < self.min_hits]

    def to_json(self) -> dict:
        return {"passed": self.passed, "starved": self.starved(),
                "implications": [r.to_json() for r in self.results.values()]}

    def table(self) -> str:
        rows = [f"{'id':>8} {'tested':>8} {'hits':>8} {'viol':>6}  verdict"]
        for r in self.results.values():
            rows.append(f"{r.id:>8} {r.tested:>8} {r.hits:>8} {r.violations:>6}  "
                        f"{'pass' if r.passed else 'FAIL'}")
        return "\n".join(rows)


def record(rid: str, X: np.ndarray, antecedent: np.ndarray, residual: np.ndarray,
           strict: bool = False, scale: np.ndarray | None = None, index=()) -> ImplicationResult:
    """Consequent residual <= 0 (or < 0 when strict) on the antecedent mask."""
    res = ImplicationResult(rid, tested=int(X.shape[1]))
    mask = np.asarray(antecedent, bool)
    res.hits = int(mask.sum())
    if not res.hits:
        return res
    r = np.asarray(residual, float)[mask]
    if strict:
        bad = ~(r < 0)
    else:
        tol = CONSEQUENT_RTOL * (1.0 + (np.abs(scale[mask]) if scale is not None else np.abs(r)))
        bad = ~(r <= tol)
    res.violations = int(bad.sum())
    res.worst = float(np.nanmax(np.where(np.isnan(r), np.inf, r)))
    if res.violations:
        cols = np.nonzero(mask)[0][bad][:MAX_WITNESSES]
        res.witnesses = [Witness(X[:, c].tolist(), float(np.asarray(residual)[c]), tuple(index))
                         for c in cols]
    return res


def _zero(v):
    return np.abs(v) <= ANTECEDENT_SLACK


def _pos(v):
    return v > ANTECEDENT_SLACK


def _neg(v):
    return v < -ANTECEDENT_SLACK


def _ratio_residual(lhs, ratio_num, ratio_den, rhs):
    with np.errstate(all="ignore"):
        return lhs - (ratio_num / ratio_den) * rhs


def check_implications(system: ControlAffineSystem, spec: VRCLFSpec, X,
                       evaluator: SpecEvaluator | None = None,
                       local_law: Callable | None = None) -> ImplicationReport:
    """Sample every implication required by the control-set case at the columns of X."""
    X = np.asarray(X, float)
    ev = (evaluator or SpecEvaluator(system, spec)).batch(X)
    eps = spec.epsilon
    k = spec.k
    rho = np.vstack([spec.rho(np.maximum(ev.V[i], 0.0)) for i in range(k)])
    delta = spec.delta(ev.eta)
    Kval = spec.Kfun(ev.eta)
    Fv = ev.LfV + rho                      # max L_f V_i + rho(V_i)
    Fe = ev.Lf_eta + delta                 # max L_f eta + delta(eta)
    Fw = ev.Lf_W - Kval * ev.W             # max L_f W - K W
    act = ev.active
    low = ev.eta <= eps
    high = ev.eta >= 0
    shell = high & low
    report = ImplicationReport()

    for i in range(k):
        report.add(record("3.3", X, low & act[i] & _zero(ev.LgV[i]), Fv[i], index=(i,),
                          scale=np.abs(ev.LfV[i]) + rho[i]))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            ant = low & act[i] & act[j] & ((_pos(ev.LgV[i]) & _neg(ev.LgV[j])) | (_neg(ev.LgV[i]) & _pos(ev.LgV[j])))
            r = _ratio_residual(Fv[i], ev.LgV[i], ev.LgV[j], Fv[j])
            report.add(record("3.4", X, ant, r, index=(i, j),
                              scale=np.abs(Fv[i]) + np.abs(ev.LgV[i] / np.where(ev.LgV[j] == 0, 1, ev.LgV[j]) * Fv[j])))
    report.add(record("3.5", X, high & _zero(ev.Lg_eta), Fe, scale=np.abs(ev.Lf_eta) + delta))
    report.add(record("3.6", X, high & _zero(ev.Lg_W), Fw, scale=np.abs(ev.Lf_W) + Kval * ev.W))
    ant = high & ((_pos(ev.Lg_eta) & _neg(ev.Lg_W)) | (_neg(ev.Lg_eta) & _pos(ev.Lg_W)))
    report.add(record("3.7", X, ant, _ratio_residual(Fe, ev.Lg_eta, ev.Lg_W, Fw),
                      scale=np.abs(Fe) + np.abs(Fw) * np.abs(ev.Lg_eta / np.where(ev.Lg_W == 0, 1, ev.Lg_W))))
    for j in range(k):
        opp = (_pos(ev.Lg_eta) & _neg(ev.LgV[j])) | (_neg(ev.Lg_eta) & _pos(ev.LgV[j]))
        report.add(record("3.8", X, shell & act[j] & opp, _ratio_residual(Fe, ev.Lg_eta, ev.LgV[j], Fv[j]),
                          index=(j,), scale=np.abs(Fe) + np.abs(Fv[j] * ev.Lg_eta / np.where(ev.LgV[j] == 0, 1, ev.LgV[j]))))
        opp = (_pos(ev.Lg_W) & _neg(ev.LgV[j])) | (_neg(ev.Lg_W) & _pos(ev.LgV[j]))
        report.add(record("3.9", X, shell & act[j] & opp, _ratio_residual(Fw, ev.Lg_W, ev.LgV[j], Fv[j]),
                          index=(j,), scale=np.abs(Fw) + np.abs(Fv[j] * ev.Lg_W / np.where(ev.LgV[j] == 0, 1, ev.LgV[j]))))

    U = system.control
    if U.case in ("P2", "P3"):
        a = U.a
        for i in range(k):
            report.add(record("3.12", X, low & act[i] & _pos(ev.LgV[i]), Fv[i] - a * ev.LgV[i],
                              strict=True, index=(i,)))
        report.add(record("3.13", X, high & _pos(ev.Lg_eta), Fe - a * ev.Lg_eta, strict=True))
        report.add(record("3.14", X, high & _pos(ev.Lg_W), Fw - a * ev.Lg_W, strict=True))
    if U.case == "P3":
        b = U.b
        for i in range(k):
            report.add(record("3.15", X, low & act[i] & _neg(ev.LgV[i]), Fv[i] + b * ev.LgV[i],
                              strict=True, index=(i,)))
        report.add(record("3.16", X, high & _neg(ev.Lg_eta), Fe + b * ev.Lg_eta, strict=True))
        report.add(record("3.17", X, high & _neg(ev.Lg_W), Fw + b * ev.Lg_W, strict=True))

    # local law on the ball of radius 2 r
    law = local_law or local_law_fn(system, spec)
    nx = np.linalg.norm(X, axis=0)
    ball = nx <= 2 * spec.radius
    u = law(X)
    for i in range(k):
        r = ev.LfV[i] + ev.LgV[i] * u + rho[i]
        report.add(record("3.11", X, ball & act[i], r, index=(i,), scale=np.abs(ev.LfV[i]) + rho[i]))
    return report


def check_structure(system: ControlAffineSystem, spec: VRCLFSpec, X,
                    evaluator: SpecEvaluator | None = None) -> ImplicationReport:
    """Sandwich bounds, W >= 1, eta(0) < 0, ball inside {eta < 0}, small gain, f(d, 0) = 0."""
    X = np.asarray(X, float)
    ev = (evaluator or SpecEvaluator(system, spec)).batch(X)
    report = ImplicationReport()
    always = np.ones(X.shape[1], bool)
    nx = np.linalg.norm(X, axis=0)
    vmax = ev.V.max(axis=0)
    if spec.a1 is not None:
        report.add(record("3.2-lower", X, always, spec.a1(nx) - vmax, scale=vmax))
    if spec.a2 is not None:
        report.add(record("3.2-upper", X, always, vmax - spec.a2(nx), scale=vmax))
    report.add(record("W>=1", X, always, 1.0 - ev.W, scale=np.ones_like(ev.W)))
    ball = nx <= 2 * spec.radius
    report.add(record("ball-in-eta<0", X, ball, ev.eta, strict=True))
    origin = np.zeros((system.n, 1))
    ev0 = (evaluator or SpecEvaluator(system, spec)).batch(origin)
    report.add(record("eta(0)<0", origin, np.ones(1, bool), ev0.eta, strict=True))
    fz = []
    for d in system.d_points:
        f, _ = system.fields([0.0] * system.n, d)
        fz.append(max(abs(v) for v in f))
    report.add(record("f(d,0)=0", origin, np.ones(1, bool), np.array([max(fz) - 1e-12])))
    sg = check_small_gain(spec.gains)
    res = ImplicationResult("3.10", tested=len(sg.cycles), hits=len(sg.cycles),
                            violations=int(sg.verdict is Verdict.VIOLATED),
                            note=sg.verdict.value)
    report.add(res)
    return report


def local_law_fn(system: ControlAffineSystem, spec: VRCLFSpec) -> Callable:
    """Vectorized local feedback clipped into U."""
    lf = spec.local_feedback
    U = system.control
    if isinstance(lf, (ScalarField, Expr)):
        bundle = FieldBundle([lf.expr if isinstance(lf, ScalarField) else lf], system.n)

        def law(X):
            X = np.asarray(X, float)
            if X.ndim == 1:
                return float(U.clip(bundle.values_and_grads(list(X), ())[0][0]))
            return U.clip(bundle.batch_values_and_grads(X)[0][0])
        return law
    kvec = np.asarray(lf, float)
    if kvec.shape != (system.n,):
        raise ValueError("local gain vector must have length n")

    def law(X):
        X = np.asarray(X, float)
        u = kvec @ X
        return float(U.clip(u)) if X.ndim == 1 else U.clip(u)
    return law


# ---------------------------------------------------------------- synthesis


def bump(s: float) -> float:
    """Smooth step: 0 for s <= 0, 1 for s >= 1, built from exp(-1/t)."""
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    a = math.exp(-1.0 / s)
    b = math.exp(-1.0 / (1.0 - s))
    return a / (a + b)


@dataclass
class PointData:
    x: list
    V: list
    LfV: list
    LgV: list
    eta: float
    Lf_eta: float
    Lg_eta: float
    W: float
    Lf_W: float
    Lg_W: float
    active: tuple


class FeedbackLaw:
    """Region-blended feedback; ``__call__`` returns u in U for a state x."""

    def __init__(self, system: ControlAffineSystem, spec: VRCLFSpec):
        self.system = system
        self.spec = spec
        self.evaluator = SpecEvaluator(system, spec)
        self.local = local_law_fn(system, spec)
        self.rho = spec.rho
        self.delta = spec.delta
        self.Kfun = spec.Kfun

    # -- data ----------------------------------------------------------
    def data(self, x) -> PointData:
        vals, lf, lg = self.evaluator.point(x)
        k = self.spec.k
        V = list(vals[:k])
        act = _active_from_values(self.spec.gains, V)
        return PointData(list(map(float, x)), V, lf[:k], lg[:k], vals[k], lf[k], lg[k],
                         vals[k + 1], lf[k + 1], lg[k + 1], act)

    # -- constraint families -------------------------------------------
    def _outer_constraints(self, p: PointData) -> list:
        dl = float(self.delta(p.eta))
        K = float(self.Kfun(p.eta))
        return [AffineConstraint(p.Lf_eta + 0.75 * dl, p.Lg_eta, "eta"),
                AffineConstraint(p.Lf_W - 1.5 * K * p.W, p.Lg_W, "W")]

    def _lyapunov_constraints(self, p: PointData) -> list:
        out = []
        for j in p.active:
            r = float(self.rho(max(p.V[j], 0.0)))
            out.append(AffineConstraint(p.LfV[j] + 0.75 * r, p.LgV[j], f"V{j}"))
        return out

    def _solve(self, region: str, p: PointData, cons: list) -> float:
        U = self.system.control
        if not cons:
            return select_u(_interior(U), U)
        res = feasible_interval(cons, U)
        if isinstance(res, Infeasible):
            raise SynthesisError(region, p.x, res, cons)
        return select_u(res, U)

    def k1(self, x, p: PointData | None = None) -> float:
        p = p or self.data(x)
        return self._solve("k1", p, self._outer_constraints(p))

    def k2(self, x, p: PointData | None = None) -> float:
        p = p or self.data(x)
        return self._solve("k2", p, self._lyapunov_constraints(p))

    def k3(self, x, p: PointData | None = None) -> float:
        p = p or self.data(x)
        return self._solve("k3", p, self._outer_constraints(p) + self._lyapunov_constraints(p))

    # -- dispatch ----------------------------------------------------------
    def evaluate(self, x) -> tuple[float, str, PointData | None]:
        """(u, region tag, point data) at x."""
        x = [float(v) for v in x]
        if all(v == 0.0 for v in x):
            return 0.0, "origin", None
        U = self.system.control
        r = self.spec.radius
        nx2 = sum(v * v for v in x)
        if nx2 < r * r:
            return float(self.local(np.array(x))), "local", None
        p = self.data(x)
        if nx2 <= 4 * r * r:
            w = bump((nx2 - r * r) / (3 * r * r))
            u_loc = float(self.local(np.array(x))) if w < 1.0 else 0.0
            u2 = self.k2(x, p) if w > 0.0 else 0.0
            return float(U.clip((1 - w) * u_loc + w * u2)), "local/k2", p
        eps = self.spec.epsilon
        e = p.eta
        if e < eps / 5:
            return self.k2(x, p), "k2", p
        if e <= 2 * eps / 5:
            w = bump(5 * e / eps - 1)
            u2 = self.k2(x, p) if w < 1.0 else 0.0
            u3 = self.k3(x, p) if w > 0.0 else 0.0
            return float(U.clip((1 - w) * u2 + w * u3)), "k2/k3", p
        if e < 3 * eps / 5:
            return self.k3(x, p), "k3", p
        if e <= 4 * eps / 5:
            w = bump(5 * e / eps - 3)
            u3 = self.k3(x, p) if w < 1.0 else 0.0
            u1 = self.k1(x, p) if w > 0.0 else 0.0
            return float(U.clip((1 - w) * u3 + w * u1)), "k3/k1", p
        return self.k1(x, p), "k1", p

    def __call__(self, x) -> float:
        return self.evaluate(x)[0]


def _interior(U: ControlSet):
    return FeasibleInterval(U.lower, U.upper)


def synthesize(system: ControlAffineSystem, spec: VRCLFSpec) -> FeedbackLaw:
    """Feedback law for ``spec`` with gains made positive definite and unbounded first."""
    gains = prepare_gains(spec.gains)
    if gains is not spec.gains:
        spec = VRCLFSpec(spec.V, spec.eta, spec.W, spec.delta, spec.Kfun, spec.rho, spec.epsilon,
                         gains, spec.local_feedback, spec.radius, spec.a1, spec.a2)
    return FeedbackLaw(system, spec)


def _controls(law: FeedbackLaw, X, which: str, mask: np.ndarray) -> np.ndarray:
    u = np.full(X.shape[1], np.nan)
    fn = law if which == "blend" else getattr(law, which)
    for c in np.nonzero(mask)[0]:
        u[c] = fn(X[:, c])
    return u


def certify(law: FeedbackLaw, X) -> ImplicationReport:
    """Sub-controller inequalities plus the closed-loop shifted-margin conditions.

    Each sub-controller is checked on its own domain; the blended law is checked
    against eta decrease (delta/2) and W growth (2K) where eta >= 2 eps / 5 and
    against V decrease (rho/2) for active indices where eta <= 2 eps / 5.
    """
    X = np.asarray(X, float)
    spec, system = law.spec, law.system
    eps = spec.epsilon
    ev = law.evaluator.batch(X)
    N, k = X.shape[1], spec.k
    nonzero = np.linalg.norm(X, axis=0) > 0
    rho = np.vstack([spec.rho(np.maximum(ev.V[i], 0.0)) for i in range(k)])
    delta = spec.delta(ev.eta)
    Kval = spec.Kfun(ev.eta)
    report = ImplicationReport()

    def eta_row(rid, mask, u):
        report.add(record(rid, X, mask, ev.Lf_eta + ev.Lg_eta * u + 0.5 * delta,
                          scale=np.abs(ev.Lf_eta) + np.abs(ev.Lg_eta * u) + delta))

    def W_row(rid, mask, u):
        report.add(record(rid, X, mask, ev.Lf_W + ev.Lg_W * u - 2 * Kval * ev.W,
                          scale=np.abs(ev.Lf_W) + np.abs(ev.Lg_W * u) + Kval * ev.W))

    def V_rows(rid, mask, u):
        for i in range(k):
            r = ev.LfV[i] + ev.LgV[i] * u + 0.5 * rho[i]
            report.add(record(rid, X, mask & ev.active[i], r, index=(i,),
                              scale=np.abs(ev.LfV[i]) + np.abs(ev.LgV[i] * u) + rho[i]))

    outer = ev.eta > 0
    u1 = _controls(law, X, "k1", outer)
    eta_row("3.18", outer, u1)
    W_row("3.19", outer, u1)
    inner = (ev.eta < eps) & nonzero
    V_rows("3.20", inner, _controls(law, X, "k2", inner))
    shell = outer & (ev.eta < eps)
    u3 = _controls(law, X, "k3", shell)
    eta_row("3.21", shell, u3)
    W_row("3.22", shell, u3)
    V_rows("3.23", shell & nonzero, u3)

    u = _controls(law, X, "blend", np.ones(N, bool))
    upper = ev.eta >= 2 * eps / 5
    eta_row("closed-eta", upper, u)
    W_row("closed-W", upper, u)
    V_rows("closed-V", (ev.eta <= 2 * eps / 5) & nonzero, u)
    U = system.control
    report.add(record("u-in-U", X, np.ones(N, bool), np.maximum(U.lower - u, u - U.upper),
                      scale=np.ones(N)))
    return report
