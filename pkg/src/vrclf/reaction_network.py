"""Continuous stirred-tank reaction networks with the dilution rate as bounded input.

Model: c' = D (c_f - c) + S v(c) on the open positive orthant.  Rate laws are
expressions in ``fields`` whose variable ``x{i}`` stands for the concentration
c_i; ``log_transform`` substitutes c = exp(x).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq

from . import fields as fx
from .corollary_lab import CorollaryConfig, build_spec, gain_antecedents
from .feasibility import ControlSet
from .gain_calculus import GainMatrix, Identity, Linear, MonotoneFn, Power, Verdict, check_small_gain, invert
from .vclf_core import (ControlAffineSystem, FeedbackLaw, ImplicationReport, ImplicationResult, VRCLFSpec,
                        record, synthesize)

CONSERVATION_TOL = 1e-10
ROOT_DEDUP_RTOL = 1e-8


class NetworkError(ValueError):
    pass


# ---------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class ReactionNetwork:
    S: np.ndarray
    rates: tuple
    c_f: tuple
    D_max: float

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, float))
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "rates", tuple(fx.lift(r) for r in self.rates))
        object.__setattr__(self, "c_f", tuple(float(v) for v in self.c_f))
        n, m = S.shape
        if len(self.rates) != m:
            raise NetworkError(f"S has {m} columns but {len(self.rates)} rate laws were given")
        if len(self.c_f) != n:
            raise NetworkError("feed vector length must equal the number of species")
        if any(v < 0 for v in self.c_f):
            raise NetworkError("feed concentrations must be nonnegative")
        if not self.D_max > 0:
            raise NetworkError("D_max must be positive")
        for r in self.rates:
            xs, ds = fx.variables(r)
            if ds or any(i >= n for i in xs):
                raise NetworkError("rate laws may only depend on c_0..c_{n-1}")
        object.__setattr__(self, "_rate_bundle", fx.FieldBundle(list(self.rates), n, 0,
                                                                with_grad=range(m)))

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]

    def rate_values(self, C) -> np.ndarray:
        """(m, N) rates at concentration columns C."""
        C = np.asarray(C, float)
        return self._rate_bundle.batch_values_and_grads(C.reshape(self.n, -1))[0]

    def rate_jacobian(self, c) -> np.ndarray:
        vals, grads = self._rate_bundle.values_and_grads(list(map(float, c)), ())
        return np.asarray(grads, float).reshape(self.m, self.n)

    def vector_field(self, c, D: float) -> np.ndarray:
        c = np.asarray(c, float)
        v = self.rate_values(c[:, None])[:, 0]
        return D * (np.asarray(self.c_f) - c) + self.S @ v

    def with_D_max(self, D_max: float) -> "ReactionNetwork":
        return ReactionNetwork(self.S, self.rates, self.c_f, D_max)

    def to_json(self) -> dict:
        return {"S": self.S.tolist(), "rates": [fx.to_prefix(r) for r in self.rates],
                "c_f": list(self.c_f), "D_max": self.D_max}

    @classmethod
    def from_json(cls, doc: dict) -> "ReactionNetwork":
        S = np.atleast_2d(np.asarray(doc["S"], float))
        names = {f"c{i}": fx.var(i) for i in range(S.shape[0])}
        rates = [fx.from_prefix(r, names) for r in doc["rates"]]
        return cls(S, rates, doc["c_f"], float(doc["D_max"]))


@dataclass(frozen=True)
class ConservationPair:
    p: tuple
    q: tuple


def validate_pair(S: np.ndarray, p, q=None) -> ConservationPair:
    """Check S' p = q >= 0; q defaults to S' p."""
    p = np.asarray(p, float)
    Sp = np.asarray(S, float).T @ p
    q = Sp if q is None else np.asarray(q, float)
    if q.shape != Sp.shape or np.max(np.abs(Sp - q), initial=0.0) > CONSERVATION_TOL:
        raise NetworkError(f"S' p = {Sp.tolist()} does not match q = {q.tolist()}")
    if np.any(q < -CONSERVATION_TOL):
        raise NetworkError(f"q = {q.tolist()} has a negative component")
    return ConservationPair(tuple(p.tolist()), tuple(np.maximum(q, 0.0).tolist()))


@dataclass(frozen=True, eq=False)
class ConservationData:
    """Pairs (p_l, q_l), the bound constants b and R, and the rate-growth gain g."""

    pairs: tuple
    b: float
    R: float
    gfun: MonotoneFn

    def __post_init__(self):
        if not (self.b > 0 and self.R > 0):
            raise NetworkError("conservation bound constants b and R must be positive")
        if not self.pairs:
            raise NetworkError("at least one conservation pair is required")

    @property
    def N(self) -> int:
        return len(self.pairs)

    def P(self) -> np.ndarray:
        return np.array([pr.p for pr in self.pairs], float)

    def defect(self, c_f, C) -> np.ndarray:
        """(N_pairs, N) of max(p' c_f - p' c, 0)."""
        P = self.P()
        return np.maximum((P @ np.asarray(c_f, float))[:, None] - P @ np.asarray(C, float), 0.0)


def find_conservation(S, candidates: Sequence = ()) -> list:
    """Left-null basis of S (q = 0) followed by the candidate vectors with S' p >= 0."""
    S = np.atleast_2d(np.asarray(S, float))
    out = []
    basis = null_space(S.T)
    for col in basis.T:
        p = col / np.max(np.abs(col))
        out.append(ConservationPair(tuple(p.tolist()), tuple([0.0] * S.shape[1])))
    for cand in candidates:
        p, q = (cand if isinstance(cand, tuple) and len(cand) == 2 and np.ndim(cand[0]) == 1
                else (cand, None))
        try:
            out.append(validate_pair(S, p, q))
        except NetworkError:
            continue
    return out


# ---------------------------------------------------------------- hypotheses


def sample_concentrations(n: int, N: int, rng: np.random.Generator, upper: float = 10.0,
                          lower: float = 1e-4) -> np.ndarray:
    """Half log-uniform, half uniform columns in (lower, upper)^n."""
    a = N // 2
    logs = np.exp(rng.uniform(math.log(lower), math.log(upper), (n, a)))
    lin = rng.uniform(lower, upper, (n, N - a))
    return np.hstack([logs, lin])


def check_hypotheses(net: ReactionNetwork, cons: ConservationData, C) -> ImplicationReport:
    """Sampled R1-R3 plus rate nonnegativity and the structural zero condition."""
    C = np.asarray(C, float)
    rep = ImplicationReport()
    N = C.shape[1]
    one = np.ones(1, bool)
    ref = np.zeros((net.n, 1))
    for l, pr in enumerate(cons.pairs):
        Sp = net.S.T @ np.asarray(pr.p)
        err = np.max(np.abs(Sp - np.asarray(pr.q)), initial=0.0)
        rep.add(record("R1", ref, one, np.array([err - CONSERVATION_TOL]), index=(l,)))
        rep.add(record("R1-q>=0", ref, one, np.array([-min(pr.q, default=0.0)]), index=(l,)))
    v = net.rate_values(C)
    for j in range(net.m):
        rep.add(record("rates>=0", C, np.ones(N, bool), -v[j], index=(j,), scale=np.abs(v[j])))
    # R2: max_i c_i <= b + R sum_l max(p' c_f - p' c, 0)
    bound = cons.b + cons.R * cons.defect(net.c_f, C).sum(axis=0)
    rep.add(record("R2", C, np.ones(N, bool), C.max(axis=0) - bound, scale=bound))
    # R3: v_j(c) <= g(max c) c_i for every reactant i of reaction j
    gmax = cons.gfun(C.max(axis=0))
    for j in range(net.m):
        for i in np.nonzero(net.S[:, j] < 0)[0]:
            lim = gmax * C[i]
            rep.add(record("R3", C, np.ones(N, bool), v[j] - lim, index=(j, int(i)),
                           scale=np.abs(v[j]) + lim))
    # structural zeros: c_i -> 0 kills reactions consuming species i
    for j in range(net.m):
        for i in np.nonzero(net.S[:, j] < 0)[0]:
            Z = C.copy()
            Z[i] = 0.0
            vz = net.rate_values(Z)[j]
            rep.add(record("structural-zero", Z, np.ones(N, bool), np.abs(vz) - 1e-12,
                           index=(j, int(i)), scale=np.zeros(N)))
    return rep


# ---------------------------------------------------------------- equilibria


@dataclass
class EquilibriumReport:
    roots: list
    residuals: list
    method: str
    converged_starts: int = 0
    total_starts: int = 0
    threshold_rule: int | None = None          # predicted count from the kM threshold, when applicable
    notes: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.roots)

    @property
    def rule_agrees(self) -> bool | None:
        return None if self.threshold_rule is None else self.threshold_rule == self.count

    def to_json(self) -> dict:
        return {"count": self.count, "roots": [list(map(float, r)) for r in self.roots],
                "residuals": [float(r) for r in self.residuals], "method": self.method,
                "converged_starts": self.converged_starts, "total_starts": self.total_starts,
                "threshold_prediction": self.threshold_rule, "threshold_agrees": self.rule_agrees,
                "notes": list(self.notes)}


def _dedup(points: list, rtol: float = ROOT_DEDUP_RTOL) -> list:
    out: list = []
    for p in sorted(points, key=lambda v: tuple(v)):
        if not any(np.linalg.norm(p - q) <= rtol * max(1.0, np.linalg.norm(q)) for q in out):
            out.append(p)
    return out


def _newton(net: ReactionNetwork, D: float, c0: np.ndarray, maxit: int = 100, tol: float = 1e-12):
    """Damped Newton on D (c_f - c) + S v(c) = 0 kept inside the positive orthant."""
    c = c0.copy()
    cf = np.asarray(net.c_f)
    for _ in range(maxit):
        F = net.vector_field(c, D)
        if np.linalg.norm(F) <= tol * (1 + np.linalg.norm(cf)):
            return c
        J = -D * np.eye(net.n) + net.S @ net.rate_jacobian(c)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        # stay positive, then backtrack on the residual norm
        neg = step < 0
        if np.any(neg):
            t = min(1.0, 0.9 * float(np.min(-c[neg] / step[neg])))
        base = np.linalg.norm(F)
        while t > 1e-10:
            trial = c + t * step
            if np.all(trial > 0) and np.linalg.norm(net.vector_field(trial, D)) < base:
                break
            t *= 0.5
        else:
            return None
        c = c + t * step
    F = net.vector_field(c, D)
    return c if np.linalg.norm(F) <= 1e-9 * (1 + np.linalg.norm(cf)) else None


def equilibria(net: ReactionNetwork, D_star: float = 1.0, starts_per_axis: int = 6,
               upper: float | None = None) -> EquilibriumReport:
    """Interior equilibria at dilution rate D_star by damped Newton from a grid of starts."""
    if not 0 < D_star < net.D_max:
        raise NetworkError("D* must lie in (0, D_max)")
    if all(r.is_const and r.value == 0.0 for r in net.rates):
        c = np.asarray(net.c_f)
        return EquilibriumReport([c], [0.0], "no-reaction", 1, 1)
    hi = upper or 2.0 * max(1.0, sum(net.c_f))
    axis = np.geomspace(1e-3 * hi, hi, starts_per_axis)
    starts = [np.array(s) for s in itertools.product(axis, repeat=net.n)]
    found, ok = [], 0
    for s in starts:
        c = _newton(net, D_star, s)
        if c is not None and np.all(c > 0):
            ok += 1
            found.append(c)
    roots = _dedup(found)
    rep = EquilibriumReport(roots, [float(np.linalg.norm(net.vector_field(r, D_star))) for r in roots],
                            "damped-newton", ok, len(starts))
    if not ok:
        rep.notes.append("Newton failed to converge from every start")
    return rep


def example51_roots(k: float, c1f: float, c2f: float, D: float = 1.0) -> EquilibriumReport:
    """All equilibria of the single-reaction network via the mass reduction.

    With M = c1f + c2f and y = c2 the equilibrium condition is
    h(y) = y - (k/D)(M - y) y^2 = c2f on [c2f, M]; h is split at its critical
    points and every sign change is bracketed.
    """
    if not (k > 0 and c1f > 0 and c2f >= 0 and D > 0):
        raise NetworkError("need k > 0, c1f > 0, c2f >= 0, D > 0")
    kk = k / D
    M = c1f + c2f
    h = lambda y: y - kk * (M - y) * y * y - c2f
    cuts = [c2f, M]
    disc = M * M - 3.0 / kk
    if disc > 0:
        for y in ((M - math.sqrt(disc)) / 3, (M + math.sqrt(disc)) / 3):
            if c2f < y < M:
                cuts.append(y)
    cuts = sorted(cuts)
    roots = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        ha, hb = h(a), h(b)
        if ha == 0.0:
            roots.append(a)
        if ha * hb < 0:
            roots.append(brentq(h, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    if h(cuts[-1]) == 0.0:
        roots.append(cuts[-1])
    ys = sorted(set(roots))
    pts = [np.array([M - y, y]) for y in ys if 0 < M - y and y > 0]
    res = []
    for c in pts:
        v = k * c[0] * c[1] ** 2
        res.append(max(abs(c1f - c[0] - v / D), abs(c2f - c[1] + v / D)))
    rep = EquilibriumReport(pts, res, "reduced-cubic-bracketing")
    kM = k * M / D
    if kM != 3.0:
        rep.threshold_rule = 1 if kM < 3 else 3
        if rep.threshold_rule != rep.count:
            rep.notes.append(f"kM = {kM:g} predicts {rep.threshold_rule} equilibria; bracketing finds {rep.count}")
    return rep


# ---------------------------------------------------------------- coordinates


def normalize(net: ReactionNetwork, c_star, pairs: Sequence[ConservationPair] = ()):
    """Rescale c -> c / c* so the equilibrium c* becomes the all-ones vector."""
    c_star = np.asarray(c_star, float)
    if np.any(c_star <= 0):
        raise NetworkError("equilibrium must be interior to be normalized")
    scaled = {("x", i): fx.const(float(c_star[i])) * fx.var(i) for i in range(net.n)}
    rates = [fx.substitute(r, scaled) for r in net.rates]
    S = net.S / c_star[:, None]
    new = ReactionNetwork(S, rates, tuple(np.asarray(net.c_f) / c_star), net.D_max)
    new_pairs = [ConservationPair(tuple((np.asarray(pr.p) * c_star).tolist()), pr.q) for pr in pairs]
    return new, new_pairs


def log_transform(net: ReactionNetwork) -> ControlAffineSystem:
    """Control-affine system in x = ln c with u = D - 1 in [-1, D_max - 1]."""
    n = net.n
    expo = {("x", i): fx.exp(fx.var(i)) for i in range(n)}
    rates = [fx.substitute(r, expo) for r in net.rates]
    drift, gain = [], []
    for i in range(n):
        e_minus = fx.exp(-fx.var(i))
        prod = fx.total(float(net.S[i, j]) * rates[j] for j in range(net.m) if net.S[i, j] != 0)
        gi = net.c_f[i] * e_minus - 1.0
        gain.append(gi)
        drift.append(gi + e_minus * prod)
    return ControlAffineSystem(tuple(drift), tuple(gain), ControlSet.interval(1.0, net.D_max - 1.0))


# ---------------------------------------------------------------- stabilizer configuration


@dataclass(frozen=True, eq=False)
class StabilizerConfig:
    """Gains on the |ln c| scale, Q~ over c > 0, epsilon, omega, local gain vector and radius."""

    gains: GainMatrix
    Qtilde: Callable
    epsilon: float
    omega: float
    kvec: tuple
    radius: float

    def __post_init__(self):
        if not (self.epsilon > 0 and self.omega > 0):
            raise NetworkError("epsilon and omega must be positive")


def reactant_load(S: np.ndarray) -> float:
    """max_i of the total consumption coefficient sum_{S_ij < 0} |S_ij|."""
    S = np.asarray(S, float)
    return float(np.max(np.sum(np.where(S < 0, -S, 0.0), axis=1)))


def eta_expr(net: ReactionNetwork, cons: ConservationData, eps: float) -> fx.Expr:
    terms = []
    for pr in cons.pairs:
        p = np.asarray(pr.p)
        pcf = float(p @ np.asarray(net.c_f))
        lin = fx.total(-float(p[i]) * fx.exp(fx.var(i)) for i in range(net.n) if p[i] != 0)
        terms.append(fx.maximum(pcf + lin, 0.0) ** 2)
    return fx.total(terms) - eps


def K_function(net: ReactionNetwork, cons: ConservationData, eps: float) -> Callable:
    """K(eta) = D_max + sigma g(b + (N + eps) R / 2 + (R / 2) eta)."""
    sig = reactant_load(net.S)
    base = cons.b + (cons.N + eps) * cons.R / 2

    def K(eta):
        arg = np.maximum(base + 0.5 * cons.R * np.asarray(eta, float), 0.0)
        return net.D_max + sig * cons.gfun(arg)
    return K


def build_stabilizer_system(net: ReactionNetwork, cons: ConservationData, cfg: StabilizerConfig):
    """(log-coordinate system, CorollaryConfig) for the dilution-rate stabilizer."""
    system = log_transform(net)
    eps = cfg.epsilon
    eta = eta_expr(net, cons, eps)
    W = 1.0 + eps + eta + fx.total(fx.exp(-fx.var(i)) for i in range(net.n))
    dval = min(eps, cfg.omega)
    Qt = cfg.Qtilde
    ccfg = CorollaryConfig(system, cfg.gains, lambda x: Qt(np.exp(np.asarray(x, float))), eta, W,
                           lambda e: dval * np.ones_like(np.asarray(e, float)),
                           K_function(net, cons, eps), eps, tuple(cfg.kvec), cfg.radius)
    return system, ccfg


def build_stabilizer_spec(net: ReactionNetwork, cons: ConservationData, cfg: StabilizerConfig) -> VRCLFSpec:
    system, ccfg = build_stabilizer_system(net, cons, cfg)
    if np.max(np.abs(net.vector_field(np.ones(net.n), 1.0))) > 1e-9:
        raise NetworkError("the all-ones vector is not an equilibrium at D = 1; normalize first")
    eta0 = fx.ScalarField(ccfg.eta, net.n).value([0.0] * net.n)
    if not eta0 < 0:
        raise NetworkError(f"eta(0) = {eta0} is not negative")
    return build_spec(ccfg)


def _lnc_gain_mask(gains: GainMatrix, L: np.ndarray) -> np.ndarray:
    return gain_antecedents(gains, L)


def check_stabilizer_conditions(net: ReactionNetwork, cons: ConservationData, cfg: StabilizerConfig, C,
                           local_radius: float | None = None) -> ImplicationReport:
    """Sampled pairwise, boundary, shell and bound conditions in concentration coordinates."""
    C = np.asarray(C, float)
    n, N = net.n, C.shape[1]
    eps, om = cfg.epsilon, cfg.omega
    cf = np.asarray(net.c_f)[:, None]
    rep = ImplicationReport()

    def parts(Cm):
        L = np.log(Cm)
        Sv = net.S @ net.rate_values(Cm)
        Q = np.vstack([np.asarray(cfg.Qtilde(Cm[i]), float) * np.ones(Cm.shape[1]) for i in range(n)])
        cons_sum = (cons.defect(net.c_f, Cm) ** 2).sum(axis=0)
        return L, Sv, Q, cons_sum, _lnc_gain_mask(cfg.gains, L)

    L, Sv, Q, cs, act = parts(C)
    slab = cs <= 2 * eps
    lo, hi = np.minimum(cf, 1.0), np.maximum(cf, 1.0)
    between = (lo < C) & (C < hi)
    above = C > hi
    below = C < lo
    cQ = C * L * Q
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cases = ((between[i] & above[j]) | (between[i] & below[j])
                     | (above[i] & between[j]) | (below[i] & between[j]))
            ant = act[i] & act[j] & slab & cases
            num = (cf[j] - C[j]) * Sv[i] - (cf[i] - C[i]) * Sv[j]
            den = cQ[i] * (cf[j] - C[j]) - cQ[j] * (cf[i] - C[i])
            with np.errstate(all="ignore"):
                ratio = num / den
            rep.add(record("5.10", C, ant, ratio + 1.0, index=(i, j), scale=np.abs(ratio)))
    for i in range(n):
        Ci = C.copy()
        Ci[i] = net.c_f[i]
        if net.c_f[i] <= 0:
            continue
        Li, Svi, Qi, csi, acti = parts(Ci)
        ant = (csi <= 2 * eps) & acti[i]
        lcf = math.log(net.c_f[i])
        lhs = lcf * Svi[i] + net.c_f[i] * lcf ** 2 * Qi[i]
        rep.add(record("5.11", Ci, ant, lhs, index=(i,), scale=np.abs(lcf * Svi[i]) + np.abs(lcf ** 2 * Qi[i])))
    for i in range(n):
        shell = act[i] & (cs >= eps) & slab & between[i]
        with np.errstate(all="ignore"):
            rhs = -(2 * eps / (cf[i] - C[i])) * (cQ[i] + Sv[i])
        rep.add(record("5.12", C, shell, om - rhs, index=(i,), scale=np.abs(rhs) + om))
        core = act[i] & slab & between[i]
        rep.add(record("5.13", C, core, L[i] * Sv[i] + C[i] * L[i] ** 2 * Q[i], strict=True, index=(i,)))
        outside = act[i] & slab & (above[i] | below[i])
        rep.add(record("5.14", C, outside,
                       L[i] * Sv[i] + C[i] * L[i] ** 2 * Q[i] + net.D_max * (cf[i] - C[i]) * L[i],
                       strict=True, index=(i,)))

    r = 2 * cfg.radius if local_radius is None else local_radius
    ball = np.linalg.norm(L, axis=0) <= r
    D = 1.0 + np.asarray(cfg.kvec, float) @ L
    for i in range(n):
        lhs = D * L[i] * (cf[i] - C[i]) + L[i] * Sv[i] + L[i] ** 2 * C[i] * Q[i]
        rep.add(record("local", C, ball & act[i], lhs, index=(i,),
                       scale=np.abs(D * L[i] * (cf[i] - C[i])) + np.abs(L[i] * Sv[i])))
    sg = check_small_gain(cfg.gains)
    rep.add(ImplicationResult("3.10", tested=len(sg.cycles), hits=len(sg.cycles),
                              violations=int(sg.verdict is Verdict.VIOLATED), note=sg.verdict.value))
    return rep


def sample_slab(net: ReactionNetwork, cons: ConservationData, eps: float, N: int,
                rng: np.random.Generator, log_span: float = 6.0) -> np.ndarray:
    """Concentrations with sum of squared conservation defects <= 2 eps, by rejection."""
    P = cons.P()
    pcf = P @ np.asarray(net.c_f)
    # coordinatewise box from the defect bound: p' c >= p' c_f - sqrt(2 eps) with p <= 0 entries
    box = []
    for i in range(net.n):
        caps = [(-(pcf[l] - math.sqrt(2 * eps))) / -P[l, i] for l in range(len(pcf)) if P[l, i] < 0]
        box.append(min(caps) if caps else math.exp(log_span))
    box = np.array(box)
    out = []
    total = 0
    while total < N:
        m = max(2 * (N - total), 64)
        C = np.vstack([sample_concentrations(1, m, rng, upper=box[i], lower=box[i] * math.exp(-2 * log_span))[0]
                       for i in range(net.n)])
        keep = (cons.defect(net.c_f, C) ** 2).sum(axis=0) <= 2 * eps
        out.append(C[:, keep])
        total += int(keep.sum())
    return np.hstack(out)[:, :N]


# ---------------------------------------------------------------- feedback in concentration space


class DilutionFeedback:
    """D(c) = clamp(1 + u(ln c), 0, D_max) built on the log-coordinate feedback."""

    def __init__(self, net: ReactionNetwork, law: FeedbackLaw):
        self.net = net
        self.law = law

    def u_of_x(self, x) -> float:
        return self.law(x)

    def __call__(self, c) -> float:
        x = np.log(np.asarray(c, float))
        return float(min(max(1.0 + self.law(x), 0.0), self.net.D_max))


def stabilize(net: ReactionNetwork, cons: ConservationData, cfg: StabilizerConfig) -> DilutionFeedback:
    spec = build_stabilizer_spec(net, cons, cfg)
    return DilutionFeedback(net, synthesize(log_transform(net), spec))


def dmax_bound(theta: float, mu: float) -> tuple[float, float]:
    """Lower bounds on D_max for the normalized single-reaction network."""
    if not theta > 0:
        raise NetworkError("theta must be positive")
    if not 0 < mu < 1.0 / theta:
        raise NetworkError("need 0 < mu < 1/theta (positive product feed)")
    return (1 + mu) ** 2, (1 + mu) * (theta * (1 + mu) ** 2 + 1) / (mu * theta)


# ---------------------------------------------------------------- the single-reaction instance


def example51_network(k: float, c1f: float, c2f: float, D_max: float) -> ReactionNetwork:
    """1 -> 2 with rate k c1 c2^2 (cubic autocatalysis)."""
    x0, x1 = fx.var(0), fx.var(1)
    return ReactionNetwork([[-1.0], [1.0]], [k * x0 * x1 * x1], (c1f, c2f), D_max)


def normalized_example51(theta: float, mu: float, D_max: float) -> ReactionNetwork:
    """The instance rescaled so the chosen equilibrium sits at (1, 1)."""
    if not theta > 0:
        raise NetworkError("theta must be positive")
    if not 0 < mu < 1.0 / theta:
        raise NetworkError("need 0 < mu < 1/theta; mu = 1/theta makes the product feed vanish")
    x0, x1 = fx.var(0), fx.var(1)
    return ReactionNetwork([[-1.0], [mu]], [theta * x0 * x1 * x1], (1 + theta, 1 - mu * theta), D_max)


def example51_conservation(theta: float, mu: float) -> ConservationData:
    """p = (-mu, -1), q = 0; b = (1+mu)/mu, R = 1/mu bound max c_i; g(s) = theta s^2."""
    S = np.array([[-1.0], [mu]])
    pair = validate_pair(S, (-mu, -1.0), (0.0,))
    b = (1 + mu) / min(mu, 1.0)
    R = 1.0 / min(mu, 1.0)
    return ConservationData((pair,), b, R, Power(theta, 2.0))


def _gamma_inv(gamma: MonotoneFn, s: float) -> float:
    if isinstance(gamma, Identity):
        return float(s)
    if isinstance(gamma, Linear):
        return float(s) / gamma.slope
    return float(invert(gamma, s))


def example51_constants(theta: float, mu: float, lam: float, gamma: MonotoneFn, eps: float):
    """(A, omega) at the largest values permitted by the shell-condition bounds."""
    e1 = math.exp(-2 * _gamma_inv(gamma, math.log(1 + theta)))
    e2 = math.exp(-float(gamma(abs(math.log(1 - mu * theta)))) / lam)
    A = min(1.0, e1 / (2 * (1 + theta)), e2)
    omega = min(eps * theta / (1 + theta) * e1, eps * (1 - mu * theta) ** 2 * e2)
    return A, omega


def example51_Qtilde(theta: float, mu: float, lam: float, gamma: MonotoneFn, A: float) -> Callable:
    """Vectorized Q~ on c > 0 with the value at c = 1 filled in by continuity."""
    floor_ = (1 - mu * theta) ** 2

    def Q(c):
        c = np.asarray(c, float)
        scalar = c.ndim == 0
        c = np.atleast_1d(c)
        out = np.full(c.shape, A * floor_ / 2)
        L = np.abs(np.log(c))
        ne = L > 0
        if np.any(ne):
            Ln = L[ne]
            ginv = np.array([_gamma_inv(gamma, v) for v in Ln]) if not isinstance(gamma, (Identity, Linear)) \
                else (Ln if isinstance(gamma, Identity) else Ln / gamma.slope)
            expo = np.maximum(np.asarray(gamma(Ln), float) / lam, 2 * ginv)
            out[ne] = (A * np.minimum(1.0, np.abs(1 - c[ne])) / (2 * Ln)
                       * np.minimum(c[ne], floor_) * np.exp(-expo))
        return float(out[0]) if scalar else out
    return Q


def example51_gains(lam: float, gamma: MonotoneFn) -> GainMatrix:
    from .corollary_lab import scaled_inverse
    return GainMatrix.from_dict(2, {(0, 1): gamma, (1, 0): scaled_inverse(gamma, lam)})


@dataclass
class Example51Instance:
    network: ReactionNetwork
    conservation: ConservationData
    config: StabilizerConfig
    theta: float
    mu: float
    lam: float
    A: float


def choose_radius(net, cons, cfg_fn, rng, r0: float = 0.5, samples: int = 4000, halvings: int = 30) -> float:
    """Largest r = r0 / 2^j whose 2r-ball passes the local premise and stays in {eta < eps/5}."""
    r = r0
    for _ in range(halvings):
        cfg = cfg_fn(r)
        X = rng.normal(size=(net.n, samples))
        X *= 2 * r * rng.uniform(0, 1, samples) ** (1 / net.n) / np.linalg.norm(X, axis=0)
        C = np.exp(X)
        rep = check_stabilizer_conditions(net, cons, cfg, C, local_radius=2 * r)
        eta = fx.FieldBundle([eta_expr(net, cons, cfg.epsilon)], net.n).batch_values_and_grads(X)[0][0]
        ok_local = all(res.passed for res in rep.results.values() if res.id == "local")
        if ok_local and np.all(eta < cfg.epsilon / 5):
            return r
        r *= 0.5
    raise NetworkError("no admissible locality radius found")


def example51_instance(theta: float = 1.0, mu: float = 0.5, D_max: float = 10.0, lam: float = 0.5,
                       gamma: MonotoneFn = Identity(), eps: float = 0.25, kvec=(1.0, 2.0),
                       radius: float | None = None, seed: int = 0) -> Example51Instance:
    net = normalized_example51(theta, mu, D_max)
    cons = example51_conservation(theta, mu)
    A, omega = example51_constants(theta, mu, lam, gamma, eps)
    Q = example51_Qtilde(theta, mu, lam, gamma, A)
    gains = example51_gains(lam, gamma)
    make = lambda r: StabilizerConfig(gains, Q, eps, omega, tuple(kvec), r)
    if radius is None:
        radius = choose_radius(net, cons, make, np.random.default_rng(seed))
    return Example51Instance(net, cons, make(radius), theta, mu, lam, A)
