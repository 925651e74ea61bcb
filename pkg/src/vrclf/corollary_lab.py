"""Quadratic-component VRCLFs for systems x_i' = f_i(x) + g_i(x) u, and two worked instances.

Each state coordinate gets its own Lyapunov component V_i = x_i^2 / 2, and
the gains gamma~ are stated on the |x_i| scale.  ``build_spec`` translates
everything to the V scale used by :mod:`vrclf.vclf_core`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fields as fx
from .feasibility import ControlSet
from .gain_calculus import (Compose, GainMatrix, Identity, Linear, MonotoneFn, Power, ScaledInverse,
                            Verdict, Zero, check_small_gain, invert)
from .vclf_core import (ANTECEDENT_SLACK, ControlAffineSystem, ImplicationReport, ImplicationResult,
                        VRCLFSpec, Witness, record)


@dataclass(frozen=True, eq=False)
class CorollaryConfig:
    """Data for the quadratic-component construction.

    ``Q`` is a vectorized positive function of a real argument, ``kvec`` the
    local linear law and ``kbar`` the outer law used for the eta/W conditions.
    """

    system: ControlAffineSystem
    gains: GainMatrix
    Q: Callable
    eta: fx.Expr
    W: fx.Expr
    delta: Callable
    Kfun: Callable
    epsilon: float
    kvec: tuple
    radius: float
    kbar: fx.Expr = field(default_factory=lambda: fx.const(0.0))

    @property
    def n(self) -> int:
        return self.system.n


def scaled_inverse(gamma: MonotoneFn, scale: float) -> MonotoneFn:
    """s -> gamma^{-1}(scale * s), in closed form for linear and power gains."""
    if isinstance(gamma, Identity):
        return Linear(scale)
    if isinstance(gamma, Linear) and gamma.slope > 0:
        return Linear(scale / gamma.slope)
    if isinstance(gamma, Power) and gamma.coeff > 0:
        p = 1.0 / gamma.exponent
        return Power((scale / gamma.coeff) ** p, p)
    return ScaledInverse(gamma, scale, 1.0)


def gain_expr(gamma: MonotoneFn, arg: fx.Expr) -> fx.Expr:
    """Expression for gamma(arg) when gamma is a closed-form gain."""
    if isinstance(gamma, Zero):
        return fx.const(0.0)
    if isinstance(gamma, Identity):
        return arg
    if isinstance(gamma, Linear):
        return gamma.slope * arg
    if isinstance(gamma, Power):
        return gamma.coeff * arg ** gamma.exponent
    if isinstance(gamma, Compose):
        return gain_expr(gamma.outer, gain_expr(gamma.inner, arg))
    raise TypeError(f"no closed-form expression for {type(gamma).__name__}")


def quadratic_scale_gain(g: MonotoneFn) -> MonotoneFn:
    """s -> (g(sqrt(2 s)))^2 / 2, the V-scale image of an |x|-scale gain."""
    if g.is_zero:
        return Zero()
    return Compose(Power(0.5, 2.0), Compose(g, Power(math.sqrt(2.0), 0.5)))


def rho_from_Q(Q: Callable) -> Callable:
    def rho(s):
        s = np.maximum(np.asarray(s, float), 0.0)
        r = np.sqrt(2 * s)
        return 2 * s * np.minimum(Q(r), Q(-r))
    return rho


def build_spec(cfg: CorollaryConfig) -> VRCLFSpec:
    report = check_small_gain(cfg.gains)
    if report.verdict is Verdict.VIOLATED:
        raise ValueError(f"small-gain condition fails on cycle {report.witness_cycle}")
    n = cfg.n
    V = [0.5 * fx.var(i) ** 2 for i in range(n)]
    G = GainMatrix(tuple(tuple(quadratic_scale_gain(cfg.gains[i, j]) if i != j else Zero()
                               for j in range(n)) for i in range(n)))
    return VRCLFSpec(tuple(V), cfg.eta, cfg.W, cfg.delta, cfg.Kfun, rho_from_Q(cfg.Q), cfg.epsilon,
                     G, np.asarray(cfg.kvec, float), cfg.radius,
                     a1=Power(1.0 / (2 * n), 2.0), a2=Power(0.5, 2.0))


# ---------------------------------------------------------------- sampled checks


def gain_antecedents(G: GainMatrix, X: np.ndarray) -> np.ndarray:
    """(n, N) mask of max_s gamma~_{i,s}(|x_s|) <= |x_i|."""
    A = np.abs(X)
    return np.vstack([G.max_influence(i, A) <= A[i] * (1 + ANTECEDENT_SLACK) for i in range(G.k)])


def check_corollary_implications(cfg: CorollaryConfig, X) -> ImplicationReport:
    """Sample the coordinatewise implications, the local-law premise and the outer-law bounds."""
    X = np.asarray(X, float)
    sysm = cfg.system
    n, N = cfg.n, X.shape[1]
    f, g = sysm.batch_fields(X)
    act = gain_antecedents(cfg.gains, X)
    aux = fx.FieldBundle([cfg.eta, cfg.W, cfg.kbar], n, 0, with_grad=(0, 1))
    vals, grads = aux.batch_values_and_grads(X)
    eta, W, kbar = vals
    geta, gW = grads
    Qx = np.vstack([np.asarray(cfg.Q(X[i]), float) * np.ones(N) for i in range(n)])
    eps = cfg.epsilon
    low = eta <= eps
    shell = (eta >= 0) & low
    rep = ImplicationReport()
    xQ = X * Qx
    slack = ANTECEDENT_SLACK

    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ant = act[i] & act[j] & low & (X[i] * X[j] * g[i] * g[j] < -slack)
            with np.errstate(all="ignore"):
                ratio = (f[i] * g[j] - f[j] * g[i]) / (xQ[i] * g[j] - xQ[j] * g[i])
            rep.add(record("4.2", X, ant, ratio + 1.0, index=(i, j), scale=np.abs(ratio)))
    for i in range(n):
        ant = (np.abs(g[i]) <= slack) & low & act[i]
        rep.add(record("4.3", X, ant, X[i] * f[i] + X[i] * xQ[i], index=(i,),
                       scale=np.abs(X[i] * f[i]) + np.abs(X[i] * xQ[i])))

    eta_g = np.einsum("jn,jn->n", geta, g)
    eta_f = np.einsum("jn,jn->n", geta, f)
    W_g = np.einsum("jn,jn->n", gW, g)
    W_f = np.einsum("jn,jn->n", gW, f)
    delta = cfg.delta(eta)
    K = cfg.Kfun(eta)
    for j in range(n):
        # u_j is only read where g_j != 0 (the antecedents force it)
        with np.errstate(all="ignore"):
            u_j = -(f[j] + xQ[j]) / g[j]
            r_eta = eta_f + eta_g * u_j + delta
            s_eta = np.abs(eta_f) + np.abs(eta_g * u_j) + delta
            r_W = W_f + W_g * u_j - K * W
            s_W = np.abs(W_f) + np.abs(W_g * u_j) + K * W
        ant = act[j] & shell & (X[j] * g[j] * eta_g < -slack)
        rep.add(record("4.4", X, ant, r_eta, index=(j,), scale=s_eta))
        ant = act[j] & shell & (X[j] * g[j] * W_g < -slack)
        rep.add(record("4.5", X, ant, r_W, index=(j,), scale=s_W))

    U = sysm.control
    if U.case == "P3":
        for i in range(n):
            xg = X[i] * g[i]
            base = X[i] * f[i] + X[i] * xQ[i]
            rep.add(record("4.6", X, act[i] & low & (xg > slack), base - U.a * xg, strict=True, index=(i,)))
            rep.add(record("4.7", X, act[i] & low & (xg < -slack), base + U.b * xg, strict=True, index=(i,)))

    kvec = np.asarray(cfg.kvec, float)
    u_loc = kvec @ X
    ball = np.linalg.norm(X, axis=0) <= 2 * cfg.radius
    for i in range(n):
        r = X[i] * f[i] + X[i] * g[i] * u_loc + X[i] * xQ[i]
        rep.add(record("local", X, ball & act[i], r, index=(i,), scale=np.abs(X[i] * f[i]) + np.abs(X[i] * xQ[i])))

    outer = eta >= 0
    rep.add(record("kbar-W", X, outer, W_f + W_g * kbar - K * W, scale=np.abs(W_f) + K * W))
    rep.add(record("kbar-eta", X, outer, eta_f + eta_g * kbar + delta, scale=np.abs(eta_f) + delta))
    rep.add(record("kbar-in-U", X, outer, np.maximum(U.lower - kbar, kbar - U.upper), scale=np.ones(N)))
    return rep


# ---------------------------------------------------------------- example: third-order system


def example43_g(lam: float, gamma: MonotoneFn) -> fx.Expr:
    """x1 x2 (|x1| - gamma(|x2|)) (gamma(|x2|) - lam |x1|), 0-based coordinates."""
    x1, x2 = fx.var(1), fx.var(2)
    gm = gain_expr(gamma, fx.absolute(x2))
    return x1 * x2 * (fx.absolute(x1) - gm) * (gm - lam * fx.absolute(x1))


def example43_system(g_expr: fx.Expr, control: ControlSet | None = None) -> ControlAffineSystem:
    x0, x1, x2 = fx.var(0), fx.var(1), fx.var(2)
    return ControlAffineSystem((-x0 + x1, -x1, x0 * x0), (fx.const(0.0), g_expr, fx.const(1.0)),
                               control or ControlSet.reals())


def example43_gains(lam: float, sigma: float, gamma: MonotoneFn) -> GainMatrix:
    return GainMatrix.from_dict(3, {
        (0, 1): Linear(1.0 / (1.0 - sigma)),
        (1, 0): Linear(lam * (1.0 - sigma)),
        (1, 2): gamma,
        (2, 0): scaled_inverse(gamma, lam * (1.0 - sigma)),
        (2, 1): scaled_inverse(gamma, lam),
    })


@dataclass
class LocalGainChoice:
    radius_ball: float       # radius of the ball where the local premise is needed
    gamma_lo: float
    gamma_hi: float
    lipschitz: float
    p_interval: tuple
    p: float
    halvings: int


def _gamma_bounds(gamma: MonotoneFn, r: float) -> tuple[float, float]:
    s = np.linspace(r * 1e-3, r, 400)
    ratio = gamma(s) / s
    return float(ratio.min()), float(ratio.max())


def _lipschitz(g_expr: fx.Expr, r: float, rng: np.random.Generator, samples: int = 4000) -> float:
    field_ = fx.ScalarField(g_expr, 3)
    X = rng.normal(size=(3, samples))
    X *= r * rng.uniform(0, 1, samples) ** (1 / 3) / np.linalg.norm(X, axis=0)
    _, G = field_.batch(X)
    return 1.2 * float(np.max(np.linalg.norm(G, axis=0)))


def choose_local_gain(lam, sigma, gamma, g_expr, r0=1.0, seed=0) -> LocalGainChoice:
    """Pick p inside the admissible open interval, halving the ball radius as needed."""
    rng = np.random.default_rng(seed)
    g0 = abs(fx.ScalarField(g_expr, 3).value([0.0, 0.0, 0.0]))
    r = r0
    for halving in range(41):
        lo_g, hi_g = _gamma_bounds(gamma, r)
        L = _lipschitz(g_expr, r, rng)
        lower = r * hi_g / (lam * (1 - sigma)) + sigma
        upper = lo_g * (1 - sigma) / (L * r + g0) if (L * r + g0) > 0 else math.inf
        if lower < upper:
            p = 0.5 * (lower + upper) if math.isfinite(upper) else 2 * lower
            return LocalGainChoice(r, lo_g, hi_g, L, (lower, upper), p, halving)
        r *= 0.5
    raise ValueError("no admissible local gain found after 40 halvings of the radius")


def example43_instance(lam: float = 0.5, sigma: float = 0.5, gamma: MonotoneFn = Identity(),
                       r0: float = 1.0, seed: int = 0):
    """(system, config, local-gain choice); eta is constant negative so only the V-conditions bind."""
    if not (0 < lam < 1 and 0 < sigma < 1):
        raise ValueError("lambda and sigma must lie in (0, 1)")
    g_expr = example43_g(lam, gamma)
    system = example43_system(g_expr)
    choice = choose_local_gain(lam, sigma, gamma, g_expr, r0, seed)
    Q = lambda x: sigma * np.ones_like(np.asarray(x, float))
    cfg = CorollaryConfig(system, example43_gains(lam, sigma, gamma), Q, fx.const(-1.0), fx.const(1.0),
                          lambda e: np.ones_like(np.asarray(e, float)),
                          lambda e: np.ones_like(np.asarray(e, float)),
                          epsilon=1.0, kvec=(0.0, 0.0, -choice.p), radius=0.5 * choice.radius_ball)
    return system, cfg, choice


def check_cross_condition(lam, sigma, gamma: MonotoneFn, g_expr: fx.Expr, Q: Callable, X) -> ImplicationResult:
    """Sampled check of the coordinate-3 cross condition for the third-order example."""
    X = np.asarray(X, float)
    gv = fx.FieldBundle([g_expr], 3).batch_values_and_grads(X)[0][0]
    a1, a2, a3 = np.abs(X)
    G3 = gamma(a3)
    ant = ((lam * (1 - sigma) * a1 <= G3) & (lam * a2 <= G3) & (G3 <= a2)
           & (X[1] * X[2] * gv < 0))
    lhs = X[1] ** 2 + X[1] * X[0] ** 2 * gv
    rhs = np.abs(X[1] * X[2] * gv) * Q(X[2]) + X[1] ** 2 * Q(X[1])
    res = record("4.10", X, ant, rhs - lhs, scale=np.abs(lhs) + np.abs(rhs))
    if res.hits == 0:
        res.note = "vacuous: the antecedent x2 x3 g(x) < 0 never holds on the gain region"
    return res


@dataclass
class SingleCLFWitness:
    p: float
    q: float
    x: tuple
    lhs: float                # x1^2 - x1 x2 + p x2^2
    rhs: float                # q x1^2 x3
    constraint_residual: float  # |q x3 + p x2 g(x)|


def single_clf_witness(p: float, q: float, lam: float, gamma: MonotoneFn, g_expr: fx.Expr,
                       max_power: int = 30) -> SingleCLFWitness | None:
    """Point on {q x3 = -p x2 g(x)} where the single quadratic CLF condition fails.

    Uses x1 = 1 and the positive root x3 of the constraint as x2 = 10^-k shrinks.
    """
    gfield = fx.ScalarField(g_expr, 3)
    for k in range(max_power + 1):
        t = 10.0 ** (-k)
        G = 0.5 * ((1 + lam) * t + math.sqrt((1 - lam) ** 2 * t * t + 4 * q / (p * t * t)))
        x3 = float(invert(gamma, G)) if not isinstance(gamma, Identity) else G
        x = (1.0, t, x3)
        gval = gfield.value(list(x))
        resid = abs(q * x3 + p * t * gval)
        lhs = 1.0 - t + p * t * t
        rhs = q * x3
        if lhs <= rhs and resid <= 1e-8 * max(1.0, abs(q * x3)):
            return SingleCLFWitness(p, q, x, lhs, rhs, resid)
    return None


# ---------------------------------------------------------------- example: relaxed outer conditions


@dataclass
class Example44Result:
    report: ImplicationReport
    constants: dict
    relaxation: dict


def example44_config(g_expr: fx.Expr, lam=0.5, sigma=0.5, gamma: MonotoneFn = Identity(),
                     a=0.05, c=0.05, eps=0.05, Qconst=None, radius=0.05) -> CorollaryConfig:
    if not a >= c > 0:
        raise ValueError("need a >= c > 0")
    x0, x1, x2 = fx.var(0), fx.var(1), fx.var(2)
    system = example43_system(g_expr)
    qv = sigma if Qconst is None else Qconst
    return CorollaryConfig(
        system, example43_gains(lam, sigma, gamma),
        lambda x: qv * np.ones_like(np.asarray(x, float)),
        -a + 0.5 * (x0 * x0 + x1 * x1),
        1 + 0.5 * (x0 * x0 + x1 * x1 + x2 * x2),
        lambda e: c * np.ones_like(np.asarray(e, float)),
        lambda e: 2 * (np.asarray(e, float) + a) + 1.0 / c,
        epsilon=eps, kvec=(0.0, 0.0, -1.0), radius=radius)


def example44_conditions(g_expr: fx.Expr, X, lam=0.5, sigma=0.5, gamma: MonotoneFn = Identity(),
                         a=0.05, c=0.05, eps=0.05, R=None, q: Callable | None = None) -> Example44Result:
    """Relaxed cross condition on the compact slab plus the outer-law bounds, by sampling."""
    X = np.asarray(X, float)
    R = 2 * (a + eps) if R is None else R
    if 2 * (a + eps) > R:
        raise ValueError("need 2 (a + eps) <= R")
    qf = q or (lambda x: sigma * np.ones_like(np.asarray(x, float)))
    cfg = example44_config(g_expr, lam, sigma, gamma, a, c, eps)
    rep = check_corollary_implications(cfg, X)

    gv = fx.FieldBundle([g_expr], 3).batch_values_and_grads(X)[0][0]
    a1, a2, a3 = np.abs(X)
    G3 = gamma(a3)
    region = (lam * (1 - sigma) * a1 <= G3) & (lam * a2 <= G3) & (G3 <= a2)
    slab = X[0] ** 2 + X[1] ** 2 <= R
    cross = X[1] * X[2] * gv < 0
    lhs = X[1] ** 2 * (1 - qf(X[1])) + X[1] * X[0] ** 2 * gv
    rhs = np.abs(X[1] * X[2] * gv) * qf(X[2])
    rep.add(record("4.16", X, region & slab & cross, rhs - lhs, scale=np.abs(lhs) + np.abs(rhs)))

    eta = -a + 0.5 * (X[0] ** 2 + X[1] ** 2)
    W = 1 + 0.5 * (X ** 2).sum(axis=0)
    K = 2 * (eta + a) + 1 / c
    dW = -X[0] ** 2 + X[0] * X[1] - X[1] ** 2 + X[2] * X[0] ** 2
    deta = -X[0] ** 2 + X[0] * X[1] - X[1] ** 2
    outer = eta >= 0
    rep.add(record("4.18", X, outer, dW - K * W, scale=np.abs(dW) + K * W))
    rep.add(record("4.19", X, outer, deta + (eta + a), scale=np.abs(deta)))
    rep.add(record("4.19-delta", X, outer, deta + c, scale=np.abs(deta)))

    sign_region = region & slab
    relax = {
        "slab_points": int(sign_region.sum()),
        "x2_g_nonnegative_on_slab": bool(np.all(X[1][sign_region] * gv[sign_region] >= 0)),
        "cross_points_outside_slab": int((region & cross & ~slab).sum()),
    }
    return Example44Result(rep, {"a": a, "c": c, "eps": eps, "R": R, "lambda": lam, "sigma": sigma},
                           relax)


def search_example44_constants(g_expr: fx.Expr, X, grid=(0.2, 0.1, 0.05, 0.02, 0.01), **kw):
    """First (a, c, eps) on a small descending grid whose report passes, else the last tried."""
    last = None
    for a in grid:
        for c in [v for v in grid if v <= a]:
            for eps in grid:
                res = example44_conditions(g_expr, X, a=a, c=c, eps=eps, **kw)
                last = res
                if res.report.passed:
                    return res
    return last
