"""Sample-and-hold simulation, trajectory monitors and empirical KL envelopes.

Integration uses scipy's Dormand-Prince 4(5) stepper restarted after every
accepted step, so the control (and disturbance) is frozen over each step and
re-evaluated at its end.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import RK45
from scipy.optimize import isotonic_regression

from .vclf_core import ControlAffineSystem, SpecEvaluator, VRCLFSpec

MONITOR_RTOL = 1e-5
HOLD_MAX_STEP = 0.05
MIN_PER_BIN = 5


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float, x):
        super().__init__(f"{message} at t = {t:.6g}, x = {list(map(float, x))}")
        self.t = t
        self.x = list(map(float, x))


# ---------------------------------------------------------------- disturbances


@dataclass(frozen=True)
class DisturbanceSignal:
    """Constant, piecewise-constant or seeded random (uniform over a box, fixed dwell)."""

    kind: str = "constant"
    value: tuple = ()
    times: tuple = ()
    values: tuple = ()
    box: tuple = ()
    dwell: float = 0.1
    seed: int = 0

    @classmethod
    def constant(cls, d=()) -> "DisturbanceSignal":
        return cls("constant", value=tuple(map(float, d)))

    @classmethod
    def piecewise(cls, times, values) -> "DisturbanceSignal":
        times = tuple(map(float, times))
        values = tuple(tuple(map(float, v)) for v in values)
        if len(values) != len(times) + 1:
            raise ValueError("piecewise signal needs one more value than switch times")
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise ValueError("switch times must be strictly increasing")
        return cls("piecewise", times=times, values=values)

    @classmethod
    def random(cls, box, dwell: float = 0.1, seed: int = 0) -> "DisturbanceSignal":
        if not dwell > 0:
            raise ValueError("dwell must be positive")
        return cls("random", box=tuple((float(a), float(b)) for a, b in box), dwell=dwell, seed=seed)

    def realize(self, T: float) -> tuple[np.ndarray, list]:
        """(switch times in (0, T), values on each piece) for the horizon T."""
        if self.kind == "constant":
            return np.array([]), [self.value]
        if self.kind == "piecewise":
            t = np.array([s for s in self.times if 0 < s < T])
            k0 = sum(1 for s in self.times if s <= 0)
            return t, list(self.values[k0:k0 + len(t) + 1])
        rng = np.random.default_rng(self.seed)
        t = np.arange(self.dwell, T, self.dwell)
        lo = np.array([a for a, _ in self.box])
        hi = np.array([b for _, b in self.box])
        vals = [tuple(rng.uniform(lo, hi)) for _ in range(len(t) + 1)]
        return t, vals

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in ((), None)}


# ---------------------------------------------------------------- integration


@dataclass(frozen=True)
class IntegratorOptions:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: float = math.inf
    min_step: float = 1e-14
    max_steps: int = 2_000_000
    stop_norm: float | None = None     # end early once |x| falls below this

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}


@dataclass
class Trajectory:
    t: np.ndarray           # (N,)
    x: np.ndarray           # (N, n)
    u: np.ndarray           # (N,) control held on [t_k, t_{k+1}); last entry is u(x_N)
    d: np.ndarray           # (N, l)
    steps: int = 0
    rejections: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)


def integrate(rhs: Callable, x0, T: float, control: Callable | None = None,
              disturbance: DisturbanceSignal | None = None, opts: IntegratorOptions = IntegratorOptions(),
              open_loop: Callable | None = None) -> Trajectory:
    """Integrate x' = rhs(x, u, d) with u held per step.

    ``control`` maps a state to u; ``open_loop`` maps a time to u; with neither
    u is 0.  Disturbance switch times are forced step boundaries.
    """
    if not T > 0:
        raise ValueError("horizon T must be positive")
    x = np.asarray(x0, float).copy()
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite initial state", 0.0, x)
    sig = disturbance or DisturbanceSignal.constant()
    switches, pieces = sig.realize(T)
    bounds = list(switches) + [T]
    ts, xs, us, ds = [0.0], [x.copy()], [], []
    t = 0.0
    h = None
    steps = rejections = 0
    piece = 0

    def u_at(tt, xx):
        if control is not None:
            return float(control(xx))
        if open_loop is not None:
            return float(open_loop(tt))
        return 0.0

    while t < T:
        while piece < len(bounds) - 1 and t >= bounds[piece]:
            piece += 1
        d = pieces[min(piece, len(pieces) - 1)]
        u = u_at(t, x)
        us.append(u)
        ds.append(d)
        solver = RK45(lambda _t, y: np.asarray(rhs(y, u, d), float), t, x, bounds[piece],
                      rtol=opts.rtol, atol=opts.atol, max_step=opts.max_step,
                      first_step=None if h is None else min(h, bounds[piece] - t))
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"step failed ({msg})", t, x)
        rejections += max(0, (solver.nfev - 1) // 6 - 1)
        steps += 1
        h_taken = solver.t - t
        if h_taken < opts.min_step and solver.t < bounds[piece]:
            raise IntegrationError("step size underflow", t, x)
        t, x = solver.t, solver.y.copy()
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite state", t, x)
        h = max(solver.h_abs if solver.h_abs is not None else h_taken, h_taken)
        ts.append(t)
        xs.append(x.copy())
        if steps >= opts.max_steps:
            raise IntegrationError("step budget exhausted", t, x)
        if opts.stop_norm is not None and np.linalg.norm(x) < opts.stop_norm:
            break
    us.append(u_at(t, x))
    ds.append(pieces[min(piece, len(pieces) - 1)])
    l = len(ds[0])
    return Trajectory(np.array(ts), np.array(xs), np.array(us), np.array(ds, float).reshape(len(ds), l),
                      steps, rejections)


def simulate(system: ControlAffineSystem, x0, T: float, feedback: Callable | None = None,
             disturbance: DisturbanceSignal | None = None, opts: IntegratorOptions | None = None,
             open_loop: Callable | None = None) -> Trajectory:
    """Closed-loop runs cap the hold interval at HOLD_MAX_STEP unless ``opts`` says otherwise."""
    if opts is None:
        opts = IntegratorOptions(max_step=HOLD_MAX_STEP) if feedback is not None else IntegratorOptions()
    if disturbance is None and system.l:
        disturbance = DisturbanceSignal.constant(system.d_points[0])
    return integrate(lambda x, u, d: system.rhs(x, u, d), x0, T, feedback, disturbance, opts, open_loop)


# ---------------------------------------------------------------- monitors


@dataclass
class MonitorViolation:
    condition: str
    t: float
    residual: float
    index: int = -1


@dataclass
class MonitorReport:
    checked: dict
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def counts(self) -> dict:
        out = {k: 0 for k in self.checked}
        for v in self.violations:
            out[v.condition] = out.get(v.condition, 0) + 1
        return out

    def to_json(self) -> dict:
        return {"passed": self.passed, "checked": dict(self.checked), "violations": self.counts(),
                "first_violations": [asdict(v) for v in self.violations[:20]]}


@dataclass
class Channels:
    V: np.ndarray        # (N, k)
    eta: np.ndarray
    W: np.ndarray
    active: np.ndarray   # (N, k) bool

    def bitmask(self) -> np.ndarray:
        w = 1 << np.arange(self.active.shape[1])
        return (self.active * w).sum(axis=1)


def channels(traj: Trajectory, system: ControlAffineSystem, spec: VRCLFSpec,
             evaluator: SpecEvaluator | None = None) -> Channels:
    ev = (evaluator or SpecEvaluator(system, spec)).batch(traj.x.T)
    return Channels(ev.V.T, ev.eta, ev.W, ev.active.T)


def monitor(traj: Trajectory, system: ControlAffineSystem, spec: VRCLFSpec, rtol: float = MONITOR_RTOL,
            evaluator: SpecEvaluator | None = None) -> MonitorReport:
    """Step-wise secant checks of the shifted closed-loop Lyapunov conditions.

    With h = eta - 2 eps / 5: sandwich bounds where h <= 0; eta decrease by
    delta/2 and W growth by 2K where h >= 0; V_i decrease by rho/2 for indices
    active at both ends of a step where h <= 0.  Right-hand sides use the
    trapezoid average over the step.
    """
    ch = channels(traj, system, spec, evaluator)
    eps = spec.epsilon
    h = ch.eta - 2 * eps / 5
    dt = np.diff(traj.t)
    checked = {"2.2": 0, "2.3": 0, "2.4": 0, "2.5": 0}
    viol: list = []

    def flag(name, mask, resid, rate, idx=-1):
        tol = rtol * (1 + np.abs(rate))
        checked[name] += int(mask.sum())
        for k in np.nonzero(mask & ~(resid <= tol))[0]:
            viol.append(MonitorViolation(name, float(traj.t[k]), float(resid[k]), idx))

    if spec.a1 is not None and spec.a2 is not None:
        nx = traj.norms()
        vmax = ch.V.max(axis=1)
        lo = spec.a1(nx) - vmax
        hi = vmax - spec.a2(nx)
        m = h <= 0
        flag("2.2", m, np.maximum(lo, hi), vmax)
    start, end = slice(0, -1), slice(1, None)
    up = (h[start] >= 0) & (dt > 0)
    deta = np.diff(ch.eta) / np.where(dt > 0, dt, 1)
    dl = 0.25 * (spec.delta(ch.eta[start]) + spec.delta(ch.eta[end]))
    flag("2.3", up, deta + dl, deta)
    dW = np.diff(ch.W) / np.where(dt > 0, dt, 1)
    KW = spec.Kfun(ch.eta) * ch.W
    flag("2.4", up, dW - (KW[start] + KW[end]), dW)
    low = (h[start] <= 0) & (dt > 0)
    for i in range(spec.k):
        Vi = ch.V[:, i]
        both = ch.active[start, i] & ch.active[end, i] & low & (traj.x[start].any(axis=1))
        dV = np.diff(Vi) / np.where(dt > 0, dt, 1)
        r = spec.rho(np.maximum(Vi, 0.0))
        flag("2.5", both, dV + 0.25 * (r[start] + r[end]), dV, i)
    return MonitorReport(checked, viol)


# ---------------------------------------------------------------- KL envelope


@dataclass
class KLEstimate:
    bin_edges: np.ndarray       # (B + 1,) on |x0|
    t_grid: np.ndarray          # (M,)
    raw: np.ndarray             # (B, M) empirical max of |x(t)|
    envelope: np.ndarray        # (B, M) smallest nonincreasing upper bound of raw
    isotonic: np.ndarray        # (B, M) least-squares nonincreasing fit of raw
    counts: np.ndarray          # trajectories per bin
    monotonicity_violations: int
    threshold: float

    @property
    def final_ratio(self) -> np.ndarray:
        return self.envelope[:, -1] / self.bin_edges[1:]

    @property
    def verdict(self) -> bool:
        return bool(np.all(self.final_ratio < self.threshold))

    def to_json(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "counts": self.counts.tolist(),
                "final_envelope": self.envelope[:, -1].tolist(), "final_ratio": self.final_ratio.tolist(),
                "monotonicity_violations": self.monotonicity_violations, "threshold": self.threshold,
                "verdict": "pass" if self.verdict else "fail"}


class InsufficientBatch(ValueError):
    pass


def estimate_kl(trajs: Sequence[Trajectory], bins: int | None = None, t_points: int = 200,
                threshold: float = 1e-3, min_per_bin: int = MIN_PER_BIN) -> KLEstimate:
    """Per-|x0|-bin max of |x(t)| with monotone smoothing.

    Bins hold equal counts.  The verdict passes when every bin's envelope at the
    final time is below ``threshold`` times the bin's outer radius.
    """
    if len(trajs) < min_per_bin:
        raise InsufficientBatch(f"need at least {min_per_bin} trajectories, got {len(trajs)}")
    nb = bins or max(1, len(trajs) // min_per_bin)
    if len(trajs) < nb * min_per_bin:
        raise InsufficientBatch(f"{len(trajs)} trajectories cannot fill {nb} bins of {min_per_bin}")
    T = min(float(tr.t[-1]) for tr in trajs)
    tg = np.linspace(0.0, T, t_points)
    r0 = np.array([np.linalg.norm(tr.x[0]) for tr in trajs])
    order = np.argsort(r0, kind="stable")
    groups = np.array_split(order, nb)
    edges = [0.0] + [float(r0[g].max()) for g in groups]
    raw = np.zeros((nb, t_points))
    for b, g in enumerate(groups):
        for idx in g:
            tr = trajs[idx]
            raw[b] = np.maximum(raw[b], np.interp(tg, tr.t, tr.norms()))
    env = np.maximum.accumulate(raw[:, ::-1], axis=1)[:, ::-1]
    iso = np.vstack([isotonic_regression(row, increasing=False).x for row in raw])
    mv = int(np.sum(np.diff(raw, axis=1) > 0))
    return KLEstimate(np.array(edges), tg, raw, env, iso, np.array([len(g) for g in groups]), mv, threshold)


# ---------------------------------------------------------------- output


CSV_HEADER_FIXED = ("t",)


def trajectory_rows(traj: Trajectory, ch: Channels | None = None, state_map: Callable | None = None,
                    state_prefix: str = "x", control_map: Callable | None = None,
                    control_name: str = "u") -> tuple[list, list]:
    n = traj.x.shape[1]
    states = traj.x if state_map is None else state_map(traj.x)
    ctrl = traj.u if control_map is None else control_map(traj.u)
    header = ["t"] + [f"{state_prefix}_{i + 1}" for i in range(n)] + [control_name]
    if ch is not None:
        header += ["eta", "W"] + [f"V_{i + 1}" for i in range(ch.V.shape[1])] + ["active_set"]
    rows = []
    mask = ch.bitmask() if ch is not None else None
    for k in range(len(traj.t)):
        row = [repr(float(traj.t[k]))] + [repr(float(v)) for v in states[k]] + [repr(float(ctrl[k]))]
        if ch is not None:
            row += [repr(float(ch.eta[k])), repr(float(ch.W[k]))] + [repr(float(v)) for v in ch.V[k]]
            row.append(str(int(mask[k])))
        rows.append(row)
    return header, rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    tolerances: dict
    versions: dict
    wall_time: float
    outputs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"command": self.command, "config_hash": config_hash(self.config), "seeds": self.seeds,
                "tolerances": self.tolerances, "versions": self.versions,
                "wall_time": self.wall_time, "outputs": self.outputs}


def versions() -> dict:
    import scipy

    from . import __version__
    return {"vrclf": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


def run_batch(job: Callable, seeds: Sequence[int], workers: int = 1) -> list:
    """job(seed) for each seed; results come back sorted by seed."""
    seeds = sorted(seeds)
    if workers <= 1:
        return [job(s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, seeds))
