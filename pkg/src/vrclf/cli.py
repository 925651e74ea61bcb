"""Command-line entry point.

Exit codes: 0 success, 2 verification failure (report still written), 1 usage or I/O error.
Every run writes ``report.json`` and ``manifest.json`` into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import corollary_lab as cl
from . import fields as fx
from . import reaction_network as rn
from . import sim_harness as sh
from .feasibility import AffineConstraint, ControlSet, FeasibleInterval, solve
from .gain_calculus import GainMatrix, Identity, Power, Verdict, check_small_gain, gain_from_json
from .vclf_core import (ControlAffineSystem, SynthesisError, VRCLFSpec, certify, check_implications,
                        check_structure, synthesize)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- loading


def load_schema(name: str) -> dict:
    return json.loads((resources.files("vrclf") / "schemas" / f"{name}.json").read_text())


def load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    text = p.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")


def scalar_fn(doc):
    """A gain JSON object or a prefix expression in 's'."""
    if isinstance(doc, dict):
        return gain_from_json(doc)
    return fx.scalar_function(doc)


def load_system(doc: dict) -> ControlAffineSystem:
    drift = [fx.from_prefix(e) for e in doc["drift"]]
    gain = [fx.from_prefix(e) for e in doc["input_gain"]]
    control = ControlSet.from_json(doc.get("control", {"case": "P1"}))
    return ControlAffineSystem(tuple(drift), tuple(gain), control, tuple(map(tuple, doc.get("disturbance_box", []))))


def load_spec(doc: dict) -> VRCLFSpec:
    lf = doc["local_feedback"]
    local = fx.from_prefix(lf) if not (isinstance(lf, list) and all(isinstance(v, (int, float)) for v in lf)) \
        else np.asarray(lf, float)
    return VRCLFSpec(tuple(fx.from_prefix(v) for v in doc["V"]), fx.from_prefix(doc["eta"]),
                     fx.from_prefix(doc["W"]), scalar_fn(doc["delta"]), scalar_fn(doc["K"]),
                     scalar_fn(doc["rho"]), float(doc["epsilon"]), GainMatrix.from_json(doc["gains"]),
                     local, float(doc["radius"]),
                     gain_from_json(doc["a1"]) if "a1" in doc else None,
                     gain_from_json(doc["a2"]) if "a2" in doc else None)


def sample_box(box, N: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box], float)
    hi = np.array([b[1] for b in box], float)
    return lo[:, None] + (hi - lo)[:, None] * rng.random((len(box), N))


def parse_vector(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse vector {text!r}")


# ---------------------------------------------------------------- output


class Run:
    def __init__(self, args, command: str, config: dict):
        self.args = args
        self.command = command
        self.config = config
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.clock = sh.Stopwatch()
        self.files: list = []
        self.seeds = [args.seed]

    def tolerances(self) -> dict:
        a = self.args
        return {"rtol": a.tol_rtol, "atol": a.tol_atol, "monitor": a.tol_monitor, "samples": a.samples}

    def write_csv(self, name: str, header, rows):
        path = self.out / name
        sh.write_csv(path, header, rows)
        self.files.append(str(path))

    def finish(self, report: dict, passed: bool) -> int:
        report = dict(report, command=self.command, passed=bool(passed))
        path = self.out / "report.json"
        path.write_text(json.dumps(report, indent=2, default=_json_default))
        self.files.append(str(path))
        man = sh.RunManifest(self.command, self.config, self.seeds, self.tolerances(), sh.versions(),
                             self.clock.elapsed, self.files)
        (self.out / "manifest.json").write_text(json.dumps(man.to_json(), indent=2))
        print(json.dumps(_summary(report), default=_json_default))
        return EXIT_OK if passed else EXIT_FAIL


def _json_default(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _summary(report: dict) -> dict:
    keep = ("command", "passed", "verdict", "worst_margin", "count", "roots", "feasible", "lower", "upper",
            "u", "implication", "failed")
    return {k: report[k] for k in keep if k in report}


def _opts(args) -> sh.IntegratorOptions:
    return sh.IntegratorOptions(rtol=args.tol_rtol, atol=args.tol_atol,
                                max_step=args.max_step if args.max_step is not None else sh.HOLD_MAX_STEP)


def _failed(rep) -> list:
    return [r.id for r in rep.results.values() if not r.passed]


# ---------------------------------------------------------------- commands


def cmd_smallgain(args) -> int:
    doc = load_json(args.gains)
    G = GainMatrix.from_json(doc.get("gains", doc))
    run = Run(args, "smallgain", doc)
    rep = check_small_gain(G)
    return run.finish(rep.to_json(), rep.verdict is Verdict.SATISFIED)


def cmd_feascheck(args) -> int:
    doc = load_json(args.instance)
    control = ControlSet.from_json(doc.get("control", {"case": "P1"}))
    cons = [AffineConstraint(float(c["f"]), float(c["g"]), i) for i, c in enumerate(doc["constraints"])]
    run = Run(args, "feascheck", doc)
    res, u = solve(cons, control)
    out = res.to_json()
    if isinstance(res, FeasibleInterval):
        out["u"] = u
    return run.finish(out, isinstance(res, FeasibleInterval))


def _problem(path):
    doc = load_json(path)
    try:
        return doc, load_system(doc), load_spec(doc["spec"])
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{path}: invalid problem definition: {exc}")


def cmd_verify(args) -> int:
    doc, system, spec = _problem(args.problem)
    run = Run(args, "verify", doc)
    box = doc.get("sampler", {}).get("box") or [[-2.0, 2.0]] * system.n
    X = sample_box(box, args.samples, args.seed)
    imp = check_implications(system, spec, X)
    struct = check_structure(system, spec, X)
    ok = imp.passed and struct.passed
    return run.finish({"implications": imp.to_json(), "structure": struct.to_json(),
                       "failed": _failed(imp) + _failed(struct)}, ok)


def cmd_synth(args) -> int:
    doc, system, spec = _problem(args.problem)
    run = Run(args, "synth", doc)
    law = synthesize(system, spec)
    points = [parse_vector(p) for p in args.x] if args.x else []
    rows = []
    try:
        for x in points:
            u, region, _ = law.evaluate(x)
            rows.append({"x": x, "u": u, "region": region})
    except SynthesisError as exc:
        return run.finish({"points": rows, "error": str(exc), "region": exc.region,
                           "implication": exc.result.implication}, False)
    box = doc.get("sampler", {}).get("box") or [[-2.0, 2.0]] * system.n
    X = sample_box(box, min(args.samples, 2000), args.seed)
    try:
        cert = certify(law, X)
    except SynthesisError as exc:
        return run.finish({"points": rows, "error": str(exc), "region": exc.region,
                           "implication": exc.result.implication}, False)
    return run.finish({"points": rows, "certificate": cert.to_json(), "failed": _failed(cert)}, cert.passed)


def cmd_simulate(args) -> int:
    doc, system, spec = _problem(args.problem)
    run = Run(args, "simulate", doc)
    law = synthesize(system, spec)
    sim = doc.get("simulation", {})
    x0s = [parse_vector(v) for v in args.x0] if args.x0 else sim.get("x0", [])
    if not x0s:
        rng = np.random.default_rng(args.seed)
        box = doc.get("sampler", {}).get("box") or [[-2.0, 2.0]] * system.n
        x0s = [list(sample_box(box, 1, int(rng.integers(2 ** 31)))[:, 0]) for _ in range(args.runs)]
    T = args.T if args.T is not None else float(sim.get("T", 20.0))
    reports, trajs = [], []
    for k, x0 in enumerate(x0s):
        tr = sh.simulate(system, x0, T, feedback=law, opts=_opts(args))
        mon = sh.monitor(tr, system, law.spec, rtol=args.tol_monitor)
        ch = sh.channels(tr, system, law.spec)
        run.write_csv(f"trajectory_{k:03d}.csv", *sh.trajectory_rows(tr, ch))
        reports.append({"x0": list(map(float, x0)), "final": tr.final.tolist(), "steps": tr.steps,
                        "monitor": mon.to_json()})
        trajs.append(tr)
    ok = all(r["monitor"]["passed"] for r in reports)
    out = {"runs": reports}
    if len(trajs) >= sh.MIN_PER_BIN:
        kl = sh.estimate_kl(trajs)
        out["kl"] = kl.to_json()
    return run.finish(out, ok)


def cmd_example43(args) -> int:
    gamma = Identity() if args.gamma_power == 1.0 else Power(1.0, args.gamma_power)
    config = {"lambda": args.lam, "sigma": args.sigma, "gamma_power": args.gamma_power}
    run = Run(args, "example43", config)
    system, cfg, choice = cl.example43_instance(args.lam, args.sigma, gamma, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(-2, 2, (3, args.samples))
    rep = cl.check_corollary_implications(cfg, X)
    cross = cl.check_cross_condition(args.lam, args.sigma, gamma, system.input_gain[1], cfg.Q, X)
    wit = cl.single_clf_witness(1.0, 1.0, args.lam, gamma, system.input_gain[1])
    out = {"local_gain": {"p": choice.p, "interval": list(choice.p_interval), "radius": choice.radius_ball,
                          "lipschitz": choice.lipschitz},
           "implications": rep.to_json(), "cross_condition": cross.to_json(),
           "single_clf_witness": None if wit is None else {"x": list(wit.x), "lhs": wit.lhs, "rhs": wit.rhs}}
    ok = rep.passed and cross.passed
    if args.runs:
        from .vclf_core import synthesize as _syn
        law = _syn(system, cl.build_spec(cfg))
        sims = []
        for k in range(args.runs):
            x0 = rng.uniform(-2, 2, 3)
            tr = sh.simulate(system, x0, args.T or 60.0, feedback=law, opts=_opts(args))
            mon = sh.monitor(tr, system, law.spec, rtol=args.tol_monitor)
            run.write_csv(f"trajectory_{k:03d}.csv", *sh.trajectory_rows(tr, sh.channels(tr, system, law.spec)))
            sims.append({"x0": x0.tolist(), "final_norm": float(np.linalg.norm(tr.final)),
                         "monitor": mon.to_json()})
            ok = ok and mon.passed
        out["simulations"] = sims
    return run.finish(out, ok)


def cmd_example44(args) -> int:
    g = fx.from_prefix(json.loads(args.g)) if args.g else cl.example43_g(0.5, Identity())
    run = Run(args, "example44", {"g": fx.to_prefix(g)})
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(-1, 1, (3, args.samples))
    res = cl.search_example44_constants(g, X)
    out = {"constants": res.constants, "relaxation": res.relaxation, "implications": res.report.to_json()}
    return run.finish(out, res.report.passed)


def _cstr_inputs(doc: dict, args):
    """(network, conservation, StabilizerConfig) from an 'example51' block or a generic definition."""
    if "example51" in doc and "k" in doc["example51"]:
        e = doc["example51"]
        c_f = e.get("c_f", [1.5, 0.5])
        return rn.example51_network(float(e["k"]), float(c_f[0]), float(c_f[1]),
                                    float(e.get("D_max", 10.0))), None, None
    if "example51" in doc:
        e = doc["example51"]
        inst = rn.example51_instance(float(e.get("theta", 1.0)), float(e.get("mu", 0.5)),
                                     float(e.get("D_max", 10.0)), float(e.get("lambda", 0.5)),
                                     Identity(), float(e.get("epsilon", 0.25)), seed=args.seed)
        return inst.network, inst.conservation, inst.config
    net = rn.ReactionNetwork.from_json(doc)
    pairs = [rn.validate_pair(net.S, c["p"], c.get("q")) for c in doc.get("conservation", [])]
    if "stabilizer" not in doc:
        return net, pairs, None
    t = doc["stabilizer"]
    cons = rn.ConservationData(tuple(pairs), float(t["b"]), float(t["R"]), gain_from_json(t["g"]))
    Q = fx.scalar_function(t["Qtilde"])
    cfg = rn.StabilizerConfig(GainMatrix.from_json(t["gains"]), Q, float(t["epsilon"]), float(t["omega"]),
                         tuple(t["kvec"]), float(t["radius"]))
    return net, cons, cfg


def cmd_cstr(args) -> int:
    doc = load_json(args.network)
    run = Run(args, f"cstr-{args.action}", doc)
    try:
        net, cons, cfg = _cstr_inputs(doc, args)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{args.network}: invalid network definition: {exc}")
    if args.action == "equilibria":
        e = doc.get("example51", {})
        if "k" in e:
            c_f = e.get("c_f", [1.5, 0.5])
            rep = rn.example51_roots(float(e["k"]), float(c_f[0]), float(c_f[1]), args.dstar)
        else:
            rep = rn.equilibria(net, args.dstar)
        return run.finish(rep.to_json(), rep.count > 0)
    if cfg is None:
        raise UsageError("network definition lacks a 'stabilizer' block")
    rng = np.random.default_rng(args.seed)
    if args.action == "check":
        C = rn.sample_slab(net, cons, cfg.epsilon, args.samples, rng)
        hyp = rn.check_hypotheses(net, cons, rn.sample_concentrations(net.n, args.samples, rng))
        cond = rn.check_stabilizer_conditions(net, cons, cfg, C)
        return run.finish({"hypotheses": hyp.to_json(), "conditions": cond.to_json(),
                           "failed": _failed(hyp) + _failed(cond)}, hyp.passed and cond.passed)
    fb = rn.stabilize(net, cons, cfg)
    if args.action == "stabilize":
        C = rn.sample_concentrations(net.n, min(args.samples, 10000), rng)
        D = np.array([fb(C[:, i]) for i in range(C.shape[1])])
        d1 = fb(np.ones(net.n))
        ok = abs(d1 - 1.0) <= 1e-12 and np.all((D >= 0) & (D <= net.D_max))
        return run.finish({"D_at_target": d1, "D_min": float(D.min()), "D_max_observed": float(D.max()),
                           "D_max": net.D_max}, bool(ok))
    # simulate
    system = fb.law.system
    c0s = [parse_vector(v) for v in args.c0] if args.c0 else \
        [list(rng.uniform(0.05, 5.0, net.n)) for _ in range(args.runs)]
    T = args.T or 200.0
    sims = []
    for k, c0 in enumerate(c0s):
        hold = None if args.dilution is None else (lambda t, D=args.dilution: D - 1.0)
        tr = sh.simulate(system, np.log(c0), T, feedback=None if args.open_loop else fb.law,
                         opts=_opts(args), open_loop=hold)
        mon = sh.monitor(tr, system, fb.law.spec, rtol=args.tol_monitor)
        ch = sh.channels(tr, system, fb.law.spec)
        hdr, rows = sh.trajectory_rows(tr, ch, state_map=np.exp, state_prefix="c",
                                       control_map=lambda u: np.clip(1 + u, 0, net.D_max), control_name="D")
        run.write_csv(f"trajectory_{k:03d}.csv", hdr, rows)
        cT = np.exp(tr.final)
        sims.append({"c0": list(map(float, c0)), "c_final": cT.tolist(),
                     "distance_to_target": float(np.linalg.norm(cT - 1.0)), "monitor": mon.to_json()})
    ok = all(s["distance_to_target"] <= 1e-3 and (args.open_loop or s["monitor"]["passed"]) for s in sims)
    return run.finish({"open_loop": bool(args.open_loop), "runs": sims}, ok)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="vrclf_out")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--samples", type=int, default=20000)
    common.add_argument("--tol-rtol", type=float, default=1e-8)
    common.add_argument("--tol-atol", type=float, default=1e-10)
    common.add_argument("--tol-monitor", type=float, default=sh.MONITOR_RTOL)
    common.add_argument("--max-step", type=float, default=None)

    p = _Parser(prog="vrclf", description="VRCLF verification, synthesis and simulation")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("smallgain", parents=[common], help="cyclic small-gain check")
    s.add_argument("gains")
    s.set_defaults(fn=cmd_smallgain)

    s = sub.add_parser("feascheck", parents=[common], help="scalar-control feasibility")
    s.add_argument("instance")
    s.set_defaults(fn=cmd_feascheck)

    for name, fn in (("verify", cmd_verify), ("synth", cmd_synth), ("simulate", cmd_simulate)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("problem")
        if name == "synth":
            s.add_argument("--x", action="append", help="comma-separated state; repeatable")
        if name == "simulate":
            s.add_argument("--x0", action="append")
            s.add_argument("--T", type=float, default=None)
            s.add_argument("--runs", type=int, default=5)
        s.set_defaults(fn=fn)

    s = sub.add_parser("example43", parents=[common])
    s.add_argument("--lam", type=float, default=0.5)
    s.add_argument("--sigma", type=float, default=0.5)
    s.add_argument("--gamma-power", type=float, default=1.0)
    s.add_argument("--runs", type=int, default=0)
    s.add_argument("--T", type=float, default=None)
    s.set_defaults(fn=cmd_example43)

    s = sub.add_parser("example44", parents=[common])
    s.add_argument("--g", default=None, help="prefix JSON expression for g(x)")
    s.set_defaults(fn=cmd_example44)

    s = sub.add_parser("cstr", parents=[common])
    s.add_argument("action", choices=["equilibria", "check", "stabilize", "simulate"])
    s.add_argument("network")
    s.add_argument("--dstar", type=float, default=1.0)
    s.add_argument("--c0", action="append")
    s.add_argument("--T", type=float, default=None)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--open-loop", action="store_true")
    s.add_argument("--dilution", type=float, default=None, help="constant D for open-loop runs")
    s.set_defaults(fn=cmd_cstr)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
