"""Drive the CLI over the bundled configs, one output directory per run.

    python scripts/run_examples.py [--out runs]
"""
import argparse
import sys
from pathlib import Path

from vrclf.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

RUNS = [
    ("smallgain", ["smallgain", CONFIGS / "example43_gains.json"]),
    ("feascheck", ["feascheck", CONFIGS / "feasibility_instance.json"]),
    ("verify-planar", ["verify", CONFIGS / "planar_problem.json"]),
    ("simulate-planar", ["simulate", CONFIGS / "planar_problem.json", "--runs", "10", "--T", "30"]),
    ("example43", ["example43", "--runs", "10", "--T", "60"]),
    ("example44", ["example44"]),
    ("equilibria-one", ["cstr", "equilibria", CONFIGS / "example51_raw_kM2.json"]),
    ("equilibria-kM4", ["cstr", "equilibria", CONFIGS / "example51_raw_kM4.json"]),
    ("equilibria-three", ["cstr", "equilibria", CONFIGS / "example51_raw_three_roots.json"]),
    ("cstr-check", ["cstr", "check", CONFIGS / "example51.json", "--samples", "100000"]),
    ("cstr-stabilize", ["cstr", "stabilize", CONFIGS / "example51.json"]),
    ("cstr-closed-loop", ["cstr", "simulate", CONFIGS / "example51.json", "--runs", "20", "--T", "200"]),
    ("cstr-open-loop-bistable", ["cstr", "simulate", CONFIGS / "example51_theta19.json", "--open-loop",
                                 "--c0", "2.5,0.2", "--runs", "1", "--T", "200"]),
    ("cstr-generic", ["cstr", "equilibria", CONFIGS / "cubic_autocatalysis.json"]),
]


def run_all(out: Path) -> int:
    worst = 0
    for name, argv in RUNS:
        code = main([str(a) for a in argv] + ["--out-dir", str(out / name)])
        print(f"{name:26s} exit {code}", file=sys.stderr)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    args = ap.parse_args()
    sys.exit(1 if run_all(args.out) == 1 else 0)
