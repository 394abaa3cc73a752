"""Run the 5-site synthetic benchmark for several methods and seeds.

    python scripts/run_benchmark.py --out results/bench5
    python scripts/run_benchmark.py --methods local fedavg fedrep surgfed --seeds 1 2 3 4 5
"""
import argparse
import json

from fedsurg.bench import format_table, run_benchmark
from fedsurg.config import METHODS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--methods", nargs="+", choices=METHODS, default=["local", "fedavg", "surgfed"])
    ap.add_argument("--out", default="results/bench5")
    args = ap.parse_args()
    res = run_benchmark(args.seeds, args.methods, args.out)
    print(format_table(res))
    for seed in args.seeds:
        diag = res["runs"].get("surgfed", {}).get(seed, {}).get("diagnostics")
        if diag:
            keys = ("attention_self_mean", "gate_mean", "psi_min", "psi_max", "psi_clipped")
            print(f"surgfed seed {seed}: " + json.dumps({k: diag[k] for k in keys}))
    print(f"total {res['total_seconds'] / 60:.1f} min; details in {args.out}/benchmark.json")


if __name__ == "__main__":
    main()
