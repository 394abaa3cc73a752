"""Swap the site indicator (text prompt, one-hot, random) under the full method.

    python scripts/indicator_study.py --seeds 1 --rounds 10
"""
import argparse

from fedsurg.bench import format_table, run_variants
from fedsurg.config import benchmark_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--out", default="results/indicator")
    args = ap.parse_args()

    def make(**method):
        return lambda seed: benchmark_config(seed=seed, **method).with_(train={"rounds": args.rounds})

    variants = {"local": make(method="local")}
    for kind in ("text", "one_hot", "random"):
        variants[f"surgfed/{kind}"] = make(method="surgfed", indicator=kind)
    print(format_table(run_variants(variants, args.seeds, args.out)))


if __name__ == "__main__":
    main()
