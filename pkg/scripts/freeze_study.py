"""Freeze parameter groups during local training to see where the gains come from.

    python scripts/freeze_study.py --seeds 1 --rounds 10
"""
import argparse

from fedsurg.bench import format_table, run_variants
from fedsurg.config import benchmark_config

GROUPS = {"none": (), "enc": ("enc",), "dec": ("dec",), "lcs": ("lcs",)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--method", default="surgfed")
    ap.add_argument("--out", default="results/freeze")
    args = ap.parse_args()

    def make(**method):
        return lambda seed: benchmark_config(seed=seed, **method).with_(train={"rounds": args.rounds})

    variants = {"local": make(method="local")}
    for label, groups in GROUPS.items():
        variants[f"{args.method}/frozen:{label}"] = make(method=args.method, freeze_groups=groups)
    print(format_table(run_variants(variants, args.seeds, args.out)))


if __name__ == "__main__":
    main()
