"""Component ablation: no LCS/LHA, LCS only, LHA without language gate, prompt-only LHA, full.

    python scripts/ablation.py --seeds 1 --rounds 10 --out results/ablation
"""
import argparse

from fedsurg.bench import format_table, run_variants
from fedsurg.config import ABLATION_ROWS, benchmark_config

LABELS = {1: "fedavg", 2: "fedavg+lcs", 3: "lha-nogate", 4: "lha-prompt", 5: "surgfed"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    def make(**method):
        return lambda seed: benchmark_config(seed=seed, **method).with_(train={"rounds": args.rounds})

    variants = {"local": make(method="local")}
    for row, method in ABLATION_ROWS.items():
        variants[f"{row}:{LABELS[row]}"] = make(**method)
    print(format_table(run_variants(variants, args.seeds, args.out)))


if __name__ == "__main__":
    main()
