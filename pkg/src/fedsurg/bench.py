"""Multi-seed benchmark driver: runs methods side by side and scores them against local training."""
from __future__ import annotations

import json
import statistics
import time
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ExperimentConfig, benchmark_config
from .data import make_site_dataset
from .runtime import Experiment, delta_m_report
from . import metrics as M


def _scored(metrics: dict[int, dict[str, float]]) -> dict[int, dict[str, float]]:
    return {k: {n: v for n, v in m.items() if n in M.DIRECTIONS} for k, m in metrics.items()}


def diagnostics(exp: Experiment) -> dict:
    """Loss trajectory per site plus the LHA state (attention, gates, psi) when present."""
    first, last = exp.logs[0], exp.logs[-1]
    out = {
        "initial_train_loss": {k: m["train_split_loss"] for k, m in first.metrics.items()},
        "final_train_loss": {k: m["train_split_loss"] for k, m in last.metrics.items()},
    }
    if exp.server is not None and last.aggregation is not None:
        att = last.aggregation["attention"]
        K = len(exp.sites)
        off = [np.mean([a[i][j] for i in range(K) for j in range(K) if i != j]) for a in att.values()]
        self_w = [np.mean([a[i][i] for i in range(K)]) for a in att.values()]
        psi = np.array(exp.server.psi.psi)
        out.update({
            "attention_self_mean": float(np.mean(self_w)),
            "attention_cross_mean": float(np.mean(off)),
            "gate_mean": float(np.mean([g for v in last.aggregation["gate_means"].values() for g in v])),
            "psi_mean": float(psi.mean()), "psi_min": float(psi.min()), "psi_max": float(psi.max()),
            "psi_per_site": psi.mean(axis=1).tolist(),
            "psi_clipped": int(sum(rec.aggregation["psi_clipped"] for rec in exp.logs[1:] if rec.aggregation)),
        })
    return out


def run_variants(variants: Mapping[str, Callable[[int], ExperimentConfig]], seeds: Sequence[int] = (1, 2, 3),
                 out_root=None, baseline: str = "local") -> dict:
    """Run every (seed, variant) pair; Δm is taken against the ``baseline`` variant of the same seed.

    ``variants`` maps a label to ``seed -> ExperimentConfig``. All variants of a
    seed share the generated site datasets.
    """
    if baseline not in variants:
        raise ValueError(f"baseline variant {baseline!r} missing")
    names = [baseline] + [n for n in variants if n != baseline]
    started = time.perf_counter()
    runs: dict[str, dict[int, dict]] = {n: {} for n in names}
    for seed in seeds:
        datasets = None
        for name in names:
            cfg = variants[name](seed)
            if datasets is None:
                datasets = [make_site_dataset(s.spec, cfg.data.n_samples) for s in cfg.sites]
            exp = Experiment(cfg, datasets)
            t0 = time.perf_counter()
            exp.run(None if out_root is None else Path(out_root) / f"{name}-s{seed}")
            runs[name][seed] = {"metrics": _scored(exp.final_metrics()), "diagnostics": diagnostics(exp),
                                "seconds": time.perf_counter() - t0}
    for name in names:
        for seed in seeds:
            try:
                rep = delta_m_report(runs[name][seed]["metrics"], runs[baseline][seed]["metrics"])
            except ValueError as exc:   # e.g. a zero baseline IoU after very short training
                rep = {"average": None, "error": str(exc)}
            runs[name][seed]["delta_m"] = rep
    medians = {}
    for n in names:
        vals = [runs[n][s]["delta_m"]["average"] for s in seeds]
        medians[n] = None if None in vals else statistics.median(vals)
    result = {"seeds": list(seeds), "methods": names, "runs": runs, "median_delta_m": medians,
              "total_seconds": time.perf_counter() - started}
    if out_root is not None:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / "benchmark.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def run_benchmark(seeds: Sequence[int] = (1, 2, 3), methods: Sequence[str] = ("local", "fedavg", "surgfed"),
                  out_root=None) -> dict:
    """The default 5-site benchmark for each method, scored against local training."""
    variants = {m: (lambda seed, m=m: benchmark_config(m, seed)) for m in dict.fromkeys(("local", *methods))}
    return run_variants(variants, seeds, out_root)


def format_table(result: dict) -> str:
    """Plain-text per-seed and median Δm table."""
    seeds = result["seeds"]
    width = max(len(m) for m in result["methods"]) + 2
    def cell(v):
        return "n/a" if v is None else f"{v:.2f}"

    lines = [f"{'method':<{width}}" + "".join(f"seed {s:<6}" for s in seeds) + "median"]
    for m in result["methods"]:
        vals = "".join(f"{cell(result['runs'][m][s]['delta_m']['average']):<11}" for s in seeds)
        lines.append(f"{m:<{width}}{vals}{cell(result['median_delta_m'][m])}")
    return "\n".join(lines)
