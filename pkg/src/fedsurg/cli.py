"""Batch command-line harness.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 missing inputs,
5 semantic mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from xml.sax.saxutils import escape

from .config import ConfigError, load_config
from .data import DatasetError, generate_site_dataset, manifest_matches
from .runtime import delta_m_report, read_final_metrics, read_metrics_csv, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_MISMATCH = 0, 2, 3, 4, 5


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_gen_data(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        for site in cfg.sites:
            target = out / site.spec.name
            if manifest_matches(site.spec, cfg.data.n_samples, target):
                print(f"{site.spec.name}: {cfg.data.n_samples} samples (unchanged)")
                continue
            manifest = generate_site_dataset(site.spec, cfg.data.n_samples, target)
            n_train = sum(e["split"] == "train" for e in manifest["samples"])
            print(f"{site.spec.name}: {manifest['n']} samples ({n_train} train, {manifest['n'] - n_train} eval)")
    except OSError as exc:
        _err(f"cannot write datasets: {exc}")
        return EXIT_IO
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        train = cfg.train
        if args.seed is not None:
            train = replace(train, seed=args.seed)
        if args.sequential:
            train = replace(train, parallel=False)
        data = cfg.data
        if args.data is not None:
            data = replace(data, dir=args.data)
        cfg = replace(cfg, train=train, data=data)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if cfg.data.dir is not None and not Path(cfg.data.dir).is_dir():
        _err(f"dataset directory {cfg.data.dir} does not exist (run gen-data first)")
        return EXIT_MISSING
    try:
        exp = run_experiment(cfg, args.out)
    except DatasetError as exc:
        _err(str(exc))
        return EXIT_MISSING
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_IO
    for k, m in exp.final_metrics().items():
        shown = ", ".join(f"{n}={v:.4g}" for n, v in sorted(m.items()))
        print(f"site {k} ({cfg.sites[k].spec.name}): {shown}")
    return EXIT_OK


def cmd_delta_m(args) -> int:
    run_csv, base_csv = Path(args.run) / "metrics.csv", Path(args.baseline) / "metrics.csv"
    for p in (run_csv, base_csv):
        if not p.exists():
            _err(f"missing {p}")
            return EXIT_MISSING
    try:
        report = delta_m_report(read_final_metrics(run_csv), read_final_metrics(base_csv))
    except ValueError as exc:
        _err(str(exc))
        return EXIT_MISMATCH
    for k, site in report["sites"].items():
        parts = ", ".join(f"{n} {v:+.2f}" for n, v in site["contributions"].items())
        print(f"site {k}: delta_m = {site['delta_m']:.2f}  ({parts})")
    print(f"average: delta_m = {report['average']:.2f}")
    report["run"], report["baseline"] = str(args.run), str(args.baseline)
    try:
        (Path(args.run) / "delta_m.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        _err(f"cannot write delta_m.json: {exc}")
        return EXIT_IO
    return EXIT_OK


def metric_series(run_dir, metric: str) -> list[tuple[int, float]]:
    """Per-round mean of ``metric`` over the sites that report it."""
    table = read_metrics_csv(Path(run_dir) / "metrics.csv")
    series = []
    for t in sorted(table):
        vals = [m[metric] for m in table[t].values() if metric in m]
        if vals:
            series.append((t, sum(vals) / len(vals)))
    return series


def render_svg(series: dict[str, list[tuple[int, float]]], metric: str,
               width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 60, 160, 30, 50
    xs = [x for s in series.values() for x, _ in s]
    ys = [y for s in series.values() for _, y in s]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">round</text>',
           f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})" '
           f'text-anchor="middle">{escape(metric)}</text>',
           f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-size="10">{y1:.4g}</text>',
           f'<text x="{left - 6}" y="{top + ph + 4}" text-anchor="end" font-size="10">{y0:.4g}</text>',
           f'<text x="{left}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{x0}</text>',
           f'<text x="{left + pw}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{x1}</text>']
    for i, (label, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{left + pw + 38}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    series = {}
    for i, run in enumerate(args.run):
        csv_path = Path(run) / "metrics.csv"
        if not csv_path.exists():
            _err(f"missing {csv_path}")
            return EXIT_MISSING
        pts = metric_series(run, args.metric)
        if not pts:
            _err(f"run {run} has no metric {args.metric!r}")
            return EXIT_MISMATCH
        label = Path(run).name or str(run)
        if label in series:
            label = f"{label} ({i})"
        series[label] = pts
    try:
        Path(args.out).write_text(render_svg(series, args.metric))
    except OSError as exc:
        _err(f"cannot write {args.out}: {exc}")
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsurg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate every site's synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run a federated experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--data", help="dataset directory (overrides data.dir)")
    r.add_argument("--sequential", action="store_true", help="train sites one after another (byte-reproducible)")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("delta-m", help="relative improvement of a run over a baseline run")
    d.add_argument("--run", required=True)
    d.add_argument("--baseline", required=True)
    d.set_defaults(func=cmd_delta_m)

    pl = sub.add_parser("plot", help="SVG line chart of a metric across rounds")
    pl.add_argument("--run", required=True, nargs="+")
    pl.add_argument("--metric", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
