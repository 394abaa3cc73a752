"""Round orchestration: local training at every site, then the method's server step."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import metrics as M
from . import tensor as T
from .config import ExperimentConfig, canonical_json
from .data import DatasetError, SiteDataset, load_site_dataset, make_site_dataset
from .lha import LhaServer
from .model import ParameterSet, TaskSpec, build_model, compute_loss, forward, save_checkpoint
from .tensor import Adam, tdf
from .text_embed import TextIndicator, make_indicator, site_prompt

log = logging.getLogger(__name__)

EVAL_BATCH = 16


@dataclass
class SiteState:
    k: int
    task: TaskSpec
    dataset: SiteDataset
    params: ParameterSet
    optimizer: Adam
    indicator: TextIndicator
    rng: np.random.Generator

    @property
    def n_train(self) -> int:
        return len(self.dataset.train_idx)


@dataclass
class RoundLog:
    round: int
    config_hash: str
    train_loss: dict[int, list[float]] = field(default_factory=dict)
    metrics: dict[int, dict[str, float]] = field(default_factory=dict)
    psi: list[list[float]] | None = None
    aggregation: dict | None = None
    duration_s: float = 0.0

    def to_json(self) -> str:
        """One deterministic JSON line; wall-clock duration is kept out (see timings.jsonl)."""
        doc = {"round": self.round, "config_hash": self.config_hash,
               "train_loss": {str(k): v for k, v in self.train_loss.items()},
               "metrics": {str(k): v for k, v in self.metrics.items()},
               "psi": self.psi, "aggregation": self.aggregation}
        return json.dumps(doc, sort_keys=True)


def _trainable(params: ParameterSet, freeze_groups: Sequence[str]) -> list[str]:
    frozen = tuple(f"{g}." for g in freeze_groups)
    return [n for n in params.entries if not n.startswith(frozen)]


def batch_loss(params, images, labels, state: SiteState, config: ExperimentConfig):
    x = images[:, None]
    y = labels[:, None]
    pred = forward(params, x, state.indicator, state.task, config.model)
    return compute_loss(pred, y, state.task)


def local_train_site(state: SiteState, epochs: int, config: ExperimentConfig,
                     global_ref: ParameterSet | None = None, mu: float = 0.0
                     ) -> tuple[ParameterSet, ParameterSet, list[float]]:
    """Run ``epochs`` shuffled passes of Adam over the site's train split.

    Returns ``(w_bar, delta, epoch_mean_losses)``. With ``global_ref`` and
    ``mu > 0`` a proximal term ``mu/2 * ||w - w_ref||^2`` over shared layers is
    added to the gradient.
    """
    start = state.params
    current = dict(start.entries)
    names = _trainable(start, config.method.freeze_groups)
    bs = config.train.batch_size
    ds = state.dataset
    epoch_losses = []
    for _ in range(epochs):
        order = state.rng.permutation(ds.train_idx)
        losses = []
        for b in range(0, len(order), bs):
            idx = order[b:b + bs]
            tape = T.Tape()
            leaves = {n: (tape.leaf(v, n) if n in names else v) for n, v in current.items()}
            loss = batch_loss(leaves, ds.images[idx], ds.labels[idx], state, config)
            grads = tape.backward(loss)
            if global_ref is not None and mu > 0:
                for n in names:
                    if start.partition[n] == "shared":
                        grads[n] = grads[n] + mu * (current[n] - global_ref.entries[n])
            state.optimizer.step(current, grads, names)
            losses.append(float(loss.value))
        epoch_losses.append(float(np.mean(losses)) if losses else math.nan)
    w_bar = ParameterSet(current, dict(start.partition))
    return w_bar, w_bar - start, epoch_losses


# ------------------------------------------------------------- aggregation

def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_k p_k a_k`` written as ``a_0 + sum_k p_k (a_k - a_0)``: equal inputs return exactly."""
    total = float(sum(weights))
    ref = arrays[0]
    out = ref.copy()
    for a, wgt in zip(arrays, weights):
        out = out + (wgt / total) * (a - ref)
    return out


def aggregation_groups(params: Sequence[ParameterSet], name: str, tasks: Sequence[TaskSpec],
                       by_task: bool) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for k, p in enumerate(params):
        if name not in p.entries:
            continue
        key = (p.entries[name].shape, tasks[k].kind if by_task else None)
        groups.setdefault(key, []).append(k)
    return list(groups.values())


def baseline_aggregate(mode: str, params: Sequence[ParameterSet], weights: Sequence[float],
                       tasks: Sequence[TaskSpec]) -> list[ParameterSet]:
    """FedAvg-family server step.

    fedavg: weighted mean of every non-personalised layer over the sites whose
    copy has the same shape. cluster: the same within task kinds. fedrep: shared
    layers only; heads stay local.
    """
    if mode not in ("fedavg", "cluster", "fedrep"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    out = [p.copy() for p in params]
    names: list[str] = []
    for p in params:
        names += [n for n in p.entries if n not in names]
    for name in names:
        group = next(p.partition[name] for p in params if name in p.entries)
        if group == "personalized" or (mode == "fedrep" and group != "shared"):
            continue
        for members in aggregation_groups(params, name, tasks, by_task=(mode == "cluster")):
            if not members:
                raise ValueError(f"empty aggregation group for {name}")
            avg = _weighted_mean([params[k].entries[name] for k in members], [weights[k] for k in members])
            for k in members:
                out[k].entries[name] = avg.copy()
    return out


# ---------------------------------------------------------------- evaluation

def evaluate_site(state: SiteState, config: ExperimentConfig, split: str = "eval") -> dict[str, float]:
    ds = state.dataset
    idx = ds.eval_idx if split == "eval" else ds.train_idx
    preds, losses, counts = [], [], []
    for b in range(0, len(idx), EVAL_BATCH):
        sel = idx[b:b + EVAL_BATCH]
        out = forward(state.params.entries, ds.images[sel][:, None], state.indicator, state.task, config.model)
        losses.append(float(compute_loss(out, ds.labels[sel][:, None], state.task).value))
        counts.append(len(sel))
        preds.append(out.value[:, 0])
    loss = float(np.dot(losses, counts) / max(sum(counts), 1))
    if not preds:
        return {"loss": math.nan}
    pred = np.concatenate(preds)
    target = ds.labels[idx]
    pooled = config.train.pooled_metrics
    if state.task.kind == "segmentation":
        res = M.evaluate_segmentation(pred, target, state.task.class_count, pooled)
    else:
        res = M.evaluate_depth(pred[..., 0], target, pooled)
    res["loss"] = loss
    return res


# ---------------------------------------------------------------- experiment

def site_indicator(config: ExperimentConfig, k: int) -> TextIndicator:
    site = config.sites[k]
    spec = site.spec
    if site.prompt is not None:
        prompt = site.prompt
    else:
        task = "Segmentation" if spec.task.kind == "segmentation" else "Depth Estimation"
        prompt = site_prompt(spec.name, task, spec.labels or ("depth",))
    return make_indicator(config.method.indicator, site=k, prompt=prompt, K=len(config.sites),
                          d=config.model.indicator_dim, seed=config.train.indicator_seed * 1_000_003 + k)


def load_datasets(config: ExperimentConfig) -> list[SiteDataset]:
    if config.data.dir is None:
        return [make_site_dataset(s.spec, config.data.n_samples) for s in config.sites]
    root = Path(config.data.dir)
    out = []
    for s in config.sites:
        ds = load_site_dataset(root / s.spec.name)
        if ds.spec != s.spec:
            raise DatasetError(f"dataset in {root / s.spec.name} was generated from a different site spec")
        out.append(ds)
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDSURG_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


class Experiment:
    def __init__(self, config: ExperimentConfig, datasets: Sequence[SiteDataset] | None = None):
        self.config = config
        self.config_hash = config.hash()
        datasets = list(datasets) if datasets is not None else load_datasets(config)
        if len(datasets) != len(config.sites):
            raise ValueError("one dataset per site required")
        self.sites: list[SiteState] = []
        for k, (site, ds) in enumerate(zip(config.sites, datasets)):
            ind = site_indicator(config, k)
            params = build_model(config.model, site.spec.task, ind, config.train.init_seed)
            stream = k if site.stream_id is None else site.stream_id
            self.sites.append(SiteState(k, site.spec.task, ds, params, Adam(config.train.lr), ind,
                                        np.random.default_rng([config.train.seed, stream])))
        self.server: LhaServer | None = None
        if config.method.method == "surgfed":
            self.server = self._make_server()
        self.logs: list[RoundLog] = []

    def _make_server(self) -> LhaServer:
        cfg = self.config.lha_config
        p0 = self.sites[0].params
        layers = [n for n in p0.names("shared")]
        for s in self.sites[1:]:
            if [n for n in s.params.names("shared")] != layers:
                raise ValueError("sites disagree on shared layers")
        groups = {n: [list(range(len(self.sites)))] for n in layers}
        if cfg.include_heads_same_task:
            for n in p0.names("head"):
                layers.append(n)
                groups[n] = aggregation_groups([s.params for s in self.sites], n,
                                               [s.task for s in self.sites], by_task=True)
        return LhaServer(len(self.sites), layers, self.config.model.indicator_dim, cfg, groups)

    def _train_all(self, refs):
        cfg = self.config
        mu = cfg.method.fedprox_mu if cfg.method.method == "fedprox" else 0.0

        def job(s: SiteState):
            return local_train_site(s, cfg.train.epochs, cfg, refs[s.k] if mu > 0 else None, mu)

        if cfg.train.parallel and len(self.sites) > 1:
            with ThreadPoolExecutor(max_workers=_threads()) as pool:
                return list(pool.map(job, self.sites))
        return [job(s) for s in self.sites]

    def evaluate(self, t: int) -> RoundLog:
        logrec = RoundLog(t, self.config_hash)
        for s in self.sites:
            m = evaluate_site(s, self.config, "eval")
            m["train_split_loss"] = evaluate_site(s, self.config, "train")["loss"]
            logrec.metrics[s.k] = m
        if self.server is not None:
            logrec.psi = self.server.psi.psi.tolist()
        return logrec

    def run_round(self, t: int) -> RoundLog:
        t0 = time.perf_counter()
        method = self.config.method.method
        refs = [s.params for s in self.sites]
        results = self._train_all(refs)
        local = [r[0] for r in results]
        deltas = [r[1] for r in results]
        aggregation = None
        if method == "local":
            new = local
        elif method == "surgfed":
            new, diag = self.server.aggregate(local, deltas, [s.indicator.vector for s in self.sites])
            aggregation = {"attention": diag.attention, "gate_means": diag.gate_means,
                           "psi_clipped": diag.psi_clipped, "surrogate_loss": diag.surrogate_loss}
        else:
            mode = {"fedavg": "fedavg", "fedprox": "fedavg", "fedavg_cluster": "cluster",
                    "fedrep": "fedrep"}[method]
            new = baseline_aggregate(mode, local, [s.n_train for s in self.sites],
                                     [s.task for s in self.sites])
        for s, p in zip(self.sites, new):
            s.params = p
        logrec = self.evaluate(t)
        logrec.train_loss = {s.k: r[2] for s, r in zip(self.sites, results)}
        logrec.aggregation = aggregation
        logrec.duration_s = time.perf_counter() - t0
        return logrec

    def run(self, out_dir=None) -> list[RoundLog]:
        out = Path(out_dir) if out_dir is not None else None
        started = time.time()
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
            for name in ("rounds.jsonl", "timings.jsonl"):
                (out / name).write_text("")
        t0 = time.perf_counter()
        self.logs = [self.evaluate(0)]
        self.logs[0].duration_s = time.perf_counter() - t0
        self._emit(out, self.logs[0])
        for t in range(1, self.config.train.rounds + 1):
            rec = self.run_round(t)
            self.logs.append(rec)
            self._emit(out, rec)
            log.info("round %d done in %.1fs", t, rec.duration_s)
        if out is not None:
            self._finish(out, started)
        return self.logs

    def _emit(self, out: Path | None, rec: RoundLog) -> None:
        if out is None:
            return
        with open(out / "rounds.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")
        with open(out / "timings.jsonl", "a") as fh:
            fh.write(json.dumps({"round": rec.round, "duration_s": rec.duration_s}) + "\n")

    def _finish(self, out: Path, started: float) -> None:
        write_metrics_csv(out / "metrics.csv", self.logs)
        for s in self.sites:
            save_checkpoint(s.params, out / "checkpoints" / f"site_{s.k}",
                            {"site": s.k, "name": self.config.sites[s.k].spec.name,
                             "config_hash": self.config_hash, "model": self.config.model.to_dict()})
        if self.server is not None:
            sdir = out / "checkpoints" / "server"
            sdir.mkdir(parents=True, exist_ok=True)
            tdf.save(sdir / "psi.tdf", self.server.psi.psi)
            tdf.save(sdir / "gate_weight.tdf", self.server.net.weight)
            tdf.save(sdir / "gate_bias.tdf", self.server.net.bias)
            (sdir / "layers.json").write_text(json.dumps(self.server.layers, indent=2) + "\n")
        summary = self.summary()
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_run_manifest(out, self.config.name, self.config_hash, started, time.time())

    def final_metrics(self) -> dict[int, dict[str, float]]:
        return self.logs[-1].metrics if self.logs else {}

    def summary(self) -> dict:
        doc = {"config_hash": self.config_hash, "rounds": self.config.train.rounds,
               "final_metrics": {str(k): v for k, v in self.final_metrics().items()},
               "sites": [s.spec.name for s in self.config.sites], "warnings": []}
        base = self.config.train.baseline_run
        if base is None:
            doc["warnings"].append("no baseline_run configured; delta_m omitted")
            return doc
        try:
            baseline = read_final_metrics(Path(base) / "metrics.csv")
            doc["delta_m"] = delta_m_report(
                {k: {n: v for n, v in m.items() if n in M.DIRECTIONS} for k, m in self.final_metrics().items()},
                baseline)
        except (OSError, ValueError, KeyError) as exc:
            doc["warnings"].append(f"delta_m omitted: {exc}")
        return doc


def run_experiment(config: ExperimentConfig, out_dir=None, datasets=None) -> Experiment:
    exp = Experiment(config, datasets)
    exp.run(out_dir)
    return exp


# ------------------------------------------------------------------ files

def metric_rows(logs: Sequence[RoundLog]):
    for rec in logs:
        for k in sorted(rec.metrics):
            for name in sorted(rec.metrics[k]):
                yield rec.round, k, name, rec.metrics[k][name]
            if k in rec.train_loss and rec.train_loss[k]:
                yield rec.round, k, "train_loss", rec.train_loss[k][-1]


def write_metrics_csv(path, logs: Sequence[RoundLog]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "site", "metric", "value"])
    for row in metric_rows(logs):
        w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> dict[int, dict[int, dict[str, float]]]:
    """round -> site -> metric -> value."""
    out: dict[int, dict[int, dict[str, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["round", "site", "metric", "value"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.setdefault(int(row["round"]), {}).setdefault(int(row["site"]), {})[row["metric"]] = float(row["value"])
    return out


def read_final_metrics(path) -> dict[int, dict[str, float]]:
    """Metrics with a known direction from the last round in a metrics.csv."""
    table = read_metrics_csv(path)
    if not table:
        raise ValueError(f"{path}: no rows")
    last = table[max(table)]
    return {k: {n: v for n, v in m.items() if n in M.DIRECTIONS} for k, m in last.items()}


METRIC_ORDER = ("iou", "dice", "rmse")


def delta_m_report(run: dict[int, dict[str, float]], baseline: dict[int, dict[str, float]]) -> dict:
    """Per-site and average relative improvement; raises ValueError on mismatched inputs."""
    if sorted(run) != sorted(baseline):
        raise ValueError(f"site sets differ: {sorted(run)} vs {sorted(baseline)}")
    sites = {}
    for k in sorted(run):
        names = [n for n in METRIC_ORDER if n in run[k]]
        if names != [n for n in METRIC_ORDER if n in baseline[k]] or not names:
            raise ValueError(f"site {k}: metric sets differ")
        r = M.MetricSet(M.Metric(n, run[k][n], M.DIRECTIONS[n]) for n in names)
        b = M.MetricSet(M.Metric(n, baseline[k][n], M.DIRECTIONS[n]) for n in names)
        terms = M.delta_m_terms(r, b)
        sites[str(k)] = {"delta_m": float(np.mean(terms)),
                         "contributions": dict(zip(names, terms))}
    avg = float(np.mean([v["delta_m"] for v in sites.values()]))
    return {"sites": sites, "average": avg}


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, name: str, config_hash: str, started: float, ended: float) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    manifest = {
        "name": name,
        "config_hash": config_hash,
        "version": f"v{__version__}",
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "ended": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ended)),
        "files": {str(p.relative_to(out)): _sha256_file(p) for p in files},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_run_manifest(out) -> list[str]:
    """Return the inventory entries whose file is missing or whose checksum changed."""
    out = Path(out)
    manifest = json.loads((out / "run_manifest.json").read_text())
    bad = []
    for rel, digest in manifest["files"].items():
        p = out / rel
        if not p.exists() or _sha256_file(p) != digest:
            bad.append(rel)
    cfg = json.loads((out / "config.json").read_text())
    if hashlib.sha256(canonical_json(cfg).encode()).hexdigest() != manifest["config_hash"]:
        bad.append("config.json (hash)")
    return bad
