"""Small experiment configurations shared across test modules."""
import numpy as np

from fedsurg.config import DataConfig, ExperimentConfig, MethodConfig, SiteConfig, TrainConfig
from fedsurg.data import SiteSpec
from fedsurg.lha import LhaConfig, LhaServer
from fedsurg.model import ModelConfig, ParameterSet, TaskSpec
from oracles import lha_rounds_reference


def tiny_sites(size=(16, 16)):
    return (
        SiteConfig(SiteSpec("A", 11, TaskSpec("segmentation", 3), size, labels=("Shaft", "Wrist"))),
        SiteConfig(SiteSpec("B", 22, TaskSpec("segmentation", 5), size)),
        SiteConfig(SiteSpec("C", 33, TaskSpec("depth", depth_range=(1.0, 12.0)), size)),
    )


def tiny_config(method="surgfed", rounds=2, epochs=1, lr=1e-3, n=8, sites=None, **method_kw):
    return ExperimentConfig(
        ModelConfig(input_size=(16, 16, 3), encoder_widths=(4, 8), decoder_widths=(8, 4), indicator_dim=16),
        sites or tiny_sites(),
        MethodConfig(method=method, **method_kw),
        TrainConfig(rounds=rounds, epochs=epochs, lr=lr, gate_lr=1e-2, psi_lr=1e-2, batch_size=4),
        DataConfig(n_samples=n),
        name=f"tiny-{method}",
    )


# acceptance criterion lines, echoed in the pytest terminal summary
ACCEPTANCE: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


# ---------------------------------------------------------------- LHA oracle harness

def _round_inputs(rng, K, sizes, rounds):
    locals_, deltas = [], []
    for _ in range(rounds):
        locals_.append([{n: rng.normal(size=s) for n, s in sizes.items()} for _ in range(K)])
        deltas.append([{n: rng.normal(scale=0.5, size=s) for n, s in sizes.items()} for _ in range(K)])
    return locals_, deltas


def _to_pset(d):
    return ParameterSet({n: v.copy() for n, v in d.items()}, {n: "shared" for n in d})


def run_server_vs_reference(seed=0, rounds=3):
    r = np.random.default_rng(seed)
    sizes = {"dec.w": 5, "enc.w": 3}
    locals_, deltas = _round_inputs(r, 2, sizes, rounds)
    xis = [r.normal(size=2) for _ in range(2)]
    cfg = LhaConfig(chunks=2, gate_lr=0.05, psi_lr=0.05)
    server = LhaServer(2, sorted(sizes), 2, cfg)
    got = []
    for t in range(rounds):
        out, _ = server.aggregate([_to_pset(x) for x in locals_[t]], [_to_pset(x) for x in deltas[t]], xis)
        got.append(out)
    want, psi, W, b = lha_rounds_reference(locals_, deltas, xis, 0.05, 0.05, 2)
    pairs = [(got[t][k][n], want[t][k][n]) for t in range(rounds) for k in range(2) for n in sizes]
    pairs += [(server.psi.psi, psi), (server.net.weight, W), (server.net.bias, b)]
    # relative error against the larger of |reference| and 1e-12
    return max(float(np.max(np.abs(g - w) / np.maximum(np.abs(w), 1e-12))) for g, w in pairs)
