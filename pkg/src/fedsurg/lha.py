"""Language-guided hyper-aggregation on the server.

For every aggregated layer the sites' flattened updates are stacked into ``V``
(one row per site). Site ``k`` attends over the rows with its own update as the
query, the attended update is amplified by a text-conditioned gate, and the
result is added to the site's local model scaled by a learnable per-(site,
layer) weight ``psi``.

Server-side learning uses the substitution ``grad L ~ -delta_w / lr``: both
``psi`` and the gate network are pushed towards aligning the gated attention
output with each site's own descent direction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .model import ParameterSet
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

PSI_CLIP = 10.0


@dataclass
class LayerUpdateMatrix:
    layer: str
    V: np.ndarray  # [K, d_layer]

    @property
    def K(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]


def stack_updates(deltas: Sequence[ParameterSet], layer: str) -> LayerUpdateMatrix:
    rows = []
    shape = None
    for k, delta in enumerate(deltas):
        if layer not in delta.entries:
            raise KeyError(f"site {k} has no layer {layer!r}")
        arr = delta.entries[layer]
        if shape is not None and arr.shape != shape:
            raise ValueError(f"layer {layer!r}: site {k} shape {arr.shape} != {shape}")
        shape = arr.shape
        rows.append(arr.reshape(-1))
    return LayerUpdateMatrix(layer, np.stack(rows))


def attention_weights(V: LayerUpdateMatrix | np.ndarray, k: int) -> np.ndarray:
    M = V.V if isinstance(V, LayerUpdateMatrix) else np.asarray(V)
    if not 0 <= k < M.shape[0]:
        raise IndexError(f"site {k} out of range for K={M.shape[0]}")
    scores = (M @ M[k]) / math.sqrt(M.shape[1])
    return T.softmax(scores).value


def cross_attention(V: LayerUpdateMatrix | np.ndarray, k: int,
                    weights: np.ndarray | None = None) -> np.ndarray:
    """Attention-weighted combination of the rows of ``V`` queried by row ``k``.

    Written as ``V[k] + sum_j a_j (V[j] - V[k])`` (equal to ``a @ V`` because the
    weights sum to one) so that K = 1 and identical rows return ``V[k]`` exactly.
    """
    M = V.V if isinstance(V, LayerUpdateMatrix) else np.asarray(V)
    a = attention_weights(M, k) if weights is None else weights
    return M[k] + a @ (M - M[k])


@dataclass
class GateNet:
    weight: np.ndarray  # [1 + d, G]
    bias: np.ndarray    # [G]
    optimizer_w: AdamState
    optimizer_b: AdamState

    @classmethod
    def zeros(cls, d: int, chunks: int = 16, learning_rate: float = 1e-3) -> "GateNet":
        w, b = np.zeros((1 + d, chunks)), np.zeros(chunks)
        return cls(w, b, AdamState.zeros_like(w, learning_rate), AdamState.zeros_like(b, learning_rate))

    @property
    def chunks(self) -> int:
        return self.bias.shape[0]


def chunk_index(d_layer: int, chunks: int) -> np.ndarray:
    block = -(-d_layer // chunks)
    return np.arange(d_layer) // block


def _gate_chunks(A_k: np.ndarray, xi: np.ndarray, weight, bias):
    pooled = np.array([np.mean(A_k)])
    return T.sigmoid(T.affine(np.concatenate([pooled, xi]), weight, bias))


def _gated(A_k: np.ndarray, chunk_gates, chunks: int):
    expanded = T.take(chunk_gates, chunk_index(A_k.shape[0], chunks))
    return T.add(A_k, T.mul(A_k, expanded))


def language_gate(A_k: np.ndarray, indicator: np.ndarray, net: GateNet,
                  gate_override: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A_tilde, chunk_gates)`` with ``A_tilde = A_k * (1 + gate)``.

    ``gate_override`` replaces the sigmoid output with a constant (test hook).
    """
    xi = np.asarray(indicator, dtype=np.float64)
    if net.weight.shape[0] != 1 + xi.shape[0]:
        raise ValueError(f"gate net expects indicator dim {net.weight.shape[0] - 1}, got {xi.shape[0]}")
    if gate_override is not None:
        gates = np.full(net.chunks, float(gate_override))
    else:
        gates = _gate_chunks(A_k, xi, net.weight, net.bias).value
    return _gated(A_k, gates, net.chunks).value, gates


@dataclass
class PsiTable:
    psi: np.ndarray  # [K, L]
    layers: list[str]
    states: list[list[AdamState]]

    @classmethod
    def zeros(cls, K: int, layers: Sequence[str], learning_rate: float = 1e-3) -> "PsiTable":
        layers = list(layers)
        states = [[AdamState.zeros_like(np.zeros(()), learning_rate) for _ in layers] for _ in range(K)]
        return cls(np.zeros((K, len(layers))), layers, states)

    def index(self, layer: str) -> int:
        return self.layers.index(layer)


def aggregate_site(local: ParameterSet, gated: dict[str, np.ndarray], psi_row: dict[str, float]) -> ParameterSet:
    """Personalised aggregation ``w = w_prev + delta + psi * A_tilde`` per aggregated layer.

    ``local`` is the site's post-training model, i.e. ``w_prev + delta``; using it
    directly keeps a zero ``psi`` bit-exact with plain local training. Layers
    absent from ``gated`` (personalised, heads) pass through untouched.
    """
    out = local.copy()
    for name, a_tilde in gated.items():
        psi = float(psi_row[name])
        if psi == 0.0:
            continue
        w = out.entries[name]
        if a_tilde.size != w.size:
            raise ValueError(f"{name}: gated size {a_tilde.size} != layer size {w.size}")
        out.entries[name] = w + psi * a_tilde.reshape(w.shape)
    return out


def update_psi(table: PsiTable, k: int, layer: str, gated: np.ndarray, delta: np.ndarray,
               mode: Literal["adam", "raw"] = "adam") -> bool:
    """Advance ``psi[k, layer]``. Returns True when the clip at +-10 was applied."""
    a = np.asarray(gated, dtype=np.float64).reshape(-1)
    dw = np.asarray(delta, dtype=np.float64).reshape(-1)
    if a.shape != dw.shape:
        raise ValueError("gated update and delta differ in length")
    j = table.index(layer)
    align = float(a @ dw)
    if mode == "raw":
        new = table.psi[k, j] + align
    elif mode == "adam":
        grad = np.array(-align / a.shape[0])
        new, _ = adam_step(np.array(table.psi[k, j]), grad, table.states[k][j])
        new = float(new)
    else:
        raise ValueError(f"unknown psi update mode {mode!r}")
    clipped = abs(new) > PSI_CLIP
    if clipped:
        log.info("psi[%d, %s] clipped from %g", k, layer, new)
        new = float(np.clip(new, -PSI_CLIP, PSI_CLIP))
    table.psi[k, j] = new
    return clipped


@dataclass
class GateTerm:
    site: int
    layer: str
    attended: np.ndarray   # A_k, held constant
    delta: np.ndarray      # flattened local update
    indicator: np.ndarray


def surrogate_loss(terms: Sequence[GateTerm], psi: PsiTable, weight, bias, chunks: int):
    """``-sum psi[k, l] * <A_tilde_kl, delta_kl> / d_l`` in site-then-layer order."""
    total = None
    for term in terms:
        gates = _gate_chunks(term.attended, term.indicator, weight, bias)
        a_tilde = _gated(term.attended, gates, chunks)
        coeff = -psi.psi[term.site, psi.index(term.layer)] / term.delta.shape[0]
        contrib = T.mul(T.sum_(T.mul(a_tilde, term.delta)), coeff)
        total = contrib if total is None else T.add(total, contrib)
    return total if total is not None else T.Var(0.0)


def train_gate_net(net: GateNet, terms: Sequence[GateTerm], psi: PsiTable) -> float:
    """One Adam step on the alignment surrogate. Returns the pre-step loss."""
    tape = T.Tape()
    w = tape.leaf(net.weight, "weight")
    b = tape.leaf(net.bias, "bias")
    loss = surrogate_loss(terms, psi, w, b, net.chunks)
    if loss.tape is None:
        grads = {"weight": np.zeros_like(net.weight), "bias": np.zeros_like(net.bias)}
    else:
        grads = tape.backward(loss)
    net.weight, _ = adam_step(net.weight, grads["weight"], net.optimizer_w)
    net.bias, _ = adam_step(net.bias, grads["bias"], net.optimizer_b)
    return float(loss.value)


@dataclass
class LhaConfig:
    chunks: int = 16
    gate_lr: float = 1e-3
    psi_lr: float = 1e-3
    psi_update: Literal["adam", "raw", "frozen"] = "adam"
    language_gate: bool = True
    include_heads_same_task: bool = False


@dataclass
class RoundDiagnostics:
    attention: dict[str, list[list[float]]] = field(default_factory=dict)
    psi: list[list[float]] = field(default_factory=list)
    gate_means: dict[str, list[float]] = field(default_factory=dict)
    psi_clipped: int = 0
    surrogate_loss: float = 0.0


class LhaServer:
    """Server state (gate net + psi table) and the per-round aggregation pipeline."""

    def __init__(self, K: int, layers: Sequence[str], indicator_dim: int, config: LhaConfig | None = None,
                 groups: dict[str, list[list[int]]] | None = None):
        self.config = config or LhaConfig()
        self.layers = list(layers)
        self.K = K
        self.groups = groups or {name: [list(range(K))] for name in self.layers}
        self.net = GateNet.zeros(indicator_dim, self.config.chunks, self.config.gate_lr)
        psi_lr = 0.0 if self.config.psi_update == "frozen" else self.config.psi_lr
        self.psi = PsiTable.zeros(K, self.layers, psi_lr)

    def aggregate(self, local: Sequence[ParameterSet], deltas: Sequence[ParameterSet],
                  indicators: Sequence[np.ndarray]) -> tuple[list[ParameterSet], RoundDiagnostics]:
        cfg = self.config
        diag = RoundDiagnostics()
        gated: list[dict[str, np.ndarray]] = [dict() for _ in range(self.K)]
        terms: list[GateTerm] = []
        attended: dict[tuple[int, str], np.ndarray] = {}
        for name in self.layers:
            weights_mat = np.zeros((self.K, self.K))
            means = [0.0] * self.K
            for members in self.groups[name]:
                V = stack_updates([deltas[k] for k in members], name)
                for row, k in enumerate(members):
                    a = attention_weights(V, row)
                    weights_mat[k, members] = a
                    A_k = cross_attention(V, row, a)
                    attended[(k, name)] = A_k
                    if cfg.language_gate:
                        a_tilde, gates = language_gate(A_k, indicators[k], self.net)
                        means[k] = float(np.mean(gates))
                    else:
                        a_tilde = A_k
                    gated[k][name] = a_tilde
            diag.attention[name] = weights_mat.tolist()
            diag.gate_means[name] = means

        new_params = []
        for k in range(self.K):
            row = {name: self.psi.psi[k, self.psi.index(name)] for name in gated[k]}
            new_params.append(aggregate_site(local[k], gated[k], row))

        for k in range(self.K):
            for name, a_tilde in gated[k].items():
                dw = deltas[k].entries[name].reshape(-1)
                if cfg.psi_update != "frozen":
                    diag.psi_clipped += update_psi(self.psi, k, name, a_tilde, dw, cfg.psi_update)
                terms.append(GateTerm(k, name, attended[(k, name)], dw, np.asarray(indicators[k])))
        if cfg.language_gate:
            diag.surrogate_loss = train_gate_net(self.net, terms, self.psi)
        diag.psi = self.psi.psi.tolist()
        return new_params, diag
