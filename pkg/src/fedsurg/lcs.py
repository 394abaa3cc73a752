"""Language-guided channel selection.

A site-private gate computed from pooled encoder features and the site
indicator, applied with a residual: ``F* = F + F * gate``. The gate lives in
(0, 1), so every feature keeps its sign and grows by a factor in (1, 2).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from . import tensor as T
from .tensor import Var

GateAxis = Literal["channel", "spatial"]

PREFIX = "lcs."


def param_shapes(c: int, d: int, axis: GateAxis = "channel") -> dict[str, tuple[int, ...]]:
    if axis == "channel":
        return {"lcs.fc_weight": (c + d, c), "lcs.fc_bias": (c,)}
    if axis == "spatial":
        return {"lcs.proj_weight": (d, 1), "lcs.pixel_weight": (2, 1), "lcs.pixel_bias": (1,)}
    raise ValueError(f"unknown gate axis {axis!r}")


@dataclass
class ChannelGate:
    """Gate values shaped to broadcast against ``[..., l, h, w, c]``.

    Channel axis: ``[..., 1, 1, 1, c]``. Spatial axis: ``[..., l, h, w, 1]``.
    """

    values: Var
    axis: GateAxis


def lcs_gate(F, indicator: np.ndarray, params: Mapping[str, object],
             axis: GateAxis = "channel") -> ChannelGate:
    F = T.as_var(F)
    xi = np.asarray(indicator, dtype=np.float64)
    lead = F.shape[:-4]
    l, h, w, c = F.shape[-4:]
    d = xi.shape[0]
    if axis == "channel":
        wt = T.as_var(params["lcs.fc_weight"])
        if wt.shape != (c + d, c):
            raise ValueError(f"LCS weight {wt.shape} does not fit c={c}, d={d}")
        pooled = T.global_avg_pool(F)                              # [..., c]
        expanded = np.broadcast_to(xi, (*lead, d))
        z = T.affine(T.concat([pooled, expanded], axis=-1), wt, params["lcs.fc_bias"])
        gate = T.sigmoid(z)
        return ChannelGate(T.reshape(gate, (*lead, 1, 1, 1, c)), axis)
    if axis == "spatial":
        pw = T.as_var(params["lcs.proj_weight"])
        if pw.shape != (d, 1):
            raise ValueError(f"LCS projection {pw.shape} does not fit d={d}")
        pooled = T.mean(F, axis=-1, keepdims=True)                 # [..., l, h, w, 1]
        proj = T.affine(xi, pw, np.zeros(1))                       # [1]
        text_map = T.broadcast_to(proj, pooled.shape)
        z = T.affine(T.concat([pooled, text_map], axis=-1),
                     params["lcs.pixel_weight"], params["lcs.pixel_bias"])
        return ChannelGate(T.sigmoid(z), axis)
    raise ValueError(f"unknown gate axis {axis!r}")


def lcs_apply(F, gate: ChannelGate) -> Var:
    F = T.as_var(F)
    return T.add(F, T.mul(F, gate.values))
