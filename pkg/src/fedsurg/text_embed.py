"""Per-site conditioning vectors.

The text variant is a deterministic offline stand-in for a pretrained text
encoder: the prompt is hashed with 64-bit FNV-1a, the hash seeds xoshiro256**
(state expanded with splitmix64), Box-Muller turns the stream into Gaussians,
and the result is L2-normalised. Same prompt, same vector, on every machine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .tensor import tdf

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
DEFAULT_DIM = 64

IndicatorKind = Literal["text", "one_hot", "random"]


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(state: int) -> tuple[int, int]:
    """Return (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256StarStar:
    def __init__(self, seed: int):
        sm = seed & MASK64
        self.s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            self.s.append(out)

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def standard_normals(self, n: int) -> np.ndarray:
        out = []
        while len(out) < n:
            u1 = ((self.next_u64() >> 11) + 1) * 2.0 ** -53  # (0, 1], keeps log finite
            u2 = (self.next_u64() >> 11) * 2.0 ** -53
            r = math.sqrt(-2.0 * math.log(u1))
            out.append(r * math.cos(2.0 * math.pi * u2))
            out.append(r * math.sin(2.0 * math.pi * u2))
        return np.array(out[:n], dtype=np.float64)


@dataclass(frozen=True)
class TextIndicator:
    vector: np.ndarray
    kind: IndicatorKind
    source: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("cannot normalise a zero or non-finite vector")
    return v / norm


def site_prompt(dataset: str, task: str, labels) -> str:
    return f"Dataset: {dataset}, Task: {task}, Label: {', '.join(labels)}"


def embed_prompt(prompt: str, d: int = DEFAULT_DIM) -> TextIndicator:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if d < 1:
        raise ValueError("embedding dimension must be positive")
    rng = Xoshiro256StarStar(fnv1a64(prompt.encode("utf-8")))
    return TextIndicator(_unit(rng.standard_normals(d)), "text", {"prompt": prompt})


def make_indicator(kind: IndicatorKind, site: int = 0, prompt: str = "", K: int = 1,
                   d: int = DEFAULT_DIM, seed: int = 0) -> TextIndicator:
    if kind == "text":
        return embed_prompt(prompt, d)
    if kind == "one_hot":
        if not 0 <= site < d:
            raise ValueError(f"one-hot indicator needs site index < d ({site} >= {d})")
        v = np.zeros(d)
        v[site] = 1.0
        return TextIndicator(v, "one_hot", {"site": site, "K": K})
    if kind == "random":
        rng = Xoshiro256StarStar(seed)
        return TextIndicator(_unit(rng.standard_normals(d)), "random", {"seed": seed})
    raise ValueError(f"unknown indicator kind {kind!r}")


def load_embedding_file(path) -> TextIndicator:
    arr = tdf.load(path)
    if arr.ndim != 1:
        raise tdf.TDFFormatError(f"embedding file must hold a rank-1 tensor, got rank {arr.ndim}")
    return TextIndicator(_unit(arr), "text", {"path": str(Path(path))})
