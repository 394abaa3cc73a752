"""Dice / IoU / RMSE and the relative-improvement score over a local-training baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

DIRECTIONS = {"dice": +1, "iou": +1, "rmse": -1}


@dataclass(frozen=True)
class Metric:
    name: str
    value: float
    direction: int


class MetricSet(list):
    """A list of ``Metric`` entries; its length is the metric count in the mean."""

    @classmethod
    def from_mapping(cls, values: Mapping[str, float]) -> "MetricSet":
        return cls(Metric(k, float(v), DIRECTIONS[k.split("/")[-1]]) for k, v in values.items())


def dice_iou(prediction, target, C: int) -> tuple[float, float] | None:
    """Mean foreground Dice and IoU in percent, or None when no foreground class occurs.

    Classes absent from both maps are skipped.
    """
    p = np.asarray(prediction).astype(np.int64)
    g = np.asarray(target).astype(np.int64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} vs target {g.shape}")
    if p.size and (p.max() >= C or g.max() >= C or p.min() < 0 or g.min() < 0):
        raise ValueError(f"class ids must lie in [0, {C})")
    dices, ious = [], []
    for c in range(1, C):
        pc, gc = p == c, g == c
        sp, sg = int(pc.sum()), int(gc.sum())
        if sp == 0 and sg == 0:
            continue
        inter = int(np.logical_and(pc, gc).sum())
        dices.append(2.0 * inter / (sp + sg))
        ious.append(inter / (sp + sg - inter))
    if not dices:
        return None
    return 100.0 * float(np.mean(dices)), 100.0 * float(np.mean(ious))


def pooled_dice_iou(predictions: Sequence, targets: Sequence, C: int) -> tuple[float, float] | None:
    """Same as ``dice_iou`` but with pixel counts pooled over all images."""
    return dice_iou(np.concatenate([np.ravel(p) for p in predictions]),
                    np.concatenate([np.ravel(t) for t in targets]), C)


def rmse(prediction, target) -> float:
    p, t = np.asarray(prediction, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} vs target {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def delta_m(run: Sequence[Metric], baseline: Sequence[Metric]) -> float:
    """Mean signed relative change versus the baseline, in percent."""
    return float(np.mean(delta_m_terms(run, baseline)))


def delta_m_terms(run: Sequence[Metric], baseline: Sequence[Metric]) -> list[float]:
    if len(run) != len(baseline) or not run:
        raise ValueError("metric sets differ in size or are empty")
    terms = []
    for m, b in zip(run, baseline):
        if m.name != b.name or m.direction != b.direction:
            raise ValueError(f"metric mismatch: {m.name}/{m.direction} vs {b.name}/{b.direction}")
        if not b.value > 0:
            raise ValueError(f"baseline value for {b.name} must be positive, got {b.value}")
        terms.append(m.direction * (m.value - b.value) / b.value * 100.0)
    return terms


def summarize(runs: Iterable[Mapping[str, float]]) -> dict[str, tuple[float, float]]:
    """Per metric ``(mean, sample std)``; std is 0 for a single run."""
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    out = {}
    for name in runs[0]:
        vals = np.array([r[name] for r in runs], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[name] = (float(np.mean(vals)), std)
    return out


def evaluate_segmentation(logits: np.ndarray, targets: np.ndarray, C: int, pooled: bool = False) -> dict:
    preds = np.argmax(logits, axis=-1)
    if pooled:
        res = pooled_dice_iou(list(preds), list(targets), C)
        dice, iou = res if res is not None else (math.nan, math.nan)
        return {"dice": dice, "iou": iou}
    per = [dice_iou(p, t, C) for p, t in zip(preds, targets)]
    per = [r for r in per if r is not None]
    if not per:
        return {"dice": math.nan, "iou": math.nan}
    return {"dice": float(np.mean([r[0] for r in per])), "iou": float(np.mean([r[1] for r in per]))}


def evaluate_depth(predictions: np.ndarray, targets: np.ndarray, pooled: bool = False) -> dict:
    if pooled:
        return {"rmse": rmse(predictions, targets)}
    return {"rmse": float(np.mean([rmse(p, t) for p, t in zip(predictions, targets)]))}
