"""Small encoder-decoder multi-task network and its losses.

Layout: ``enc.*`` strided 3x3 convs -> optional LCS gate on the encoder output
-> ``dec.*`` nearest x2 upsample + 3x3 conv per stage -> ``head.*`` 1x1 conv.
Segmentation heads emit class logits; depth heads squash into the site's depth
range with a sigmoid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from . import lcs
from . import tensor as T
from .tensor import Var, tdf
from .text_embed import TextIndicator, fnv1a64

Group = Literal["shared", "personalized", "head"]


@dataclass(frozen=True)
class TaskSpec:
    kind: Literal["segmentation", "depth"]
    class_count: int = 0
    depth_range: tuple[float, float] = (1.0, 10.0)

    def __post_init__(self):
        if self.kind == "segmentation":
            if self.class_count < 2:
                raise ValueError("segmentation needs at least 2 classes")
        elif self.kind == "depth":
            lo, hi = self.depth_range
            if not 0 < lo < hi:
                raise ValueError(f"invalid depth range {self.depth_range}")
        else:
            raise ValueError(f"unknown task kind {self.kind!r}")

    @property
    def out_channels(self) -> int:
        return self.class_count if self.kind == "segmentation" else 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int, int] = (64, 64, 3)
    clip_length: int = 1
    encoder_widths: tuple[int, ...] = (8, 16)
    encoder_strides: tuple[int, ...] = (2, 2)
    decoder_widths: tuple[int, ...] = (16, 8)
    lcs_enabled: bool = True
    gate_axis: lcs.GateAxis = "channel"
    indicator_dim: int = 64

    def __post_init__(self):
        h, w, ch = self.input_size
        if ch != 3:
            raise ValueError("input must have 3 channels")
        if len(self.encoder_widths) != len(self.encoder_strides):
            raise ValueError("encoder widths and strides differ in length")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ValueError("decoder needs one stage per encoder stage")
        if any(s not in (1, 2) for s in self.encoder_strides):
            raise ValueError("encoder strides must be 1 or 2")
        down = 2 ** sum(s == 2 for s in self.encoder_strides)
        if h % down or w % down:
            raise ValueError(f"input {h}x{w} not divisible by total stride {down}")
        if self.clip_length < 1:
            raise ValueError("clip length must be >= 1")

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        for key in ("input_size", "encoder_widths", "encoder_strides", "decoder_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ParameterMismatch(ValueError):
    pass


@dataclass
class ParameterSet:
    """Ordered name -> array map with a group tag per name."""

    entries: dict[str, np.ndarray]
    partition: dict[str, str] = field(default_factory=dict)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.entries)
        return [n for n in self.entries if self.partition[n] == group]

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.entries.items()}, dict(self.partition))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def _check(self, other: "ParameterSet") -> None:
        if list(self.entries) != list(other.entries):
            raise ParameterMismatch("parameter names or ordering differ")
        for k, v in self.entries.items():
            if v.shape != other.entries[k].shape:
                raise ParameterMismatch(f"{k}: shape {v.shape} vs {other.entries[k].shape}")

    def __sub__(self, other: "ParameterSet") -> "ParameterSet":
        self._check(other)
        return ParameterSet({k: v - other.entries[k] for k, v in self.entries.items()},
                            dict(self.partition))

    def __add__(self, other: "ParameterSet") -> "ParameterSet":
        self._check(other)
        return ParameterSet({k: v + other.entries[k] for k, v in self.entries.items()},
                            dict(self.partition))

    def count(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.entries.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def group_of(name: str) -> Group:
    prefix = name.split(".", 1)[0]
    if prefix in ("enc", "dec"):
        return "shared"
    if prefix == "lcs":
        return "personalized"
    if prefix == "head":
        return "head"
    raise ValueError(f"unrecognised parameter name {name!r}")


def layer_shapes(config: ModelConfig, task: TaskSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, width in enumerate(config.encoder_widths):
        shapes[f"enc.{i}.kernel"] = (3, 3, cin, width)
        shapes[f"enc.{i}.bias"] = (width,)
        cin = width
    if config.lcs_enabled:
        shapes.update(lcs.param_shapes(cin, config.indicator_dim, config.gate_axis))
    for i, width in enumerate(config.decoder_widths):
        shapes[f"dec.{i}.kernel"] = (3, 3, cin, width)
        shapes[f"dec.{i}.bias"] = (width,)
        cin = width
    shapes["head.kernel"] = (1, 1, cin, task.out_channels)
    shapes["head.bias"] = (task.out_channels,)
    return shapes


def build_model(config: ModelConfig, task: TaskSpec, indicator: TextIndicator | None,
                init_seed: int) -> ParameterSet:
    """Fan-in scaled uniform init, seeded per layer name so shared layers match across sites."""
    if config.lcs_enabled and indicator is not None and indicator.dim != config.indicator_dim:
        raise ValueError(f"indicator dim {indicator.dim} != config {config.indicator_dim}")
    shapes = layer_shapes(config, task)
    entries: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.startswith(lcs.PREFIX):
            entries[name] = np.zeros(shape)
            continue
        stem = name.rsplit(".", 1)[0]
        kshape = shapes[f"{stem}.kernel"]
        fan_in = int(np.prod(kshape[:-1]))
        bound = np.sqrt(1.0 / fan_in)
        rng = np.random.default_rng([int(init_seed) & 0xFFFFFFFF, fnv1a64(name.encode())])
        entries[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(entries, {n: group_of(n) for n in entries})


def _frames(x: Var, h: int, w: int, c: int) -> Var:
    return T.reshape(x, (-1, h, w, c))


def forward(params: Mapping[str, object], x, indicator: TextIndicator | np.ndarray | None,
            task: TaskSpec, config: ModelConfig) -> Var:
    """Predict for ``x`` of shape ``[..., l, h, w, 3]``.

    Returns logits ``[..., l, h, w, C]`` or depths ``[..., l, h, w, 1]``.
    """
    x = T.as_var(x)
    h, w, _ = config.input_size
    if x.shape[-4:] != (config.clip_length, h, w, 3):
        raise T.DimensionError(
            f"input {x.shape} does not end with {(config.clip_length, h, w, 3)}")
    lead = x.shape[:-4]
    feat = _frames(x, h, w, 3)
    for i, stride in enumerate(config.encoder_strides):
        feat = T.relu(T.conv2d(feat, params[f"enc.{i}.kernel"], params[f"enc.{i}.bias"], stride))
    _, fh, fw, fc = feat.shape
    if config.lcs_enabled:
        vec = indicator.vector if isinstance(indicator, TextIndicator) else indicator
        clip = T.reshape(feat, (*lead, config.clip_length, fh, fw, fc))
        gate = lcs.lcs_gate(clip, vec, params, config.gate_axis)
        feat = _frames(lcs.lcs_apply(clip, gate), fh, fw, fc)
    for i, stride in enumerate(reversed(config.encoder_strides)):
        if stride == 2:
            feat = T.upsample2x(feat)
        feat = T.relu(T.conv2d(feat, params[f"dec.{i}.kernel"], params[f"dec.{i}.bias"], 1))
    out = T.conv2d(feat, params["head.kernel"], params["head.bias"], 1)
    if task.kind == "depth":
        lo, hi = task.depth_range
        out = T.add(lo, T.mul(hi - lo, T.sigmoid(out)))
    return T.reshape(out, (*lead, config.clip_length, h, w, task.out_channels))


def compute_loss(prediction, target, task: TaskSpec) -> Var:
    """Mean pixel-wise cross-entropy (segmentation) or mean absolute error (depth)."""
    prediction = T.as_var(prediction)
    target = np.asarray(target)
    if task.kind == "segmentation":
        labels = target.astype(np.intp)
        if labels.shape != prediction.shape[:-1]:
            raise T.DimensionError(f"labels {labels.shape} vs logits {prediction.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= task.class_count):
            raise ValueError(f"label ids must lie in [0, {task.class_count})")
        return T.mul(T.mean(T.pick(T.log_softmax(prediction), labels)), -1.0)
    pred = prediction
    if pred.shape[-1] == 1 and pred.shape[:-1] == target.shape:
        pred = T.reshape(pred, target.shape)
    if pred.shape != target.shape:
        raise T.DimensionError(f"depth prediction {prediction.shape} vs target {target.shape}")
    return T.mean(T.absolute(T.sub(pred, target)))


def predict(params: ParameterSet, x, indicator, task: TaskSpec, config: ModelConfig) -> np.ndarray:
    return forward(params.entries, x, indicator, task, config).value


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(params: ParameterSet, directory, extra: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, arr in params.entries.items():
        fname = f"{name}.tdf"
        tdf.save(directory / fname, arr)
        layers.append({"name": name, "shape": list(arr.shape),
                       "partition": params.partition[name], "file": fname})
    manifest = {"layers": layers, **(dict(extra) if extra else {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> tuple[ParameterSet, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries, partition = {}, {}
    for layer in manifest["layers"]:
        arr = tdf.load(directory / layer["file"])
        if list(arr.shape) != layer["shape"]:
            raise tdf.TDFFormatError(f"{layer['name']}: shape {arr.shape} != manifest {layer['shape']}")
        entries[layer["name"]] = arr
        partition[layer["name"]] = layer["partition"]
    return ParameterSet(entries, partition), manifest
