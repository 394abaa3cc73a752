"""Experiment configuration: one JSON document with model/sites/method/train/data sections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Literal

import jsonschema

from .data import SiteSpec, default_benchmark_sites
from .lha import LhaConfig
from .model import ModelConfig

METHODS = ("local", "fedavg", "fedavg_cluster", "fedrep", "fedprox", "surgfed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    method: str = "surgfed"
    fedprox_mu: float = 0.01
    lcs_enabled: bool | None = None
    lha_enabled: bool | None = None
    text_prompt_only: bool = False
    lha_language_gate: bool = True
    indicator: Literal["text", "one_hot", "random"] = "text"
    freeze_groups: tuple[str, ...] = ()
    psi_update: Literal["adam", "raw", "frozen"] = "adam"
    include_heads_same_task: bool = False
    chunks: int = 16

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.lcs_enabled is None:
            object.__setattr__(self, "lcs_enabled", self.method == "surgfed" and not self.text_prompt_only)
        if self.lha_enabled is None:
            object.__setattr__(self, "lha_enabled", self.method == "surgfed")
        if self.method == "surgfed" and not self.lha_enabled:
            raise ConfigError("method surgfed requires lha_enabled")
        if self.lha_enabled and self.method != "surgfed":
            raise ConfigError("lha_enabled is only meaningful with method surgfed")
        if self.text_prompt_only and (not self.lha_enabled or self.lcs_enabled):
            raise ConfigError("text_prompt_only requires lha_enabled and lcs disabled")
        if self.fedprox_mu < 0:
            raise ConfigError("fedprox_mu must be non-negative")
        if self.psi_update not in ("adam", "raw", "frozen"):
            raise ConfigError(f"unknown psi_update {self.psi_update!r}")
        if self.indicator not in ("text", "one_hot", "random"):
            raise ConfigError(f"unknown indicator kind {self.indicator!r}")
        if self.chunks < 1:
            raise ConfigError("chunks must be positive")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    epochs: int = 3
    lr: float = 1e-4
    gate_lr: float = 1e-3
    psi_lr: float = 1e-3
    batch_size: int = 4
    seed: int = 1
    init_seed: int = 0
    indicator_seed: int = 0
    pooled_metrics: bool = False
    parallel: bool = False
    baseline_run: str | None = None

    def __post_init__(self):
        if self.rounds < 0 or self.epochs < 0:
            raise ConfigError("rounds and epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if min(self.lr, self.gate_lr, self.psi_lr) < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 50
    dir: str | None = None


@dataclass(frozen=True)
class SiteConfig:
    spec: SiteSpec
    stream_id: int | None = None
    prompt: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    sites: tuple[SiteConfig, ...]
    method: MethodConfig = field(default_factory=MethodConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    name: str = "run"

    def __post_init__(self):
        if not self.sites:
            raise ConfigError("at least one site is required")
        h, w, _ = self.model.input_size
        for s in self.sites:
            if tuple(s.spec.image_size) != (h, w):
                raise ConfigError(f"site {s.spec.name}: image size {s.spec.image_size} != model input {(h, w)}")
        if self.model.clip_length != 1:
            raise ConfigError("synthetic sites provide single frames; clip_length must be 1")
        if self.model.lcs_enabled != self.method.lcs_enabled:
            object.__setattr__(self, "model", replace(self.model, lcs_enabled=bool(self.method.lcs_enabled)))

    @property
    def lha_config(self) -> LhaConfig:
        return LhaConfig(chunks=self.method.chunks, gate_lr=self.train.gate_lr, psi_lr=self.train.psi_lr,
                         psi_update=self.method.psi_update, language_gate=self.method.lha_language_gate,
                         include_heads_same_task=self.method.include_heads_same_task)

    def to_dict(self) -> dict:
        sites = []
        for s in self.sites:
            d = s.spec.to_dict()
            if s.stream_id is not None:
                d["stream_id"] = s.stream_id
            if s.prompt is not None:
                d["prompt"] = s.prompt
            sites.append(d)
        return {"name": self.name, "model": self.model.to_dict(), "sites": sites,
                "method": asdict(self.method), "train": asdict(self.train), "data": asdict(self.data)}

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def with_(self, **sections) -> "ExperimentConfig":
        """Return a copy with section fields overridden, e.g. ``with_(train={"rounds": 2})``."""
        kwargs = {}
        for key, value in sections.items():
            current = getattr(self, key)
            kwargs[key] = replace(current, **value) if isinstance(value, dict) else value
        return replace(self, **kwargs)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def schema() -> dict:
    return json.loads(resources.files("fedsurg").joinpath("config.schema.json").read_text())


def _build(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
    try:
        model = ModelConfig.from_dict(doc.get("model", {}))
        sites = []
        for raw in doc["sites"]:
            raw = dict(raw)
            stream_id = raw.pop("stream_id", None)
            prompt = raw.pop("prompt", None)
            sites.append(SiteConfig(SiteSpec.from_dict(raw), stream_id, prompt))
        method = dict(doc.get("method", {}))
        if "freeze_groups" in method:
            method["freeze_groups"] = tuple(method["freeze_groups"])
        return ExperimentConfig(model, tuple(sites), _build(MethodConfig, method, "method"),
                                _build(TrainConfig, doc.get("train", {}), "train"),
                                _build(DataConfig, doc.get("data", {}), "data"),
                                doc.get("name", "run"))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def benchmark_config(method: str = "surgfed", seed: int = 1, image_size=(32, 32), **method_overrides) -> ExperimentConfig:
    """The default 5-site desk benchmark (T=20, E=3)."""
    h, w = image_size
    sites = tuple(SiteConfig(s) for s in default_benchmark_sites((h, w)))
    return ExperimentConfig(
        ModelConfig(input_size=(h, w, 3)),
        sites,
        MethodConfig(method=method, **method_overrides),
        TrainConfig(rounds=20, epochs=3, lr=1e-3, seed=seed),
        DataConfig(n_samples=50),
        name=f"bench5-{method}-s{seed}",
    )


ABLATION_ROWS = {
    1: dict(method="fedavg"),
    2: dict(method="fedavg", lcs_enabled=True),
    3: dict(method="surgfed", lcs_enabled=False, lha_language_gate=False),
    4: dict(method="surgfed", lcs_enabled=False, text_prompt_only=True),
    5: dict(method="surgfed", lcs_enabled=True),
}


def ablation_method(row: int) -> MethodConfig:
    """Method settings for the component ablation rows (1: no LCS/LHA ... 5: full)."""
    return MethodConfig(**ABLATION_ROWS[row])
