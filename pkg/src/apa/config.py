"""Experiment configuration: a YAML file mapped onto strict dataclasses.

Unknown keys are rejected at every level. Precedence is flag > file > default.
Each pipeline stage is keyed by a hash of exactly the sections it depends on,
so changing an attack knob never retrains the denoiser.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from apa.attack import AttackConfig
from apa.augment import AugmentSpec
from apa.errors import InvalidArgumentError
from apa.io import config_hash
from apa.models import DEFAULT_ZOO, ClassifierSpec
from apa.vca import VcaConfig


@dataclass
class DatasetSpec:
    n_train: int = 512
    n_eval: int = 128
    seed: int = 0


@dataclass
class ScheduleSpec:
    """Length of the linear-beta (1e-4 to 0.02) training process."""

    train_steps: int = 1000


@dataclass
class DenoiserSpec:
    base: int = 24
    cond_dim: int = 16
    epochs: int = 150
    lr: float = 2e-3
    batch_size: int = 64
    p_uncond: float = 0.5
    seed: int = 0
    codec: str = "identity"


@dataclass
class ZooSpec:
    models: dict = field(default_factory=lambda: {k: dataclasses.asdict(v) for k, v in DEFAULT_ZOO.items()})
    gate: float = 0.9

    def __post_init__(self):
        if "substitute" not in self.models:
            raise InvalidArgumentError("zoo needs a 'substitute' entry")
        if len(self.models) < 2:
            raise InvalidArgumentError("zoo needs at least one target besides the substitute")
        for name, spec in self.models.items():
            _strict(ClassifierSpec, spec, f"zoo.models.{name}")

    def specs(self):
        return {k: ClassifierSpec(**{**v, "accuracy": None}) for k, v in self.models.items()}


@dataclass
class EvalSpec:
    benchmark_size: int = 64
    probe: str = "cnn_b"
    chunk_size: int = 64
    robustness_sigma: float = 0.1
    robustness_trials: int = 2


SECTIONS = {
    "dataset": DatasetSpec,
    "schedule": ScheduleSpec,
    "denoiser": DenoiserSpec,
    "vca": VcaConfig,
    "attack": AttackConfig,
    "augment": AugmentSpec,
    "zoo": ZooSpec,
    "eval": EvalSpec,
}
SEEDED = ("vca", "attack", "augment")


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{where} must be a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidArgumentError(f"unknown keys in {where}: {unknown}; allowed: {sorted(known)}")
    return data


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    vca: VcaConfig = field(default_factory=VcaConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    zoo: ZooSpec = field(default_factory=ZooSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out: str = "runs"
    seed: int = 0
    workers: int = 1
    use_vca: bool = True
    one_stage_lambda: Optional[float] = None

    @classmethod
    def from_dict(cls, data: Optional[dict] = None):
        data = copy.deepcopy(data or {})
        _strict(cls, data, "config")
        seed = int(data.get("seed", 0))
        kw = {}
        for name, sec in SECTIONS.items():
            body = data.pop(name, None) or {}
            _strict(sec, body, name)
            if name in SEEDED:
                body.setdefault("seed", seed)
            if name == "augment" and "brightness_range" in body:
                body["brightness_range"] = tuple(body["brightness_range"])
            try:
                kw[name] = sec(**body)
            except TypeError as exc:
                raise InvalidArgumentError(f"bad {name} section: {exc}") from None
        cfg = cls(**kw, **data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None):
        data = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise InvalidArgumentError(f"config file not found: {p}")
            try:
                data = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as exc:
                raise InvalidArgumentError(f"config file {p} is not valid YAML: {exc}") from None
        return cls.from_dict(apply_overrides(data, overrides or {}))

    def validate(self):
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if self.eval.probe not in self.zoo.models or self.eval.probe == "substitute":
            raise InvalidArgumentError(f"eval.probe must name a zoo target, got {self.eval.probe!r}")
        if self.eval.benchmark_size < 1 or self.eval.benchmark_size > self.dataset.n_eval:
            raise InvalidArgumentError("eval.benchmark_size must lie in [1, dataset.n_eval]")
        if self.eval.chunk_size < 1:
            raise InvalidArgumentError("eval.chunk_size must be >= 1")
        if self.one_stage_lambda is not None and self.one_stage_lambda < 0:
            raise InvalidArgumentError("one_stage_lambda must be >= 0")
        if self.denoiser.codec not in ("identity", "tiny_autoencoder"):
            raise InvalidArgumentError(f"unknown codec {self.denoiser.codec!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augment"]["brightness_range"] = list(d["augment"]["brightness_range"])
        return d

    # stage keys -----------------------------------------------------------
    def prepare_key(self):
        d = self.to_dict()
        return config_hash({k: d[k] for k in ("dataset", "schedule", "denoiser", "zoo")})

    def align_key(self):
        return config_hash({"prepare": self.prepare_key(), "vca": self.to_dict()["vca"],
                            "benchmark": self.eval.benchmark_size})

    def run_key(self):
        """Hash of everything that influences attack outputs and reports."""
        d = self.to_dict()
        for k in ("out", "workers"):
            d.pop(k)
        return config_hash(d)


def apply_overrides(data, overrides):
    """Merge dotted-key overrides (``{"attack.mode": "SG"}``) into a raw config dict."""
    data = copy.deepcopy(data)
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return data
