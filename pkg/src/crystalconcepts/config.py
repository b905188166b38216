"""Run configuration: nested dataclasses loaded from YAML or JSON.

Unknown keys are rejected at every level.  Defaults are the full-scale
values; :data:`PRESETS` adds a desk-scale variant small enough for a laptop
CPU.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .codebook import CodebookConfig
from .composition import GeneratorConfig
from .errors import ConfigError
from .generator import BaseModelConfig
from .interpretation import ClassifierConfig
from .matcher import MatcherConfig
from .synthetic import SyntheticTemplateSpec

DATA_DIR_ENV = "CRYSTALCONCEPTS_DATA_DIR"

STAGES = (
    "data", "train_vqvae", "extract", "train_gen", "sample", "filter", "refine",
    "train_base", "generate", "evaluate", "interpret",
)


@dataclass(frozen=True)
class DataConfig:
    # "synthetic", "jsonl" or "cif-subset"
    source: str = "synthetic"
    path: str | None = None
    strict: bool = False
    synthetic: SyntheticTemplateSpec = field(default_factory=SyntheticTemplateSpec)

    def __post_init__(self):
        if self.source not in ("synthetic", "jsonl", "cif-subset"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data source {self.source!r} needs a path")


@dataclass(frozen=True)
class SamplingConfig:
    n_compositions: int = 1000
    n_generate: int = 1000
    # also train and evaluate an unconditional base model for comparison
    unconditional_baseline: bool = True


@dataclass(frozen=True)
class OracleConfig:
    contact: float = 0.9
    strength: float = 1.0
    steps: int = 50
    step_size: float = 0.2


@dataclass(frozen=True)
class InterpretConfig:
    top_k: int = 5
    # codes whose nearest environments are dumped; empty means every used code
    codes: tuple = ()
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    train_classifier: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    composition: GeneratorConfig = field(default_factory=GeneratorConfig)
    base: BaseModelConfig = field(default_factory=BaseModelConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)
    stages: dict = field(default_factory=lambda: {s: True for s in STAGES})

    def __post_init__(self):
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        stages = {s: bool(self.stages.get(s, True)) for s in STAGES}
        object.__setattr__(self, "stages", stages)
        limit = self.codebook.max_atoms
        if self.composition.max_atoms < limit or self.base.max_atoms < limit:
            raise ConfigError("generator max_atoms must cover the codebook's max_atoms")

    def to_dict(self):
        return asdict(self)

    def resolved_output_dir(self):
        out = Path(self.output_dir)
        if not out.is_absolute() and os.environ.get(DATA_DIR_ENV):
            out = Path(os.environ[DATA_DIR_ENV]) / out
        return out


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(values):
    return _build(RunConfig, values, "config")


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


DESK = {
    "data": {"synthetic": {"count": 300, "holdout_fraction": 0.3}},
    "codebook": {"codebook_size": 64, "latent_dim": 8, "layers": 2, "hidden": 64, "heads": 4,
                 "max_atoms": 8, "batch_size": 32, "vae_epochs": 100, "vqvae_epochs": 100},
    "composition": {"layers": 2, "hidden": 64, "heads": 4, "steps": 100, "max_atoms": 8,
                    "batch_size": 32, "epochs": 200, "refine_epochs": 50},
    "base": {"layers": 2, "hidden": 128, "heads": 4, "steps": 100, "max_atoms": 8,
             "batch_size": 32, "epochs": 1000, "lr_schedule": "cosine"},
    "sampling": {"n_compositions": 300, "n_generate": 200},
    "interpret": {"classifier": {"layers": 2, "hidden": 64, "heads": 4, "epochs": 60,
                                 "batch_size": 32, "max_atoms": 8}},
}

PRESETS = {"full": {}, "desk": DESK}


def load_config(path=None, preset="full", overrides=None):
    """Preset, then file contents, then ``overrides`` (a nested dict), merged in order."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        values = _merge(values, loaded or {})
    if overrides:
        values = _merge(values, overrides)
    return config_from_dict(values)


def parse_override(text):
    """``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out
