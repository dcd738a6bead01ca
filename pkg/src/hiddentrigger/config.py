"""Experiment configuration: flat key=value files with dotted section names.

Example file:

    dataset.kind = synthetic
    dataset.num_classes = 4
    pair.source_category = 0
    pair.target_category = 1
    poison.epsilon = 16
    seeds.master = 0

Values can be overridden from the environment with the HT_ prefix, dots
replaced by double underscores (HT_POISON__EPSILON=8). Every stage derives
its own seed from seeds.master and the stage name, so toggling one stage
never perturbs another stage's randomness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .nnet import FinetuneConfig, PretrainConfig, TRAINABLE_LAYERS, FEATURE_LAYERS
from .poison import PoisonConfig

ENV_PREFIX = "HT_"


class ConfigError(ValueError):
    """Raised for malformed or invalid experiment configuration."""


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 4
    per_class: int = 600
    cifar_train: tuple[str, ...] = ()
    cifar_test: str = ""


@dataclass
class SplitConfig:
    n_gen: int = 150
    n_finetune: int = 300
    n_test: int = 150


@dataclass
class PairConfig:
    source_category: int = 0
    target_category: int = 1


@dataclass
class TriggerConfig:
    patch_size: int = 8
    trigger_id: int = 0


@dataclass
class EvalConfig:
    n_placements: int = 1
    placement_mode: str = "corner"


@dataclass
class DefenseConfig:
    enabled: bool = True
    percentile: float = 85.0


@dataclass
class SeedsConfig:
    master: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    pair: PairConfig = field(default_factory=PairConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    output_dir: str = "runs/experiment"
    pretrained_checkpoint: str = ""

    def validate(self) -> None:
        ds = self.dataset
        if ds.kind not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset.kind must be synthetic or cifar, got {ds.kind!r}")
        if ds.kind == "cifar" and not ds.cifar_train:
            raise ConfigError("dataset.cifar_train is required for dataset.kind=cifar")
        if ds.kind == "synthetic" and not (2 <= ds.num_classes <= 10):
            raise ConfigError("dataset.num_classes must be in 2..10 for synthetic data")
        num_classes = 10 if ds.kind == "cifar" else ds.num_classes
        if min(self.split.n_gen, self.split.n_finetune, self.split.n_test) < 1:
            raise ConfigError("all split sizes must be positive")
        pr = self.pair
        if pr.source_category == pr.target_category:
            raise ConfigError("pair.source_category must differ from pair.target_category")
        for cat in (pr.source_category, pr.target_category):
            if not (0 <= cat < num_classes):
                raise ConfigError(f"category {cat} out of range for {num_classes} classes")
        if self.trigger.patch_size < 4:
            raise ConfigError("trigger.patch_size must be at least 4")
        if self.trigger.patch_size > 32:
            raise ConfigError("trigger.patch_size cannot exceed the 32-pixel image side")
        try:
            self.poison.validate()
        except ValueError as exc:
            raise ConfigError(f"poison: {exc}") from exc
        if self.poison.embedding_layer not in FEATURE_LAYERS:
            raise ConfigError(
                f"poison.embedding_layer must be one of {FEATURE_LAYERS}"
            )
        bad = [l for l in self.finetune.trainable_layers if l not in TRAINABLE_LAYERS]
        if not self.finetune.trainable_layers or bad:
            raise ConfigError(
                f"finetune.trainable_layers must be a non-empty subset of {TRAINABLE_LAYERS}"
            )
        if self.eval.placement_mode not in ("random", "corner"):
            raise ConfigError("eval.placement_mode must be random or corner")
        if self.eval.n_placements < 1:
            raise ConfigError("eval.n_placements must be positive")
        if not (0.0 < self.defense.percentile < 100.0):
            raise ConfigError("defense.percentile must be in (0, 100)")
        for what, n in (("pretrain", self.pretrain.epochs), ("finetune", self.finetune.epochs)):
            if n < 0:
                raise ConfigError(f"{what}.epochs must be non-negative")


def derive_seed(master: int, stage: str) -> int:
    """Stable per-stage seed: sha256(master:stage) folded to 31 bits."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(raw: str, annotation, key: str):
    # Field annotations are strings because the defining modules use
    # deferred annotation evaluation.
    ann = annotation if isinstance(annotation, str) else str(annotation)
    raw = raw.strip()
    if "tuple" in ann:
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if "None" in ann:
        if raw.lower() in ("", "none", "null"):
            return None
        ann = "float" if "float" in ann else "int"
    if ann == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if ann == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if ann == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ann == "str":
        return raw
    raise ConfigError(f"{key}: unsupported config field type {ann!r}")


def _flatten(config: ExperimentConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for section_name, section_field in _SECTIONS.items():
        value = getattr(config, section_name)
        if not dataclasses.is_dataclass(value):
            flat[section_name] = str(value)
            continue
        for f in dataclasses.fields(value):
            v = getattr(value, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            flat[f"{section_name}.{f.name}"] = str(v)
    return flat


def serialize_config(config: ExperimentConfig) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(_flatten(config).items())]
    return "\n".join(lines) + "\n"


def parse_config(
    text: str, environ: dict[str, str] | None = None
) -> ExperimentConfig:
    """Parse flat key=value text, then apply HT_ environment overrides."""
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        flat[key.strip()] = value.strip()

    environ = os.environ if environ is None else environ
    for env_key, env_value in environ.items():
        if not env_key.startswith(ENV_PREFIX):
            continue
        key = env_key[len(ENV_PREFIX):].lower().replace("__", ".")
        flat[key] = env_value

    config = ExperimentConfig()
    for key, raw in flat.items():
        if "." not in key:
            if key in ("output_dir", "pretrained_checkpoint"):
                setattr(config, key, raw)
                continue
            raise ConfigError(f"unknown config key {key!r}")
        section_name, field_name = key.split(".", 1)
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(config, section_name)
        matching = {f.name: f for f in dataclasses.fields(section)}
        if field_name not in matching:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, field_name, _coerce(raw, matching[field_name].type, key))
    return config


def load_config(path, environ: dict[str, str] | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), environ)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(serialize_config(config))
    return path
