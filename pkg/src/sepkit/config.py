"""INI-style run configuration: one section per component, flags override file values."""

from __future__ import annotations

import configparser
import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field, fields
from io import StringIO
from pathlib import Path

from .losses import LossWeights
from .mixer import DatasetSpec
from .model import SeparatorConfig
from .train import TrainConfig

SEED_ENV = "SEPKIT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class EvalOptions:
    mode: str = "unknown"
    selector: str = "gate"
    silence_threshold_db: float = -20.0
    split: str = "test"

    def __post_init__(self):
        if self.mode not in ("known", "unknown"):
            raise ValueError("eval mode must be 'known' or 'unknown'")
        if self.selector not in ("gate", "silent"):
            raise ValueError("selector must be 'gate' or 'silent'")


SECTIONS = {
    "dataset": DatasetSpec,
    "model": SeparatorConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "eval": EvalOptions,
}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=dict)
    model: SeparatorConfig = field(default_factory=SeparatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    profile: str = "desk"

    def dataset_spec(self) -> DatasetSpec:
        if "speech_root" not in self.dataset:
            raise ConfigError("[dataset] speech_root is required")
        values = dict(self.dataset)
        if self.profile in DatasetSpec.PROFILES:
            for key, n in zip(("train_size", "val_size", "test_size"), DatasetSpec.PROFILES[self.profile]):
                values.setdefault(key, n)
        return _build(DatasetSpec, values, "dataset")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.init}


def _parse_value(raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        inner = args[0] if args else str
        return tuple(_parse_value(v, inner) for v in raw.split(",") if v.strip())
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint in (int, float, str):
        return hint(raw)
    return raw


def _build(cls, values: dict, section: str):
    hints = _field_types(cls)
    parsed = {}
    for key, raw in values.items():
        if key not in hints:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        try:
            parsed[key] = _parse_value(raw, hints[key]) if isinstance(raw, str) else raw
        except (ValueError, StopIteration) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        return cls(**parsed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI file and apply ``section.key=value`` overrides.

    ``$SEPKIT_SEED`` replaces the dataset and training seeds.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        for section in ("dataset", "train"):
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, "seed", seed)

    unknown = set(parser.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    def section(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    profile = section("run").get("profile", "desk")
    if profile not in DatasetSpec.PROFILES:
        raise ConfigError(f"unknown profile '{profile}' (choose from {sorted(DatasetSpec.PROFILES)})")
    dataset = section("dataset")
    _check_keys(DatasetSpec, dataset, "dataset")
    weights = _build(LossWeights, section("loss"), "loss")
    train_cfg = _build(TrainConfig, section("train"), "train")
    train_cfg.weights = weights
    return RunConfig(
        dataset=dataset,
        model=_build(SeparatorConfig, section("model"), "model"),
        train=train_cfg,
        eval=_build(EvalOptions, section("eval"), "eval"),
        profile=profile,
    )


def _check_keys(cls, values: dict, section: str) -> None:
    hints = _field_types(cls)
    for key in values:
        if key not in hints:
            raise ConfigError(f"unknown key '{key}' in [{section}]")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Resolved configuration as INI text; reloading it reproduces ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"profile": cfg.profile}
    parser["dataset"] = {k: _format(v) for k, v in cfg.dataset.items()}
    parser["model"] = {k: _format(v) for k, v in dataclasses.asdict(cfg.model).items()}
    train = {k: v for k, v in dataclasses.asdict(cfg.train).items() if k != "weights"}
    parser["train"] = {k: _format(v) for k, v in train.items()}
    parser["loss"] = {k: _format(v) for k, v in dataclasses.asdict(cfg.train.weights).items()}
    parser["eval"] = {k: _format(v) for k, v in dataclasses.asdict(cfg.eval).items()}
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
