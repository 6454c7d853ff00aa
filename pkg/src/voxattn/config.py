"""Run configuration: a JSON document with sections network/train/data/synth/eval."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import NetworkConfig
from .data import AugmentToggles
from .errors import ConfigError
from .optim import TrainConfig
from .synth import SynthConfig


class ConfigSyntaxError(ConfigError):
    """The document is not valid JSON or not a JSON object."""


class UnknownKeyError(ConfigError):
    pass


class ConfigValueError(ConfigError):
    """A value has the wrong type or lies outside its allowed range."""


@dataclass(frozen=True)
class DataConfig:
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    folds: int = 5
    fold_seed: int = 0

    def __post_init__(self):
        if self.folds < 1:
            raise ConfigError(f"folds must be >= 1, got {self.folds}")


@dataclass(frozen=True)
class SynthSection:
    train: SynthConfig = field(default_factory=SynthConfig)
    # reference test-cohort class ratios, scaled down 12x
    test_counts: tuple = (10, 15, 14)

    def __post_init__(self):
        object.__setattr__(self, "test_counts", tuple(int(c) for c in self.test_counts))
        if len(self.test_counts) != 3 or min(self.test_counts) < 1:
            raise ConfigError(f"test_counts must be three positive integers, got {self.test_counts}")

    def test_config(self) -> SynthConfig:
        return dataclasses.replace(self.train, counts=self.test_counts, seed=self.train.seed + 1)


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 4
    cam_limit: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.cam_limit < 0:
            raise ConfigError(f"cam_limit must be >= 0, got {self.cam_limit}")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": _plain(self.train),
            "data": _plain(self.data),
            "synth": {**_plain(self.synth.train), "test_counts": list(self.synth.test_counts)},
            "eval": _plain(self.eval),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def _check_type(value, default, path: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        if ok:
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    elif default is None or isinstance(default, str):
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigValueError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def _section(cls, raw, path: str, nested: Optional[dict] = None, extra: tuple = ()):
    if not isinstance(raw, dict):
        raise ConfigValueError(f"{path}: expected an object")
    nested = nested or {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    kwargs, rest = {}, {}
    for key, value in raw.items():
        if key in extra:
            rest[key] = value
            continue
        if key not in defaults:
            raise UnknownKeyError(f"{path}.{key}: unknown key")
        if key in nested:
            kwargs[key] = _section(nested[key], value, f"{path}.{key}")
        else:
            kwargs[key] = _check_type(value, defaults[key], f"{path}.{key}")
    try:
        obj = cls(**kwargs)
    except ConfigError as exc:
        raise ConfigValueError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigValueError(f"{path}: {exc}") from None
    return (obj, rest) if extra else obj


SECTIONS = ("network", "train", "data", "synth", "eval")


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigSyntaxError("$: top level must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise UnknownKeyError(f"$.{key}: unknown key (allowed: {', '.join(SECTIONS)})")
    synth, rest = _section(SynthConfig, doc.get("synth", {}), "$.synth", extra=("test_counts",))
    try:
        synth_section = SynthSection(synth, **{k: _check_type(v, (), f"$.synth.{k}") for k, v in rest.items()})
    except ConfigError as exc:
        raise ConfigValueError(f"$.synth: {exc}") from None
    return RunConfig(
        network=_section(NetworkConfig, doc.get("network", {}), "$.network"),
        train=_section(TrainConfig, doc.get("train", {}), "$.train", nested={"augment": AugmentToggles}),
        data=_section(DataConfig, doc.get("data", {}), "$.data"),
        synth=synth_section,
        eval=_section(EvalConfig, doc.get("eval", {}), "$.eval"),
    )


def parse_config(path=None) -> RunConfig:
    """Read, default-fill and validate a run configuration; ``None`` means all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"$: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)
