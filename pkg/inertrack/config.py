"""Run configuration: flat ``section.key = value`` files plus command-line overrides.

Example file::

    # experiment 12
    model.d_hidden = 64
    model.depth = 1
    train.lr = 0.0003
    train.losses = velocity,position
    data.segment_windows = 15
    ekf.acc_noise = 0.8
    run.manifest = data/manifest.tsv

Every key is checked against the dataclass of its section and coerced to the
declared field type. All problems are collected and raised together as one
:class:`~inertrack.errors.ConfigError` before any work starts.
"""

from __future__ import annotations

import logging
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values

from .baseline import ComplementaryConfig, EkfConfig
from .errors import ConfigError
from .preprocess import DataConfig
from .tfbrt import ModelConfig
from .train import TrainConfig

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_NONE = {"", "none", "null"}


@dataclass
class RunPaths:
    manifest: Optional[str] = None
    out: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    cf: ComplementaryConfig = field(default_factory=ComplementaryConfig)
    run: RunPaths = field(default_factory=RunPaths)

    def __post_init__(self) -> None:
        if self.model.window_length != self.data.window_length:
            raise ValueError(
                f"model.window_length ({self.model.window_length}) must equal "
                f"data.window_length ({self.data.window_length})"
            )
        if self.model.mag_feature != self.data.mag_feature:
            raise ValueError(
                f"model.mag_feature ('{self.model.mag_feature}') must equal "
                f"data.mag_feature ('{self.data.mag_feature}')"
            )

    def to_dict(self) -> Dict[str, Any]:
        payload = {name: asdict(getattr(self, name)) for name in SECTIONS}
        payload["train"]["losses"] = list(self.train.losses)
        return payload


SECTIONS: Dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "ekf": EkfConfig,
    "cf": ComplementaryConfig,
    "run": RunPaths,
}


def _coerce(raw: Optional[str], hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union and type(None) in args:
        if raw is None or raw.strip().lower() in _NONE:
            return None
        inner = [arg for arg in args if arg is not type(None)]
        return _coerce(raw, inner[0])
    if raw is None:
        raise ValueError("missing value")
    text = raw.strip()
    if hint is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got '{raw}'")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if origin in (tuple, Tuple):
        item = args[0] if args else str
        return tuple(_coerce(part, item) for part in text.split(",") if part.strip())
    raise ValueError(f"unsupported field type {hint}")


def build_run_config(values: Mapping[str, Optional[str]]) -> RunConfig:
    """Validate and coerce flat ``section.key`` values into a :class:`RunConfig`."""

    problems: List[str] = []
    grouped: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            problems.append(f"unknown key '{key}' (expected one of the sections {', '.join(SECTIONS)})")
            continue
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in hints:
            problems.append(f"unknown key '{key}'")
            continue
        try:
            grouped[section][name] = _coerce(raw, hints[name])
        except ValueError as exc:
            problems.append(f"{key}: {exc}")

    sections: Dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        try:
            sections[section] = cls(**grouped[section])
        except (TypeError, ValueError) as exc:
            problems.append(f"{section}: {exc}")
    if problems:
        raise ConfigError(problems)
    try:
        return RunConfig(**sections)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc


def read_config_file(path: str | Path) -> Dict[str, Optional[str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return dict(dotenv_values(path))


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """Turn ``--section.key value`` / ``--section.key=value`` tokens into a mapping."""

    overrides: Dict[str, str] = {}
    problems: List[str] = []
    items = list(tokens)
    index = 0
    while index < len(items):
        token = items[index]
        if not token.startswith("--") or "." not in token:
            problems.append(f"unexpected argument '{token}' (overrides look like --section.key value)")
            index += 1
            continue
        key, sep, value = token[2:].partition("=")
        if not sep:
            if index + 1 >= len(items):
                problems.append(f"override '{token}' has no value")
                break
            value = items[index + 1]
            index += 1
        overrides[key] = value
        index += 1
    if problems:
        raise ConfigError(problems)
    return overrides


def load_run_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Config file values (if any) with ``overrides`` applied on top."""

    values: Dict[str, Optional[str]] = read_config_file(path) if path is not None else {}
    values.update(overrides or {})
    config = build_run_config(values)
    logger.debug("run configuration: %s", config.to_dict())
    return config
