"""Declarative run configs: one JSON file per run, strictly validated.

Unknown keys are rejected (all offenders listed at once), defaults are
filled from the dataclass, and a loaded config round-trips through
serialization unchanged.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .evaluation import ExperimentConfig


class ConfigError(ValueError):
    """Schema violation; the message lists every offending key."""


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def validate_config(payload: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(payload) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "protocol" not in payload:
        raise ConfigError("missing required key: protocol")
    try:
        return ExperimentConfig(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a config file (JSON)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(payload)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1))
