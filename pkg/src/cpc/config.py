"""
Configuration

Layered settings for the compiler, runtime and harnesses:

    defaults (below) < config/cpc.yaml < CPC_* environment (and .env) < CLI flags

Version: 1.0.0
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import psutil
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "CPC_"
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / "config" / "cpc.yaml"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _cpu_count() -> int:
    return psutil.cpu_count(logical=True) or 1


class Settings(BaseModel):
    """Validated settings; construct through ``load_settings``."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    fuel: int = Field(default=100_000, gt=0)
    continuation_capacity: int = Field(default=4, ge=1)
    growth_factor: int = Field(default=2, ge=2)
    pool_workers: int = Field(default_factory=_cpu_count, ge=1)
    tick_seconds: float = Field(default=0.0, ge=0.0)
    debug_linearity: bool = True
    smart_extrusion: bool = False
    liveness_lite: bool = True
    log_level: str = "WARNING"
    bench_repeats: int = Field(default=5, ge=1)

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"expected one of {', '.join(LOG_LEVELS)}")
        return level


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"malformed YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return data


def _from_environment(environ: Mapping[str, str]) -> Dict[str, str]:
    fields = set(Settings.model_fields)
    values: Dict[str, str] = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in fields:
            values[name] = value
    return values


def load_settings(config_path: Optional[Union[str, Path]] = None,
                  overrides: Optional[Mapping[str, Any]] = None,
                  environ: Optional[Mapping[str, str]] = None,
                  dotenv: bool = True) -> Settings:
    """Merge every configuration layer and validate the result.

    ``environ`` defaults to ``os.environ``; pass an explicit mapping to isolate
    from the process environment. ``None`` values in ``overrides`` are ignored
    so unset CLI flags fall through to the lower layers.
    """
    merged: Dict[str, Any] = {}

    path = Path(config_path) if config_path is not None else DEFAULT_CONFIG_PATH
    if path.exists():
        merged.update(_read_yaml(path))
        logger.debug("loaded configuration from %s", path)
    elif config_path is not None:
        raise ConfigError(str(path), "configuration file not found")

    if environ is None:
        if dotenv:
            load_dotenv(override=False)
        environ = os.environ
    merged.update(_from_environment(environ))

    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        return Settings(**merged)
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "settings"
        raise ConfigError(key, error["msg"]) from None
