"""Declarative pipeline configuration.

One YAML file drives every stage: input paths, a parameters block, and one
endpoint section per model role. Values resolve with flag > environment >
file precedence; credentials are referenced by environment variable name and
never stored in the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import EndpointConfig

ROLES = ("generator", "grader", "judge", "embedder")

ENV_PREFIX = "FORGE_"

_PARAMETER_TYPES = {
    "k": int,
    "qc_threshold": float,
    "split_seed": int,
    "eval_fraction": float,
    "n_neg": int,
    "refusal_ratio": float,
}


class ConfigError(ValueError):
    """Configuration failure; the message starts with the offending field path."""


@dataclass
class PipelineConfig:
    bundle: str = ""
    tables: str = ""
    workdir: str = "work"
    k: int = 5
    qc_threshold: float = 0.7
    split_seed: int = 0
    eval_fraction: float = 0.10
    n_neg: int = 7
    refusal_ratio: float = 0.125
    recall_ks: list[int] = dataclass_field(default_factory=lambda: [1, 5, 10])
    serve_port: int = 8080
    serve_token: str = ""
    endpoints: dict[str, EndpointConfig] = dataclass_field(
        default_factory=lambda: {role: EndpointConfig() for role in ROLES}
    )

    @property
    def workdir_path(self) -> Path:
        return Path(self.workdir)

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("parameters.k: must be >= 1")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("parameters.eval_fraction: must be in (0, 1)")
        if not 0 <= self.qc_threshold <= 1:
            raise ConfigError("parameters.qc_threshold: must be in [0, 1]")
        if self.n_neg < 0:
            raise ConfigError("parameters.n_neg: must be >= 0")
        if not 0 <= self.refusal_ratio < 1:
            raise ConfigError("parameters.refusal_ratio: must be in [0, 1)")
        if not self.recall_ks or any(k < 1 for k in self.recall_ks):
            raise ConfigError("parameters.recall_ks: must be a non-empty list of cutoffs >= 1")
        for role in ROLES:
            if role not in self.endpoints:
                raise ConfigError(f"endpoints.{role}: section missing")
            try:
                self.endpoints[role].validate(path=f"endpoints.{role}")
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc


def _parse_recall_ks(value: Any) -> list[int]:
    if isinstance(value, str):
        value = [part for part in value.replace(",", " ").split() if part]
    try:
        return [int(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"parameters.recall_ks: not a list of integers: {value!r}") from exc


def _apply_file(config: PipelineConfig, path: Path) -> None:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file: invalid YAML: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError("config file: top level must be a mapping")

    for key in ("bundle", "tables", "workdir"):
        if key in data:
            setattr(config, key, str(data[key]))
    serve = data.get("serve", {}) or {}
    if "port" in serve:
        config.serve_port = int(serve["port"])
    if "token" in serve:
        config.serve_token = str(serve["token"])

    parameters = data.get("parameters", {}) or {}
    for key, value in parameters.items():
        if key == "recall_ks":
            config.recall_ks = _parse_recall_ks(value)
        elif key in _PARAMETER_TYPES:
            try:
                setattr(config, key, _PARAMETER_TYPES[key](value))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"parameters.{key}: {value!r} is not a {_PARAMETER_TYPES[key].__name__}") from exc
        else:
            raise ConfigError(f"parameters.{key}: unknown parameter")

    for role, section in (data.get("endpoints", {}) or {}).items():
        if role not in ROLES:
            raise ConfigError(f"endpoints.{role}: unknown role (expected one of {ROLES})")
        try:
            config.endpoints[role] = EndpointConfig.from_dict(section or {})
        except ValueError as exc:
            raise ConfigError(f"endpoints.{role}: {exc}") from exc


def _apply_env(config: PipelineConfig, env: Mapping[str, str]) -> None:
    for key, caster in _PARAMETER_TYPES.items():
        value = env.get(f"{ENV_PREFIX}{key.upper()}")
        if value is not None:
            try:
                setattr(config, key, caster(value))
            except ValueError as exc:
                raise ConfigError(f"parameters.{key}: environment value {value!r} invalid") from exc
    if f"{ENV_PREFIX}RECALL_KS" in env:
        config.recall_ks = _parse_recall_ks(env[f"{ENV_PREFIX}RECALL_KS"])
    for key in ("bundle", "tables", "workdir"):
        value = env.get(f"{ENV_PREFIX}{key.upper()}")
        if value is not None:
            setattr(config, key, value)
    for role in ROLES:
        for attr in ("base_url", "model"):
            value = env.get(f"{ENV_PREFIX}{role.upper()}_{attr.upper()}")
            if value is not None:
                setattr(config.endpoints[role], attr, value)


def _apply_overrides(config: PipelineConfig, overrides: Mapping[str, Any]) -> None:
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "recall_ks":
            config.recall_ks = _parse_recall_ks(value)
        elif "." in key:
            role, attr = key.split(".", 1)
            if role not in ROLES or attr not in EndpointConfig.__dataclass_fields__:
                raise ConfigError(f"endpoints.{key}: unknown override")
            setattr(config.endpoints[role], attr, value)
        elif key in PipelineConfig.__dataclass_fields__:
            setattr(config, key, value)
        else:
            raise ConfigError(f"{key}: unknown override")


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> PipelineConfig:
    """Resolve the pipeline config with flag > env > file precedence."""
    config = PipelineConfig()
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file: {file_path} does not exist")
        _apply_file(config, file_path)
    _apply_env(config, os.environ if env is None else env)
    _apply_overrides(config, overrides or {})
    config.validate()
    return config
