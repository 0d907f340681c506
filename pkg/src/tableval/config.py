"""Layered pipeline configuration: one YAML file, flag overrides on top.

Secrets never live in the file; endpoint sections name the environment
variable that holds the token.  ``${VAR}`` in any string value is expanded
from the environment at load time.  Relative paths resolve against the
config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .curation import DEFAULT_SYSTEM_PROMPT
from .gateway import EndpointConfig, RetryPolicy


class ConfigError(ValueError):
    pass


_ENV_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value):
    if isinstance(value, str):
        return _ENV_VAR.sub(lambda m: os.environ.get(m.group(1), ""), value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _endpoint_from_dict(data: dict, role: str) -> EndpointConfig:
    if "base_url" not in data:
        raise ConfigError(f"endpoint '{role}' needs a base_url")
    retry_data = data.get("retry", {})
    return EndpointConfig(
        base_url=data["base_url"],
        model_id=data.get("model_id", ""),
        auth_env=data.get("auth_env"),
        timeout_s=float(data.get("timeout_s", 60.0)),
        retry=RetryPolicy(
            max_attempts=int(retry_data.get("max_attempts", 3)),
            backoff_base_s=float(retry_data.get("backoff_base_s", 0.5)),
            backoff_factor=float(retry_data.get("backoff_factor", 2.0)),
        ),
        rate_limit_per_min=data.get("rate_limit_per_min"),
        max_image_bytes=int(data.get("max_image_bytes", 20 * 1024 * 1024)),
    )


@dataclass
class PipelineConfig:
    corpus_dir: Path
    dataset_store: Path
    runs_dir: Path
    reports_dir: Path
    zoom: float = 3.0
    train_size: int = 400
    seed: int = 7
    requests_in_flight: int = 4
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    generator: EndpointConfig | None = None
    converter: EndpointConfig | None = None
    judge: EndpointConfig | None = None
    answerers: dict[str, EndpointConfig] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, default=str).encode("utf-8")
        ).hexdigest()[:16]

    def endpoint_for_role(self, role: str) -> EndpointConfig:
        endpoint = getattr(self, role, None)
        if endpoint is None:
            raise ConfigError(f"config has no '{role}' endpoint section")
        return endpoint

    def answerer(self, model_id: str) -> EndpointConfig:
        if model_id not in self.answerers:
            raise ConfigError(f"no answerer endpoint configured for model {model_id!r}")
        return self.answerers[model_id]


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML in {path}: {exc}") from exc
    data = _interpolate(data)

    base = path.parent

    def resolve(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    paths = data.get("paths", {})
    split = data.get("split", {})
    concurrency = data.get("concurrency", {})
    endpoints = data.get("endpoints", {})

    answerers = {
        model_id: _endpoint_from_dict(cfg, f"answerers.{model_id}")
        for model_id, cfg in (endpoints.get("answerers") or {}).items()
    }
    config = PipelineConfig(
        corpus_dir=resolve(paths.get("corpus_dir", "corpus")),
        dataset_store=resolve(paths.get("dataset_store", "dataset/triplets.jsonl")),
        runs_dir=resolve(paths.get("runs_dir", "runs")),
        reports_dir=resolve(paths.get("reports_dir", "reports")),
        zoom=float(data.get("zoom", 3.0)),
        train_size=int(split.get("train_size", 400)),
        seed=int(split.get("seed", 7)),
        requests_in_flight=int(concurrency.get("requests_in_flight", 4)),
        system_prompt=data.get("system_prompt", DEFAULT_SYSTEM_PROMPT),
        generator=_endpoint_from_dict(endpoints["generator"], "generator") if "generator" in endpoints else None,
        converter=_endpoint_from_dict(endpoints["converter"], "converter") if "converter" in endpoints else None,
        judge=_endpoint_from_dict(endpoints["judge"], "judge") if "judge" in endpoints else None,
        answerers=answerers,
        raw=data,
    )
    return config
