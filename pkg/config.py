#!/usr/bin/env python3
"""
OpenMic Configuration
=====================
Run configuration loaded from ``openmic.json`` plus ``--set key=value``
overrides, and the logging setup shared by every entry point.

Config file layout (all keys optional, defaults below):

    {
        "r_max": 3,
        "k1": 50, "k2": 8, "tau": 0.6,
        "length_bounds": {"min_chars": 700, "max_chars": 1500},
        "chars_per_minute": 240,
        "endpoints": {
            "default":   {"base_url": "http://localhost:8000", "model": "qwen2.5-7b-instruct"},
            "JokeWriter": {"base_url": "http://localhost:8001", "model": "openmic-writer-qlora"},
            "embedding": {"base_url": "http://localhost:8000", "embedding_model": "bge-m3"}
        },
        "temperatures": {"JokeWriter": 0.1},
        "judge_weights": {"persona": 0.30, "humor": 0.25, ...}
    }
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError


DEFAULT_CONFIG_PATH = "openmic.json"

# Writer runs cold; the remaining roles keep a little room except the graders.
DEFAULT_TEMPERATURES: Dict[str, float] = {
    "AudienceAnalyzer": 0.3,
    "ComedyDirector": 0.7,
    "JokeWriter": 0.1,
    "PerformanceCoach": 0.3,
    "QualityController": 0.0,
    "CandidateScorer": 0.0,
    "PunchlineSelector": 0.5,
    "Judge": 0.0,
    "CrosstalkConverter": 0.3,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EndpointConfig(_Strict):
    """One OpenAI-compatible server."""
    base_url: str = "http://localhost:8000"
    model: str = "qwen2.5-7b-instruct"
    embedding_model: str = "bge-m3"
    api_key_env: str = "OPENMIC_API_KEY"
    api_key: Optional[str] = None
    chat_timeout_s: float = Field(default=60.0, gt=0)
    embed_timeout_s: float = Field(default=30.0, gt=0)


class LengthBounds(_Strict):
    min_chars: int = Field(default=700, ge=0)
    max_chars: int = Field(default=1500, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.min_chars >= self.max_chars:
            raise ValueError(f"min_chars ({self.min_chars}) must be < max_chars ({self.max_chars})")
        return self


class RetrySettings(_Strict):
    max_attempts: int = Field(default=4, ge=1)
    base_delay_s: float = Field(default=0.5, ge=0)
    factor: float = Field(default=2.0, ge=1)


class MarkupSettings(_Strict):
    applause_ms: int = Field(default=2000, gt=0)
    laughter_ms: int = Field(default=1500, gt=0)
    default_pause_ms: int = Field(default=500, ge=100, le=5000)


class WeightSettings(_Strict):
    persona: float = 0.30
    humor: float = 0.25
    reactivity: float = 0.20
    coherence: float = 0.15
    narrative: float = 0.10


class RunConfig(_Strict):
    r_max: int = Field(default=3, ge=1)
    k1: int = Field(default=50, ge=1)
    k2: int = Field(default=8, ge=1)
    tau: float = 0.6
    length_bounds: LengthBounds = Field(default_factory=LengthBounds)
    chars_per_minute: int = Field(default=240, gt=0)
    outline_bits: Tuple[int, int] = (2, 3)
    temperatures: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    endpoints: Dict[str, EndpointConfig] = Field(default_factory=lambda: {"default": EndpointConfig()})
    judge_weights: WeightSettings = Field(default_factory=WeightSettings)
    judge: bool = False
    retry: RetrySettings = Field(default_factory=RetrySettings)
    markup: MarkupSettings = Field(default_factory=MarkupSettings)
    scoring_batch_size: int = Field(default=10, ge=1)
    parallelism: int = Field(default=4, ge=1)
    max_tokens: int = Field(default=4096, gt=0)
    run_root: str = "runs"
    index_dir: str = "index"
    prompt_dir: str = "prompts"
    schema_dir: str = "schemas"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.outline_bits
        if not 1 <= lo <= hi:
            raise ValueError(f"outline_bits must satisfy 1 <= min <= max, got {self.outline_bits}")
        for role, temp in self.temperatures.items():
            if not 0.0 <= temp <= 2.0:
                raise ValueError(f"temperature for {role} must be in [0, 2], got {temp}")
        weights = self.judge_weights.model_dump()
        if abs(sum(weights.values()) - 1.0) > 1e-9:
            raise ValueError(f"judge_weights must sum to 1, got {sum(weights.values())!r}")
        return self

    def endpoint_for(self, role: str) -> EndpointConfig:
        """Per-role endpoint, falling back to ``default``."""
        if role in self.endpoints:
            return self.endpoints[role]
        return self.endpoints.get("default", EndpointConfig())

    def embedding_endpoint(self) -> EndpointConfig:
        return self.endpoint_for("embedding")

    def temperature_for(self, role: str) -> float:
        return self.temperatures.get(role, DEFAULT_TEMPERATURES.get(role, 0.2))


# ============================================================================
# LOADING
# ============================================================================

def resolve_resource(path) -> Path:
    """Relative prompt/schema dirs resolve against cwd first, then this checkout."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return Path(__file__).resolve().parent / p


def load_raw_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Read the JSON config document; a missing default file means defaults."""
    config_path = Path(path or DEFAULT_CONFIG_PATH)
    if not config_path.exists():
        if path is not None:
            raise ConfigError(f"config file not found: {config_path}")
        return {}
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path}: invalid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top level must be an object")
    return data


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _declared(model: type, key: str) -> bool:
    return key in model.model_fields


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply ``a.b.c=value`` overrides to a raw config document.

    Values are parsed as JSON when possible (``k1=20``, ``judge=true``) and kept
    as strings otherwise. The first path component must be a RunConfig field;
    map-valued fields (endpoints, temperatures) accept any key below them.
    """
    result = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts or not _declared(RunConfig, parts[0]):
            raise ConfigError(f"unknown config key: {key!r}")
        node = result
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {key!r}")
        node[parts[-1]] = _parse_value(value)
    return result


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load ``openmic.json`` (or ``path``), apply overrides, validate."""
    raw = apply_overrides(load_raw_config(path), overrides)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}")


# ============================================================================
# LOGGING
# ============================================================================

def configure_logging(level: str = "INFO", json_logs: bool = False) -> None:
    """Route structlog events to stderr, console-rendered unless json_logs."""
    numeric = getattr(logging, level.upper(), logging.INFO)
    renderer: Any = structlog.processors.JSONRenderer(ensure_ascii=False) if json_logs \
        else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def dump_config(config: RunConfig) -> str:
    """Canonical JSON of the effective config (api keys redacted)."""
    data = config.model_dump(mode="json")
    for endpoint in data.get("endpoints", {}).values():
        if endpoint.get("api_key"):
            endpoint["api_key"] = "***"
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)
