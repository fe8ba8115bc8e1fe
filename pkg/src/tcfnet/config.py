"""Flat ``key=value`` run configuration.

Files hold one ``key=value`` per line; blank lines and ``#`` comments are
ignored. Command-line flags override file values. The effective
configuration is written next to every output together with its hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields
from pathlib import Path

from .architectures import ModelConfig
from .dsp import PreprocessConfig
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    "architecture": "eeg-tcfnet",
    "strategy": "leave_one_session_out",
    "seed": 0,
    "val_fraction": 0.1,
    "subjects": "",
}


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def read_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        return parse_text(p.read_text(), str(p))
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None


def _typed_fields() -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in (TrainConfig, ModelConfig, PreprocessConfig):
        for f in fields(cls):
            default = getattr(cls(), f.name)
            types.setdefault(f.name, type(default))
    for k, v in DEFAULTS.items():
        types.setdefault(k, type(v))
    return types


def _coerce(key: str, value, typ: type):
    if not isinstance(value, str):
        return value
    try:
        if typ is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if typ is type(None):
            return None if value.lower() in ("", "none") else float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None
    return value


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, file values and flag overrides into typed values."""
    types = _typed_fields()
    merged: dict = {}
    for cls in (TrainConfig, ModelConfig, PreprocessConfig):
        inst = cls()
        for f in fields(cls):
            merged.setdefault(f.name, getattr(inst, f.name))
    merged.update(DEFAULTS)
    for src in (file_values or {}), (overrides or {}):
        for k, v in src.items():
            if v is None:
                continue
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, types[k])
    return merged


def render(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(render(cfg).encode()).hexdigest()[:16]


def split(cfg: dict) -> tuple[TrainConfig, ModelConfig, PreprocessConfig]:
    return TrainConfig.from_mapping(cfg), ModelConfig.from_mapping(cfg), PreprocessConfig(
        **{f.name: cfg[f.name] for f in fields(PreprocessConfig) if f.name in cfg}
    )
