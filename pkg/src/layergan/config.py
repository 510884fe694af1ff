"""Training-config resolution: defaults <- file <- environment <- flags.

The config file is TOML mirroring TrainConfig (top-level scalars plus [net],
[weights], [ils], [perturb] tables). Any key can also be set through the
environment as LAYERGAN_<SECTION>_<FIELD> (or LAYERGAN_<FIELD> for top-level
keys); explicit flag overrides win over everything. Unknown keys fail fast by
name instead of being silently dropped.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .layerops import PerturbSpec
from .losses import IlsOptions, LossWeights
from .models import NetConfig
from .training import TrainConfig

ENV_PREFIX = "LAYERGAN_"

_SECTIONS = {"net": NetConfig, "weights": LossWeights, "ils": IlsOptions, "perturb": PerturbSpec}


def default_config_dict() -> dict:
    return dataclasses.asdict(TrainConfig())


def _set_path(d: dict, path: tuple[str, ...], value: Any, origin: str) -> None:
    cursor: Any = d
    for part in path[:-1]:
        if not isinstance(cursor, dict) or part not in cursor:
            raise ValueError(f"invalid config key {'.'.join(path)!r} (from {origin})")
        cursor = cursor[part]
    leaf = path[-1]
    if not isinstance(cursor, dict) or leaf not in cursor:
        raise ValueError(f"invalid config key {'.'.join(path)!r} (from {origin})")
    if isinstance(cursor[leaf], dict):
        raise ValueError(
            f"config key {'.'.join(path)!r} is a table, not a value (from {origin})"
        )
    cursor[leaf] = value


def merge_file(d: dict, path: str | Path) -> dict:
    """Overlay a TOML file onto the config dict, validating every key."""
    with open(path, "rb") as fh:
        loaded = tomllib.load(fh)
    for key, value in loaded.items():
        if isinstance(value, Mapping):
            for sub, sub_value in value.items():
                _set_path(d, (key, sub), sub_value, origin=str(path))
        else:
            _set_path(d, (key,), value, origin=str(path))
    return d


def _coerce_like(template: Any, raw: str, key: str) -> Any:
    """Parse an override string to the type of the default at the same key."""
    try:
        if isinstance(template, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, (tuple, list)):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ValueError(f"bad value for config key {key!r}: {exc}") from exc


def _resolve_env_key(d: dict, name: str) -> tuple[str, ...]:
    lowered = name.lower()
    for section in _SECTIONS:
        prefix = section + "_"
        if lowered.startswith(prefix) and lowered[len(prefix):] in d[section]:
            return (section, lowered[len(prefix):])
    if lowered in d and not isinstance(d[lowered], dict):
        return (lowered,)
    raise ValueError(f"invalid config key {name!r} (from environment)")


def merge_env(d: dict, environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        path = _resolve_env_key(d, var[len(ENV_PREFIX):])
        template = d[path[0]] if len(path) == 1 else d[path[0]][path[1]]
        _set_path(d, path, _coerce_like(template, raw, ".".join(path)), origin=var)
    return d


def merge_overrides(d: dict, overrides: Mapping[str, Any]) -> dict:
    """Apply dotted-key overrides (e.g. {"weights.lambda_ils": 0.5})."""
    for dotted, value in overrides.items():
        path = tuple(dotted.split("."))
        if isinstance(value, str):
            cursor: Any = d
            for part in path:
                cursor = cursor[part] if isinstance(cursor, dict) and part in cursor else None
            value = _coerce_like(cursor, value, dotted) if cursor is not None else value
        _set_path(d, path, value, origin="flags")
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    kwargs: dict[str, Any] = {}
    for key, value in d.items():
        if key in _SECTIONS:
            try:
                kwargs[key] = _SECTIONS[key](**value)
            except TypeError as exc:
                raise ValueError(f"invalid config key under [{key}]: {exc}") from exc
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ValueError(f"invalid config key: {exc}") from exc


def resolve_train_config(
    config_path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> TrainConfig:
    d = default_config_dict()
    if config_path is not None:
        merge_file(d, config_path)
    merge_env(d, environ)
    if overrides:
        merge_overrides(d, overrides)
    return train_config_from_dict(d)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def effective_toml(cfg: TrainConfig) -> str:
    """Render the resolved config as TOML; feeding it back reproduces the run."""
    d = dataclasses.asdict(cfg)
    lines = [
        f"{key} = {_toml_value(value)}"
        for key, value in d.items()
        if not isinstance(value, dict)
    ]
    for section, fields in d.items():
        if not isinstance(fields, dict):
            continue
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in fields.items())
    return "\n".join(lines) + "\n"
