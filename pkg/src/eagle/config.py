"""Flat ``key = value`` run configuration with command-line overrides.

Lists are comma separated, brackets optional (``depths = 2,2,4,2`` or
``depths=[2,2,4,2]``). ``#`` starts a comment. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import EagleConfig
from .train import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: EagleConfig = field(default_factory=EagleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: str = "data"
    out: str = "runs/eagle"
    seed: int = 0
    augment: bool = True
    precision: str = "float32"


_RUN_FIELDS = {"data": str, "out": str, "seed": int, "augment": bool, "precision": str}


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


_MODEL_TYPES = _field_types(EagleConfig)
_OPTIM_TYPES = _field_types(OptimConfig)
KEYS = sorted({*_MODEL_TYPES, *_OPTIM_TYPES, *_RUN_FIELDS})


def _coerce(key: str, raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(key, raw, inner[0])
    try:
        if origin is tuple or tp is tuple:
            body = raw.strip("[]() ")
            return tuple(int(p) for p in body.split(",") if p.strip()) if body else ()
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k not in KEYS:
            raise ConfigError(f"unknown config key: {k}")
        out[k] = v.strip()
    return out


def build(pairs: dict[str, str]) -> RunConfig:
    model_kw, optim_kw, run_kw = {}, {}, {}
    for k, v in pairs.items():
        if k in _MODEL_TYPES:
            model_kw[k] = _coerce(k, v, _MODEL_TYPES[k])
        elif k in _OPTIM_TYPES:
            optim_kw[k] = _coerce(k, v, _OPTIM_TYPES[k])
        elif k in _RUN_FIELDS:
            run_kw[k] = _coerce(k, v, _RUN_FIELDS[k])
        else:
            raise ConfigError(f"unknown config key: {k}")
    if run_kw.get("precision", "float32") not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {run_kw['precision']!r}")
    try:
        return RunConfig(EagleConfig(**model_kw), OptimConfig(**optim_kw), **run_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_pairs(p.read_text().splitlines()))
    pairs.update(parse_pairs(overrides or []))
    return build(pairs)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def dump(cfg: RunConfig) -> str:
    """Fully resolved config in the same ``key = value`` syntax ``load`` reads."""
    flat = {**cfg.model.to_dict(), **dataclasses.asdict(cfg.optim)}
    flat.update({k: getattr(cfg, k) for k in _RUN_FIELDS})
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in sorted(flat))
