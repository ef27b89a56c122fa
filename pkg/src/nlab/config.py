"""Line-oriented ``key=value`` configs with dotted sections.

The same format serves as config file and run manifest, so a manifest can
be fed back to ``nlab train --config``. Blank lines and ``#`` comments are
ignored.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from enum import Enum

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    prepared_dir: str = ""
    subset: int = 0  # 0 = whole split
    val_subset: int = 0
    test_subset: int = 0
    mean: tuple[float, ...] = ()  # empty = computed from the training split
    std: tuple[float, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse(text, inner, key)
        if origin is tuple:
            if not text:
                return ()
            return tuple(_parse(t, args[0], key) for t in text.split(","))
        if hint is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(text)
        if hint in (int, float, str):
            return hint(text)
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unsupported type for {key}: {hint}")


def _flatten(obj, prefix="") -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out += _flatten(value, f"{prefix}{f.name}.")
        else:
            out.append((prefix + f.name, _fmt(value)))
    return out


def to_pairs(cfg: RunConfig) -> list[tuple[str, str]]:
    return _flatten(cfg.train) + _flatten(cfg.data, "data.")


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_pairs(cfg))


def _apply(obj, updates: dict[str, str], prefix: str):
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            changes[f.name] = _apply(value, updates, key + ".")
        elif key in updates:
            changes[f.name] = _parse(updates.pop(key), hints[f.name], key)
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'}: {exc}") from exc


def from_pairs(pairs, base: RunConfig | None = None) -> RunConfig:
    updates = dict(pairs)
    base = base or RunConfig()
    data_updates = {k: v for k, v in updates.items() if k.startswith("data.")}
    train_updates = {k: v for k, v in updates.items() if not k.startswith("data.")}
    train = _apply(base.train, train_updates, "")
    data = _apply(base.data, data_updates, "data.")
    leftover = sorted(set(train_updates) | set(data_updates))
    if leftover:
        raise ConfigError(f"unknown config keys: {', '.join(leftover)}")
    return RunConfig(train, data)


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def loads(text: str, overrides=(), base: RunConfig | None = None) -> RunConfig:
    pairs = parse_lines(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return from_pairs(pairs, base)


def load(path, overrides=()) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read(), overrides)
