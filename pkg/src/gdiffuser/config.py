"""Flat ``key=value`` configuration files with dotted keys (``model.hidden_dim=32``)."""
from __future__ import annotations

import dataclasses
import hashlib

from .model import DiffuserConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def flatten(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name == "model":
            for g in dataclasses.fields(cfg.model):
                out[f"model.{g.name}"] = getattr(cfg.model, g.name)
        else:
            out[f.name] = getattr(cfg, f.name)
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k}={_format(v)}\n" for k, v in flatten(cfg).items())


def parse_lines(text: str) -> list:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    """Return a new config with ``(key, value)`` string pairs applied in order."""
    flat = flatten(cfg)
    for k, v in pairs:
        if k not in flat:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            flat[k] = _coerce(v, flat[k])
        except ValueError as exc:
            raise ConfigError(f"{k}: {exc}") from None
    model = {k[len("model."):]: v for k, v in flat.items() if k.startswith("model.")}
    top = {k: v for k, v in flat.items() if not k.startswith("model.")}
    try:
        return TrainConfig(**top, model=DiffuserConfig(**model))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    return apply_overrides(base or TrainConfig(), parse_lines(text))


def load(path, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    pairs = []
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            pairs = parse_lines(fh.read())
    return apply_overrides(base or TrainConfig(), pairs + list(overrides))


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()[:12]


def from_dict(d: dict) -> TrainConfig:
    """Rebuild a config from :meth:`TrainConfig.to_dict` output (e.g. a report echo)."""
    d = dict(d)
    model = DiffuserConfig(**d.pop("model"))
    return TrainConfig(**d, model=model)
