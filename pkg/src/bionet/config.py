"""Flat ``key = value`` run configuration covering network, training and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError, DataIOError
from .graph import BioNetConfig
from .train import TrainConfig

ALIASES = {"depth": "l", "int": "int_stack", "lr": "initial_lr"}


@dataclass(frozen=True)
class RunConfig:
    net: BioNetConfig = field(default_factory=BioNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    augment: bool = True
    seed: int = 0
    manifest: str = ""
    train_split: str = "train"
    eval_split: str = "eval"
    metrics: tuple[str, ...] = ("dice", "iou")
    out: str = "runs/bionet"

    def with_seed(self) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=self.seed))


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"net", "train", "aug"}
_GROUPS = {"net": BioNetConfig, "train": TrainConfig, "aug": AugmentConfig}


def _key_owner(key: str) -> str:
    if key in _RUN_KEYS:
        return "run"
    for group, cls in _GROUPS.items():
        if key in {f.name for f in fields(cls)} and not (group == "train" and key == "seed"):
            return group
    raise ConfigError(f"unknown configuration key {key!r}")


def _parse_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _convert(key: str, text: str, default):
    text = text.strip()
    try:
        if key == "w":
            return None if text.lower() in ("none", "") else int(text)
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from exc
    return text


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Return ``cfg`` with string ``values`` converted and applied by key."""
    groups = {"net": cfg.net, "train": cfg.train, "aug": cfg.aug}
    run = {}
    for raw_key, text in values.items():
        key = ALIASES.get(raw_key, raw_key)
        owner = _key_owner(key)
        if owner == "run":
            run[key] = _convert(key, text, getattr(cfg, key))
        else:
            target = groups[owner]
            groups[owner] = replace(target, **{key: _convert(key, text, getattr(target, key))})
    out = replace(cfg, **run, **groups).with_seed()
    out.net.validate()
    out.train.validate()
    return out


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply overrides; overrides win."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_text(text, str(path)))
    values.update(overrides or {})
    return apply_overrides(RunConfig(), values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


def dump(cfg: RunConfig) -> str:
    """Fully resolved config in the same ``key = value`` format."""
    lines = ["# resolved bionet run configuration"]
    for name in sorted(_RUN_KEYS):
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    for group, obj in (("net", cfg.net), ("train", cfg.train), ("aug", cfg.aug)):
        lines.append(f"# {group}")
        for f in fields(obj):
            if group == "train" and f.name == "seed":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
