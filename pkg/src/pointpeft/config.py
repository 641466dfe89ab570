"""Flat ``key = value`` run configuration.

One file holds every knob: encoder shape, PEFT settings and run settings.
Values are parsed by the type of the key's default; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import EncoderConfig
from .peft import METHODS, PeftConfig


class ConfigError(ValueError):
    """Bad configuration (maps to exit code 2)."""


@dataclass
class RunSettings:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 0
    min_lr: float = 0.0
    augmentation: str = "default"
    method: str = "point-peft"
    dataset: str = "data"
    out: str = "runs"
    # pre-training
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    mask_ratio: float = 0.6
    # gen-data
    train_per_class: int = 50
    test_per_class: int = 20
    points: int = 256
    # metrics
    record_wall_time: bool = False


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def flat(self) -> dict:
        out = {}
        for part in (self.encoder, self.peft, self.run):
            out.update(asdict(part))
        return out

    def validate(self) -> "RunConfig":
        r = self.run
        if r.method not in METHODS:
            raise ConfigError(f"unknown method {r.method!r}; choose from {', '.join(METHODS)}")
        if r.augmentation not in ("none", "default", "strong"):
            raise ConfigError(f"augmentation must be none, default or strong, got {r.augmentation!r}")
        for key in ("epochs", "batch_size", "train_per_class", "test_per_class", "points"):
            if getattr(r, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if r.pretrain_epochs < 0 or r.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0.0 < r.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        try:
            self.peft.validate(self.encoder, r.method)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


def _owners():
    owners = {}
    for part, cls in (("encoder", EncoderConfig), ("peft", PeftConfig), ("run", RunSettings)):
        for f in fields(cls):
            owners[f.name] = (part, f)
    return owners


KEYS = tuple(_owners())


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with string-valued ``pairs`` applied."""
    owners = _owners()
    parts = {"encoder": {}, "peft": {}, "run": {}}
    for key, raw in pairs.items():
        if key not in owners:
            raise ConfigError(f"unknown config key {key!r}")
        part, _ = owners[key]
        default = getattr(getattr(cfg, part), key)
        parts[part][key] = _parse_value(key, str(raw), default)
    try:
        enc = replace(cfg.encoder, **parts["encoder"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return RunConfig(enc, replace(cfg.peft, **parts["peft"]), replace(cfg.run, **parts["run"]))


def parse_lines(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in pairs:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        pairs[key] = val
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = apply_overrides(cfg, parse_lines(text))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig, exclude=("out",)) -> str:
    """Config as loadable text; the output location is left out by default."""
    lines = []
    for key, val in cfg.flat().items():
        if key in exclude:
            continue
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
