"""Flat key/value experiment configuration.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Lists are comma-separated, ``none`` means unset.  Every key can also be given
on the command line as ``--key value`` (dashes or underscores).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .engine import GrowthConfig, PruneConfig
from .errors import ConfigError, GrowPruneError
from .orchestrator import ExperimentSetup, MethodKind, UpdateSchedule
from .tensor import SgdConfig


@dataclass
class ExperimentConfig:
    # data
    data_dir: str | None = None
    n_train: int = 10000
    val_size: int | None = None
    n_test: int | None = None
    data_seed: int = 0
    # model
    arch: str = "lenet300100"
    widths: list | None = None
    init_density: float = 0.3
    # schedule
    partition_count: int = 5
    initial_parts: int = 1
    parts_per_update: int = 1
    epochs_new_data: int = 10
    epochs_all_data: int = 15
    baseline_epochs: int = 40
    initial_epochs: int | None = None
    shuffle_seed: int = 0
    # growth
    alpha: float = 40.0
    growth_scope: str = "per_layer"
    init_sign: str = "paper_literal"
    growth_interval: int = 3
    # pruning
    beta: float = 4.0
    recovery_epochs: int = 10
    accuracy_slack: float = 0.002
    compress_beta: float = 2.0  # finer steps for non-recoverable pruning near its limit
    max_iterations: int = 1000
    min_retrain_epochs: int = 0
    # optimizer
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    augment_shift: int = 2
    # run
    methods: list = field(default_factory=lambda: [m.value for m in MethodKind])
    seed: int = 0
    output_dir: str = "runs"
    deterministic: bool = True

    def schedule(self):
        return UpdateSchedule(self.partition_count, self.initial_parts, self.parts_per_update,
                              self.epochs_new_data, self.epochs_all_data, self.baseline_epochs,
                              self.initial_epochs, self.shuffle_seed)

    def growth(self):
        return GrowthConfig(self.alpha, self.growth_scope, self.init_sign, None, self.growth_interval)

    def prune(self, slack=0.0, beta=None):
        return PruneConfig(self.beta if beta is None else beta, self.recovery_epochs, slack,
                           self.max_iterations, self.min_retrain_epochs)

    def compress(self, slack=None):
        """Pruning settings of the non-recoverable compression step."""
        return self.prune(self.accuracy_slack if slack is None else slack, self.compress_beta)

    def sgd(self):
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay)

    def setup(self):
        """Validated :class:`ExperimentSetup`; errors name the offending key."""
        parts = {
            "schedule": (self.schedule, "partition_count"),
            "growth": (self.growth, "alpha"),
            "prune": (self.prune, "beta"),
            "compress": (self.compress, "compress_beta"),
            "sgd": (self.sgd, "learning_rate"),
        }
        built = {}
        for name, (make, key) in parts.items():
            try:
                built[name] = make()
            except GrowPruneError as exc:
                guess = _guess_field(str(exc), key)
                if name == "compress" and guess == "beta":
                    guess = "compress_beta"
                raise ConfigError(guess, str(exc)) from exc
        for m in self.methods:
            if m not in {k.value for k in MethodKind}:
                raise ConfigError("methods", f"unknown method {m!r}")
        return ExperimentSetup(built["schedule"], built["growth"], built["prune"], built["sgd"],
                               self.arch, self.widths, self.init_density, self.batch_size,
                               self.augment_shift, self.seed)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _guess_field(message, default):
    for f in fields(ExperimentConfig):
        if message.startswith(f.name) or f" {f.name} " in f" {message} ":
            return f.name
    aliases = {"scope": "growth_scope", "interval": "growth_interval", "growth interval": "growth_interval"}
    for alias, name in aliases.items():
        if alias in message:
            return name
    return default


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


_HINTS = None


def _hints():
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(ExperimentConfig)
    return _HINTS


def coerce(key, raw):
    """Convert the string ``raw`` to the declared type of ``key``."""
    hints = _hints()
    if key not in hints:
        raise ConfigError(key, "unknown configuration key")
    hint = hints[key]
    text = str(raw).strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional and text.lower() in ("none", ""):
        return None
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    origin = typing.get_origin(base) or base
    try:
        if origin is list:
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key == "widths":
                return [int(t) for t in items]
            return items
        if base is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {getattr(base, '__name__', base)}") from None


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, raw)
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"config file {path} does not exist")
        values.update(parse_config_text(p.read_text()))
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values)


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))
