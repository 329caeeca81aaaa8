"""Run configuration files.

A run is described by a plain text file of ``key = value`` lines. Blank
lines and ``#`` comments are ignored; every key must be one of the
documented names below, and a key may appear at most once. Unknown keys
are a hard error so that a typo cannot silently fall back to a default.

Two invocations describe the same experiment exactly when their
experiment-defining keys agree; plumbing keys (addresses, worker counts,
output locations) may differ between the coordinator and its workers.
``config_digest`` hashes only the experiment-defining keys, and that
digest is what workers present when they ask for jobs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .lstm import ARCHS
from .trainer import TrainConfig
from .aco import AcoConfig

__all__ = [
    "RunConfig",
    "parse_config",
    "load_config",
    "resolved_text",
    "write_config",
    "config_digest",
    "parse_addr",
    "apply_overrides",
]


@dataclass
class RunConfig:
    """Every knob of a run, with conservative defaults."""

    # data
    train_dir: str | None = None
    test_dir: str | None = None
    channels: list[str] | None = None  # None: rank against Vib and use all
    # network shape
    arch: str = "I"
    window: int | None = None  # None: the architecture's default depth
    horizon: int = 1
    # training
    epochs: int = 575
    learning_rate: float = 0.001
    seed: int = 0
    cost: str = "mse"
    shuffle: bool = False
    batch: str = "sample"
    clip_norm: float | None = None
    # evolution
    ants: int = 200
    iterations: int = 1000
    max_pheromone: float = 20.0
    reward_factor: float = 1.15
    aco_seed: int = 0
    population_capacity: int | None = None
    # plumbing (excluded from the experiment digest)
    master_bind: str = "127.0.0.1:5757"
    master_addr: str | None = None  # workers default to master_bind
    workers: int = 2
    job_timeout_s: float | None = None
    out_dir: str = "out"

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                               seed=self.seed, cost=self.cost, shuffle=self.shuffle,
                               batch=self.batch, clip_norm=self.clip_norm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def aco_config(self) -> AcoConfig:
        try:
            return AcoConfig(n_ants=self.ants, n_iterations=self.iterations,
                             max_pheromone=self.max_pheromone,
                             reward_factor=self.reward_factor, seed=self.aco_seed,
                             population_capacity=self.population_capacity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self) -> "RunConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.channels is not None and len(set(self.channels)) != len(self.channels):
            raise ConfigError("channels contains duplicates")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.job_timeout_s is not None and self.job_timeout_s <= 0:
            raise ConfigError("job_timeout_s must be positive when set")
        self.train_config()
        self.aco_config()
        parse_addr(self.master_bind)
        if self.master_addr is not None:
            parse_addr(self.master_addr)
        return self


# key -> value kind; the dict order is the canonical file order
_INT = "int"
_FLOAT = "float"
_BOOL = "bool"
_STR = "str"
_LIST = "list"

_SCHEMA = {
    "train_dir": _STR,
    "test_dir": _STR,
    "channels": _LIST,
    "arch": _STR,
    "window": _INT,
    "horizon": _INT,
    "epochs": _INT,
    "learning_rate": _FLOAT,
    "seed": _INT,
    "cost": _STR,
    "shuffle": _BOOL,
    "batch": _STR,
    "clip_norm": _FLOAT,
    "ants": _INT,
    "iterations": _INT,
    "max_pheromone": _FLOAT,
    "reward_factor": _FLOAT,
    "aco_seed": _INT,
    "population_capacity": _INT,
    "master_bind": _STR,
    "master_addr": _STR,
    "workers": _INT,
    "job_timeout_s": _FLOAT,
    "out_dir": _STR,
}

_PLUMBING = {"master_bind", "master_addr", "workers", "job_timeout_s", "out_dir"}


def _parse_value(key: str, raw: str):
    kind = _SCHEMA[key]
    try:
        if kind == _INT:
            return int(raw, 10)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == _LIST:
            items = [part.strip() for part in raw.split(",")]
            if any(not part for part in items):
                raise ValueError(raw)
            return items
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text into a validated RunConfig."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        if not raw:
            raise ConfigError(f"{source}:{lineno}: empty value for {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def _format_value(key: str, value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical round-trippable text: schema order, unset keys omitted."""
    lines = ["# resolved run configuration"]
    for key in _SCHEMA:
        value = getattr(cfg, key)
        if value is None:
            continue
        lines.append(f"{key} = {_format_value(key, value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(resolved_text(cfg), encoding="utf-8")


def config_digest(cfg: RunConfig) -> bytes:
    """SHA-256 (32 bytes) over the experiment-defining lines only."""
    lines = []
    for key in _SCHEMA:
        if key in _PLUMBING:
            continue
        value = getattr(cfg, key)
        if value is None:
            continue
        lines.append(f"{key} = {_format_value(key, value)}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).digest()


def parse_addr(text: str) -> tuple[str, int]:
    """Split ``host:port``; port must be an integer in [0, 65535]."""
    host, sep, port_text = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be host:port, got {text!r}")
    try:
        port = int(port_text, 10)
    except ValueError:
        raise ConfigError(f"bad port in address {text!r}") from None
    if not 0 <= port <= 65535:
        raise ConfigError(f"port out of range in address {text!r}")
    return host, port


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace fields with any non-None overrides, then revalidate."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **changes).validate() if changes else cfg
