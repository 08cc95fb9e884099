"""Run configuration: one flat ``key = value`` file for every stage.

Keys are ``section.field`` for the dataclass sections below, plus the
top-level ``seed`` and ``mode``. Every per-stage seed is taken from the
top-level one so a single number fixes a whole run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .engine import ConfigError
from .model import MODES, ModelConfig
from .synth import SynthConfig
from .training import PretrainConfig, TrainConfig

SECTIONS = ("synth", "model", "pretrain", "train", "eval")
_SEEDLESS = {"seed"}


@dataclass
class EvalConfig:
    """Defaults for the ``eval`` and ``render`` commands."""

    threshold: float = 3.0
    split: str = "test"

    def __post_init__(self) -> None:
        if self.split not in ("val", "test"):
            raise ConfigError(f"eval.split must be 'val' or 'test', got {self.split!r}")
        if self.threshold < 0:
            raise ConfigError(f"eval.threshold must be non-negative, got {self.threshold}")


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "rgb"
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")

    # Seeded views; the section seeds themselves are never read.
    def synth_config(self) -> SynthConfig:
        return replace(self.synth, seed=self.seed)

    def pretrain_config(self) -> PretrainConfig:
        return replace(self.pretrain, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=seed)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"mode = {self.mode}"]
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if f.name in _SEEDLESS:
                    continue
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text, 0)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(_coerce(p, d, where) for p, d in zip(parts, default))
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    defaults = RunConfig()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        if key in ("seed", "mode"):
            top[key] = _coerce(value, getattr(defaults, key), where)
            continue
        section, _, name = key.partition(".")
        if section not in sections:
            raise ConfigError(f"{where}: unknown key {key!r}")
        allowed = {f.name for f in fields(getattr(defaults, section))} - _SEEDLESS
        if name not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")
        sections[section][name] = _coerce(value, getattr(getattr(defaults, section), name), where)
    try:
        built = {s: replace(getattr(defaults, s), **kv) for s, kv in sections.items()}
        return RunConfig(**top, **built)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))
