"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` and blank lines are ignored. Every key must be
known; missing keys take their defaults. :func:`serialize` writes every key
in a fixed order, so ``serialize(parse(text))`` is the normal form of
``text``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import SyntheticTaskSpec
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorDims:
    emb_dim: int = 32
    hidden: int = 64
    att_dim: int = 64
    init_scale: float = 0.1


@dataclass
class DiscriminatorDims:
    emb_dim: int = 32
    windows: tuple[int, ...] = (1, 2, 3, 4)
    kernels: int = 32
    init_scale: float = 0.1


# reward-side knobs live in their own section but are stored on TrainConfig
_REWARD_KEYS = ("lam", "n_rollouts", "baseline", "normalize")


@dataclass
class ExperimentConfig:
    corpus: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(
        kind="cipher-reorder", vocab_size=50, min_len=5, max_len=15, n_train=10000, n_dev=500, n_test=500))
    generator: GeneratorDims = field(default_factory=GeneratorDims)
    discriminator: DiscriminatorDims = field(default_factory=DiscriminatorDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self) -> None:
        try:
            self.corpus.validate()
            self.train.validate()
            if max(self.discriminator.windows) > self.corpus.t_max:
                raise ValueError("discriminator window longer than t_max")
            for name in ("emb_dim", "hidden", "att_dim"):
                if getattr(self.generator, name) < 1:
                    raise ValueError(f"generator.{name} must be >= 1")
            if self.discriminator.kernels < 1 or min(self.discriminator.windows) < 1:
                raise ValueError("discriminator kernels and windows must be >= 1")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(vocab_size=self.corpus.vocab_size, emb_dim=g.emb_dim, hidden=g.hidden,
                               att_dim=g.att_dim, t_max=self.corpus.t_max, init_scale=g.init_scale,
                               seed=self.seed)

    def discriminator_config(self) -> DiscriminatorConfig:
        d = self.discriminator
        return DiscriminatorConfig(vocab_size=self.corpus.vocab_size, emb_dim=d.emb_dim, windows=d.windows,
                                   kernels=d.kernels, T=self.corpus.t_max, init_scale=d.init_scale,
                                   epsilon=self.train.epsilon, seed=self.seed + 7919)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


def _fields() -> list[tuple[str, str, str, Any]]:
    """(dotted key, section attribute, field name, type) in serialisation order."""
    out = [("seed", "", "seed", int)]
    proto = ExperimentConfig()
    for section in ("corpus", "generator", "discriminator"):
        for f in dataclasses.fields(getattr(proto, section)):
            out.append((f"{section}.{f.name}", section, f.name, f.type))
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        sect = "reward" if f.name in _REWARD_KEYS else "train"
        out.append((f"{sect}.{f.name}", "train", f.name, f.type))
    return out


def _convert(raw: str, typ, key: str):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw
        if typ.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"{key}: unsupported type {typ}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    table = {key: (sect, name, typ) for key, sect, name, typ in _fields()}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in table:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    for key, raw in (overrides or {}).items():
        if key not in table:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = raw
    cfg = ExperimentConfig()
    updates: dict[str, dict[str, Any]] = {}
    for key, raw in values.items():
        sect, name, typ = table[key]
        val = _convert(raw, typ, key)
        if sect:
            updates.setdefault(sect, {})[name] = val
        else:
            setattr(cfg, name, val)
    try:
        for sect, kw in updates.items():
            setattr(cfg, sect, dataclasses.replace(getattr(cfg, sect), **kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), overrides)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for key, sect, name, _ in _fields():
        obj = getattr(cfg, sect) if sect else cfg
        lines.append(f"{key} = {_format(getattr(obj, name))}")
    return "\n".join(lines) + "\n"
