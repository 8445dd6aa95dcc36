"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, sections are dotted prefixes::

    seed = 3
    model.image_size = 32
    loss.margin = 1.0
    train.arm = full
    data.families = splice, warp
    detector.coverage = 0.95

``seed`` is the root seed for model initialisation and training; the dataset
keeps its own ``data.seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigError, DataIOError
from .losses import LossConfig
from .model import ModelConfig
from .synth import SyntheticSpec
from .training import TrainConfig

# keys owned by the root seed rather than their section
_HIDDEN = {("model", "seed"), ("train", "seed")}
_ALIASES = {"loss.lambda": "loss.lam"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is bool:
        return _parse_bool
    if hint is int:
        return int
    if hint is float:
        return float
    if hint is str:
        return str
    if origin is typing.Union and type(None) in args:
        inner = _converter(next(a for a in args if a is not type(None)))
        return lambda s: None if s.strip().lower() in ("", "none", "null") else inner(s)
    if origin is tuple:
        item = _converter(args[0])
        return lambda s: tuple(item(p.strip()) for p in s.split(",") if p.strip())
    raise TypeError(f"no converter for {hint!r}")


@dataclass
class DetectorConfig:
    coverage: float = 0.95


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": SyntheticSpec,
    "detector": DetectorConfig,
}


def known_keys() -> dict[str, typing.Callable[[str], object]]:
    keys = {"seed": int}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if (section, f.name) in _HIDDEN:
                continue
            keys[f"{section}.{f.name}"] = _converter(hints[f.name])
    return keys


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[_ALIASES.get(key, key)] = value
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        keys = known_keys()
        values: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
        seed = 0
        for key, text in pairs.items():
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = keys[key](text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
            if key == "seed":
                seed = value
            else:
                section, name = key.split(".", 1)
                values[section][name] = value
        values["model"]["seed"] = seed
        values["train"]["seed"] = seed
        if "seed" in pairs and "seed" not in values["data"]:
            values["data"]["seed"] = seed
        try:
            built = {s: _SECTIONS[s](**values[s]) for s in _SECTIONS}
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(seed=seed, **built)

    @classmethod
    def load(cls, path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> "RunConfig":
        pairs: dict[str, str] = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise DataIOError(f"config file not found: {p}")
            pairs.update(parse_lines(p.read_text().splitlines(), str(p)))
        pairs.update(parse_lines(overrides, "<override>"))
        return cls.from_pairs(pairs)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {"seed": self.seed}
        for section in _SECTIONS:
            for name, value in asdict(getattr(self, section)).items():
                if (section, name) in _HIDDEN:
                    continue
                out[f"{section}.{name}"] = value
        return out

    def dumps(self) -> str:
        lines = []
        for key, value in self.flat().items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
