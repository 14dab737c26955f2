"""Run configuration: one INI-style file holding every hyperparameter of a run.

Sections are ``[expert]``, ``[training]``, ``[inference]``, ``[fingerprint]``,
``[paths]`` and ``[run]``. Unknown sections or keys are errors, and
``RunConfig.from_text(cfg.to_text()) == cfg`` for every valid config.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .expert import ExpertConfig
from .fingerprint import DEFAULT_LENGTH, DEFAULT_RADIUS
from .inference import InferenceOptions
from .seqmoe import SeqTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FingerprintConfig:
    radius: int = DEFAULT_RADIUS
    length: int = DEFAULT_LENGTH

    def __post_init__(self) -> None:
        if self.radius < 0 or self.length < 1:
            raise ValueError("fingerprint radius must be >= 0 and length >= 1")


@dataclass(frozen=True)
class PathsConfig:
    train: str = ""
    test: str = ""
    conflict: str = ""
    registry: str = ""


@dataclass(frozen=True)
class RunConfig:
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    training: SeqTrainConfig = field(default_factory=SeqTrainConfig)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.training.seed

    def to_text(self) -> str:
        lines = []
        for section, obj, skip in self._sections():
            lines.append(f"[{section}]")
            for f in fields(obj):
                if f.name not in skip:
                    lines.append(f"{f.name} = {_format(getattr(obj, f.name))}".rstrip())
            lines.append("")
        lines += ["[run]", f"seed = {self.seed}", ""]
        return "\n".join(lines)

    def _sections(self):
        # the training seed lives under [run]; inference tiers are chosen per command
        return [("expert", self.expert, ()), ("training", self.training, ("seed",)),
                ("inference", self.inference, ("tiers",)), ("fingerprint", self.fingerprint, ()),
                ("paths", self.paths, ())]

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True)
        cp.optionxform = str  # keys are case-sensitive
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        base = cls()
        known = {name: (obj, skip) for name, obj, skip in base._sections()}
        for section in cp.sections():
            if section not in known and section != "run":
                raise ConfigError(f"unknown section [{section}]")
        parts = {}
        for name, (obj, skip) in known.items():
            values = dict(cp[name]) if cp.has_section(name) else {}
            types = {f.name: f for f in fields(obj) if f.name not in skip}
            kwargs = {}
            for key, raw in values.items():
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                kwargs[key] = _parse(raw, getattr(obj, key), f"[{name}] {key}")
            parts[name] = kwargs
        run = dict(cp["run"]) if cp.has_section("run") else {}
        for key in run:
            if key != "seed":
                raise ConfigError(f"unknown key {key!r} in [run]")
        if "seed" in run:
            parts["training"]["seed"] = _parse(run["seed"], 0, "[run] seed")
        try:
            return cls(**{name: replace(getattr(base, name), **kw) for name, kw in parts.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
    return raw

