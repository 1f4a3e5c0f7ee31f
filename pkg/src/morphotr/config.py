"""INI-style run configuration.

Grammar (every section and key optional; unknown keys are errors)::

    [synth]              ; SynthConfig fields, e.g. n_sources = 3
    [model]              ; ModelConfig fields, e.g. d_model = 256
    [stage1]             ; StageConfig fields for one stage; p_range = 0.05, 0.4
    [stage2]
    [stage3]
    [evaluate]           ; k = 15, resolution = 1.0, seed = 0

List values (``source_gamma``, ``source_delta``, ``p_range``) are comma separated.
Missing values take the built-in defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SynthConfig
from .encoder import ModelConfig
from .errors import ConfigError
from .training import StageConfig, stage_defaults


@dataclass
class EvalConfig:
    k: int = 15
    resolution: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict = field(default_factory=lambda: {s: stage_defaults(s) for s in (1, 2, 3)})
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    digest: str = ""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        return _coerce(text, args[0])
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is list or origin is list:
        return [float(v) for v in text.split(",") if v.strip()]
    return text.strip()


def _build(cls, section: configparser.SectionProxy, base=None, aliases=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, text in section.items():
        if aliases and key in aliases:
            values.update(aliases[key](text))
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            values[key] = _coerce(text, hints[key])
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return dataclasses.replace(base, **values) if base is not None else cls(**values)


def _p_range(text: str) -> dict:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise ConfigError("p_range needs two comma-separated values")
    return {"p_min": parts[0], "p_max": parts[1]}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig(digest=hashlib.sha256(text.encode()).hexdigest())
    known = {"synth", "model", "stage1", "stage2", "stage3", "evaluate"}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown config section [{name}]")
    if cp.has_section("synth"):
        cfg.synth = _build(SynthConfig, cp["synth"])
        cfg.synth.validate()
    if cp.has_section("model"):
        cfg.model = _build(ModelConfig, cp["model"])
    for s in (1, 2, 3):
        if cp.has_section(f"stage{s}"):
            stage = _build(StageConfig, cp[f"stage{s}"], base=cfg.stages[s], aliases={"p_range": _p_range})
            if stage.stage != s:
                raise ConfigError(f"[stage{s}] declares stage = {stage.stage}")
            cfg.stages[s] = stage.validate()
    if cp.has_section("evaluate"):
        cfg.evaluate = _build(EvalConfig, cp["evaluate"])
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
