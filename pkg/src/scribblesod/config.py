"""Plain-text run configuration.

INI-style sections ``[synth]``, ``[loss]``, ``[train]`` map onto the dataclass
configs; ``[run]`` holds free-form command arguments. Every value is a JSON
literal (``epochs = 22``, ``beta1_range = [-1.0, 1.0]``, ``use_bab = true``).
:func:`dump_config` writes the fully resolved form, which parses back to an
equal :class:`RunConfig`.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import re
from dataclasses import dataclass, field

from .losses import LossConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig

SECTIONS = {"synth": SynthConfig, "loss": LossConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: dict = field(default_factory=dict)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number, for error messages."""
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, ""), n)
        elif section and "=" in s and not s.startswith(("#", ";")):
            out.setdefault((section, s.split("=", 1)[0].strip()), n)
    return out


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, (tuple, list)):
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            if isinstance(default, tuple):
                if len(value) != len(default):
                    raise ConfigError(f"{where}: expected {len(default)} numbers, got {len(value)}")
                return tuple(float(v) for v in value)
            return [float(v) for v in value]
    elif isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {json.dumps(value)}")


def _build(values: dict[str, dict[str, tuple[object, str]]]) -> RunConfig:
    kwargs = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        fields = {f.name for f in dataclasses.fields(cls)}
        args = {}
        for key, (value, where) in values.get(name, {}).items():
            if key not in fields:
                raise ConfigError(f"{where}: unknown key {key!r} in [{name}]")
            args[key] = _coerce(value, getattr(defaults, key), where)
        try:
            kwargs[name] = cls(**args)
        except ValueError as e:
            raise ConfigError(f"[{name}]: {e}") from None
    run = {k: v for k, (v, _) in values.get("run", {}).items()}
    return RunConfig(run=run, **kwargs)


def _parse_into(values: dict, text: str, source: str) -> None:
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as e:
        raise ConfigError(" ".join(str(e).split())) from None
    lines = _line_index(text)
    for section in parser.sections():
        if section not in SECTIONS and section != "run":
            raise ConfigError(f"{source}, line {lines.get((section, ''), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = f"{source}, line {lines.get((section, key), '?')}"
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                raise ConfigError(f"{where}: value for {key!r} is not a JSON literal: {raw!r}") from None
            values.setdefault(section, {})[key] = (value, where)


def parse_config(text: str = "", source: str = "<config>", overrides: list[str] = ()) -> RunConfig:
    """Parse config text, then apply ``section.key=value`` overrides in order."""
    values: dict = {}
    _parse_into(values, text, source)
    for ov in overrides:
        m = re.fullmatch(r"\s*(\w+)\.(\w+)\s*=(.*)", ov, re.S)
        if not m:
            raise ConfigError(f"override {ov!r}: expected section.key=value")
        _parse_into(values, f"[{m.group(1)}]\n{m.group(2)} = {m.group(3).strip()}\n", f"override {ov!r}")
    return _build(values)


def load_config(path, overrides: list[str] = ()) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path), overrides)


def _literal(v) -> str:
    return json.dumps(list(v) if isinstance(v, tuple) else v, sort_keys=True)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        obj = getattr(cfg, name)
        out += [f"{f.name} = {_literal(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
        out.append("")
    out.append("[run]")
    out += [f"{k} = {_literal(v)}" for k, v in sorted(cfg.run.items())]
    return "\n".join(out) + "\n"
