"""INI-style scenario/config files.

One section per config object; keys are the dataclass field names::

    [synth]      counts = NT:3000,RN:300,EF:150,LM:40,DE:10
                 flow_dim, separation, noise, spacing, start, syslog_prob,
                 benign_syslog_prob, jitter, shift, shift_seed, means_seed, seed
    [align]      window = 2.0
                 label_fusion_rule = max-severity | flow-wins
    [episodes]   k, n_shot, n_query, tasks_per_batch, seed, generalized
    [train]      alpha, beta, batch_size, rounds, seed, class_balance,
                 hidden_sizes = 64,32
    [finetune]   mode = extend-n | reinit-n | replace-head
                 freeze = none | <int>, n_layers, new_head_classes, epochs, lr,
                 batch_size, seed, class_balance, holdout
    [fleet]      participants, rounds, strategy, seed, cost_unit, local_epochs,
                 lr, batch_size, class_balance

Booleans accept true/false/yes/no/on/off/1/0; ``#`` and ``;`` start comments.
Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
from pathlib import Path

from fmkr.episodes import EpisodeConfig
from fmkr.finetune import FinetuneConfig
from fmkr.fleet import FleetConfig
from fmkr.ingest import AlignConfig
from fmkr.meta import TrainConfig
from fmkr.stages import StageLabel
from fmkr.synth import SynthConfig

SECTIONS = {
    "synth": SynthConfig,
    "align": AlignConfig,
    "episodes": EpisodeConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "fleet": FleetConfig,
}

_BOOLS = {"true": True, "yes": True, "1": True, "on": True,
          "false": False, "no": False, "0": False, "off": False}


class ConfigError(ValueError):
    pass


def parse_counts(text: str) -> dict[StageLabel, int]:
    """``"NT:3000,DE:10"`` (``=`` also accepted as separator)."""
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.replace("=", ":").partition(":")
        if not sep:
            raise ConfigError(f"bad count entry {item!r}; expected STAGE:N")
        try:
            out[StageLabel.parse(name)] = int(value)
        except ValueError as exc:
            raise ConfigError(f"bad count entry {item!r}: {exc}") from None
    return out


def _convert(cls, field: dataclasses.Field, raw: str):
    default = field.default
    if default is dataclasses.MISSING and field.default_factory is not dataclasses.MISSING:
        default = field.default_factory()
    raw = raw.strip()
    if field.name == "counts":
        return parse_counts(raw)
    if field.name == "freeze":
        return None if raw.lower() in ("", "none", "auto") else int(raw)
    if isinstance(default, bool):
        try:
            return _BOOLS[raw.lower()]
        except KeyError:
            raise ConfigError(f"{cls.__name__}.{field.name}: not a boolean: {raw!r}") from None
    if isinstance(default, enum.Enum):
        return type(default)(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def section_values(cls, items: dict[str, str]) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for [{_section_name(cls)}]")
        try:
            out[key] = _convert(cls, fields[key], raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[{_section_name(cls)}] {key}: {exc}") from None
    return out


def _section_name(cls) -> str:
    return next(name for name, c in SECTIONS.items() if c is cls)


def load_config(path) -> dict[str, dict]:
    """Read a config file into ``{section: {field: value}}`` (values converted)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        out[section] = section_values(SECTIONS[section], dict(parser.items(section)))
    return out


def build(section: str, file_values: dict, overrides: dict | None = None):
    """Instantiate a section's dataclass: defaults < file values < overrides.

    ``None`` overrides are ignored so unset CLI flags fall through.
    """
    cls = SECTIONS[section]
    values = dict(file_values.get(section, {}))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None
