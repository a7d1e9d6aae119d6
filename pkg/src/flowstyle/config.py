"""Strict INI configuration shared by every command-line entry point.

One file configures the whole pipeline through per-module sections.
Parsing is deliberately unforgiving: an unknown section or key is an
error, not a warning, because a typo like `sint_ratio` silently falling
back to a default would invalidate a multi-hour sweep. Every command
writes back a resolved snapshot (defaults merged with the file and the
command line) so any run directory reproduces itself.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os

from .curriculum import CurriculumConfig
from .dit import ModelConfig
from .errors import ConfigError
from .video import VideoConfig
from .world import WorldConfig

SECTIONS = ("world", "model", "flow", "curriculum", "video", "eval", "run")

# keys a snapshot's provenance section may carry; values are plain strings
RUN_KEYS = frozenset((
    "subcommand", "config", "corpus", "out", "checkpoint", "adapter",
    "style", "content", "first_frame", "source", "stage", "steps", "seed",
    "prompt_id", "guidance", "force", "resume", "baseline"))


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if default is dataclasses.MISSING:
            default = f.default_factory()
        out[f.name] = default
    return out


def defaults() -> dict:
    """The full resolved default configuration, section by section."""
    return {
        "world": _dataclass_defaults(
            WorldConfig, skip=("clean_ids", "synth_ids", "holdout_ids")),
        "model": _dataclass_defaults(ModelConfig, skip=("rope_axes",)),
        "flow": {"steps": 20, "guidance": 1.0},
        "curriculum": _dataclass_defaults(CurriculumConfig),
        "video": {**_dataclass_defaults(VideoConfig),
                  "steps": 800, "n_clips": 16, "static_fraction": 0.0,
                  "seed": 0, "save_every": 200},
        "eval": {"seed": 0, "sample_steps": 20},
    }


def _parse_value(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, tuple):
            return tuple(int(v.strip()) for v in raw.split(","))
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw.strip())
        if isinstance(default, float):
            return float(raw.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(
            f"[{section}] {key} = {raw!r} is not a valid "
            f"{type(default).__name__}") from None


def load_config(path: str = None) -> dict:
    """Defaults overridden by the INI file at `path` (None = all defaults).

    Raises ConfigError for unknown sections, unknown keys, malformed
    values, and syntax errors. A `[run]` section (written by snapshots)
    is validated against its key set and otherwise ignored.
    """
    cfg = defaults()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",),
        strict=True, interpolation=None)
    parser.optionxform = str
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if section == "run":
            for key in parser[section]:
                if key not in RUN_KEYS:
                    raise ConfigError(f"{path}: unknown key [run] {key}")
            continue
        for key, raw in parser[section].items():
            if key not in cfg[section]:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            cfg[section][key] = _parse_value(section, key, raw,
                                             cfg[section][key])
    return cfg


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(**cfg["world"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def curriculum_config(cfg: dict) -> CurriculumConfig:
    return CurriculumConfig(**cfg["curriculum"])


def video_config(cfg: dict) -> VideoConfig:
    fields = {f.name for f in dataclasses.fields(VideoConfig)}
    return VideoConfig(**{k: v for k, v in cfg["video"].items()
                          if k in fields})


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(path: str, cfg: dict, run: dict) -> None:
    """Resolved config plus a [run] provenance section, stable bytes."""
    for key in run:
        if key not in RUN_KEYS:
            raise ConfigError(f"snapshot run key {key} not declared")
    buf = io.StringIO()
    for section in SECTIONS[:-1]:
        buf.write(f"[{section}]\n")
        for key in sorted(cfg[section]):
            buf.write(f"{key} = {_format_value(cfg[section][key])}\n")
        buf.write("\n")
    buf.write("[run]\n")
    for key in sorted(run):
        buf.write(f"{key} = {_format_value(run[key])}\n")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)
