"""Flat key=value config files with an include directive, mapped onto the
corpus / model / train dataclasses. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

from .dataio import CorpusConfig
from .encoders import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable include."""


def _schema():
    fields = {}
    for cls in (CorpusConfig, ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            fields.setdefault(f.name, (cls, f.type))
    return fields


_SCHEMA = _schema()


def _coerce(key, raw):
    _, ftype = _SCHEMA[key]
    raw = raw.strip()
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config: bad value for {key}: {raw!r}") from e


def read_config_file(path):
    """Parse one file (plus includes) into a flat {key: value} dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from e
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            inc = line[len("include "):].strip()
            inc_path = (path.parent / inc) if not Path(inc).is_absolute() else Path(inc)
            values.update(read_config_file(inc_path))
            continue
        if "=" not in line:
            raise ConfigError(f"config: {path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"config: {path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config_path(name_or_path):
    """A real file path, or the name of a packaged preset (e.g. desk-scale)."""
    p = Path(name_or_path)
    if p.exists():
        return p
    candidate = resources.files("coavt").joinpath("presets", f"{name_or_path}.cfg")
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"config: no such file or preset: {name_or_path}")


def _build(cls, values, overrides=None):
    merged = dict(values)
    if overrides:
        for k, v in overrides.items():
            if k not in _SCHEMA:
                raise ConfigError(f"config: unknown key {k!r}")
            merged[k] = v
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in merged.items() if k in names}
    return cls(**kwargs)


def load_configs(path, overrides=None):
    """Returns (CorpusConfig, ModelConfig, TrainConfig) from one file."""
    values = read_config_file(resolve_config_path(path))
    corpus = _build(CorpusConfig, values, overrides)
    model = _build(ModelConfig, values, overrides)
    train = _build(TrainConfig, values, overrides)
    # geometry and vocabulary are shared keys; keep the views consistent
    for shared in ("vocab_size", "max_text_len", "audio_frames", "audio_bins",
                   "frame_height", "frame_width", "frame_channels"):
        setattr(model, shared, getattr(corpus, shared))
    return corpus, model, train


PRESET_FLAGS = {
    "full": {},
    "vanilla": {"disable_pair_a": True, "disable_pair_v": True},
    "baseline": {"disable_pair_a": True, "disable_pair_v": True, "contrastive_only": True},
}


def apply_objective_preset(train_cfg, preset):
    if preset not in PRESET_FLAGS:
        raise ConfigError(f"config: unknown objective preset {preset!r}; "
                          f"choose from {sorted(PRESET_FLAGS)}")
    return dataclasses.replace(train_cfg, **PRESET_FLAGS[preset])
