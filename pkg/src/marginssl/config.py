"""Run configuration: INI-style file with one section per component.

Precedence is command-line flags > config file > built-in desk defaults.
Unknown sections or keys are rejected.  Values are parsed according to the
field type of the target dataclass; floats also accept ``a/b`` (``tau =
1/30``), pairs are written ``13, 20`` and optional integers accept ``none``.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .evaluation import EvalConfig
from .features import FeatureConfig
from .seeding import derive_seed
from .synthdata import AugmentPolicy
from .trainers import ConfigError, TrainConfig

ENV_CONFIG = "MARGINSSL_CONFIG"


@dataclass
class DataConfig:
    n_train_speakers: int = 64
    n_eval_speakers: int = 16
    utts_per_speaker: int = 8
    duration: float = 5.0


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "run"


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1


# train.seed / train.workers are derived from [run]
_TRAIN_DERIVED = {"seed", "workers"}

SECTIONS = {
    "run": RunSection,
    "data": DataConfig,
    "features": FeatureConfig,
    "augment": AugmentPolicy,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}

# Full-scale recipe values, listed next to the desk defaults in --help.
RECIPE_DEFAULTS = {
    "features.n_mels": 40,
    "features.frame_length": 0.025,
    "features.frame_shift": 0.010,
    "augment.snr_speech_db": (13.0, 20.0),
    "augment.snr_music_db": (5.0, 15.0),
    "augment.snr_noise_db": (0.0, 15.0),
    "train.tau": "1/30",
    "train.margin": 0.1,
    "train.batch_size": 200,
    "train.epochs": "150 (simclr) / 100 (moco)",
    "train.frame_seconds": 2.0,
    "train.queue_size": 10000,
    "train.ema": 0.999,
    "train.lr": 0.001,
    "train.lr_decay": 0.95,
    "train.lr_decay_every": 5,
    "train.weight_decay": 0.0,
    "train.embed_dim": 512,
    "eval.n_frames": 10,
    "eval.frame_seconds": 3.5,
    "eval.p_target": 0.01,
    "eval.c_miss": 1.0,
    "eval.c_fa": 1.0,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def module_seed(self, name: str) -> int:
        return derive_seed(self.run.seed, name)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.module_seed("trainers"), workers=self.run.workers)


def _parse_value(path: str, raw: str, tp):
    text = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            if text.lower() in ("none", ""):
                return None
            return _parse_value(path, text, inner[0])
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if tp is int:
            return int(text)
        if tp is float:
            return float(Fraction(text)) if "/" in text else float(text)
        if tp is str:
            return text
        if origin is tuple:
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            if args and args[-1] is Ellipsis:
                return tuple(_parse_value(path, p, args[0]) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_parse_value(path, p, a) for p, a in zip(parts, args))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{path}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _build(section: str, cls, values: dict):
    try:
        obj = cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None
    return obj


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "text"}`` overrides, validating every path."""
    grouped: dict[str, dict[str, object]] = {}
    for path, raw in overrides.items():
        if "." not in path:
            raise ConfigError(f"{path}: expected 'section.key'")
        section, key = path.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section {section!r}")
        types = _field_types(SECTIONS[section])
        if key not in types or (section == "train" and key in _TRAIN_DERIVED):
            raise ConfigError(f"{path}: unknown key")
        grouped.setdefault(section, {})[key] = raw if not isinstance(raw, str) else _parse_value(path, raw, types[key])
    updates = {}
    for section, values in grouped.items():
        current = dataclasses.asdict(getattr(cfg, section))
        current.update(values)
        updates[section] = _build(section, SECTIONS[section], current)
    out = dataclasses.replace(cfg, **updates)
    validate(out)
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    flat: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[f"{section}.{key}"] = value
    flat.update(overrides or {})
    return apply_overrides(cfg, flat)


def validate(cfg: RunConfig) -> None:
    try:
        cfg.train_config().validate()
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None
    if cfg.data.n_train_speakers < 2 or cfg.data.n_eval_speakers < 2:
        raise ConfigError("data: need at least two train and two eval speakers")
    if cfg.data.utts_per_speaker < 1:
        raise ConfigError("data.utts_per_speaker: must be >= 1")
    if cfg.data.duration < 2 * cfg.train.frame_seconds:
        raise ConfigError("data.duration: must hold two non-overlapping training frames")
    if cfg.data.duration < cfg.eval.frame_seconds:
        raise ConfigError("data.duration: shorter than eval.frame_seconds")
    if cfg.run.workers < 1:
        raise ConfigError("run.workers: must be >= 1")
    if cfg.eval.n_frames < 1:
        raise ConfigError("eval.n_frames: must be >= 1")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    lines = []
    for section, cls in SECTIONS.items():
        lines.append(f"[{section}]")
        for f in fields(cls):
            if section == "train" and f.name in _TRAIN_DERIVED:
                continue
            lines.append(f"{f.name} = {_fmt(getattr(getattr(cfg, section), f.name))}")
        lines.append("")
    return "\n".join(lines)


def describe_keys() -> str:
    """One line per config key with its desk default and, where known, the full-scale recipe value (``-`` where the recipe leaves it open)."""
    cfg = RunConfig()
    rows = []
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if section == "train" and f.name in _TRAIN_DERIVED:
                continue
            key = f"{section}.{f.name}"
            desk = _fmt(getattr(getattr(cfg, section), f.name))
            recipe = RECIPE_DEFAULTS.get(key)
            recipe_txt = _fmt(recipe) if recipe is not None else "-"
            rows.append(f"  {key:<28} desk: {desk:<22} recipe: {recipe_txt}")
    return "\n".join(rows)
