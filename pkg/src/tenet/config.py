"""Training configuration and the ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass
from pathlib import Path

from tenet.backbone import EncoderConfig
from tenet.data import DatasetSpec
from tenet.model import ModelConfig

SEED_ENV = "TENET_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 5e-4
    lr_final: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 15
    batch_size: int = 1
    clip_length: int = 4
    frame_stride: int = 1
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    # One root for all three sample kinds unless a per-kind path is given.
    data_root: str = "data"
    image_dataset: str = ""
    flow_dataset: str = ""
    video_dataset: str = ""
    out_dir: str = "runs"
    checkpoint_every: int = 5
    excitation: bool = True
    fusion: str = "concat"
    detach_excitation: bool = True
    eval_norm: str = "clip"
    base_channels: int = 64
    level_channels: int = 16
    dilation_levels: int = 4
    ssim_window: int = 11

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")
        if self.batch_size < 1 or self.clip_length < 1 or self.frame_stride < 1:
            raise ConfigError("batch_size, clip_length and frame_stride must be >= 1")

    def dataset(self, kind):
        path = {"image": self.image_dataset, "flow": self.flow_dataset, "video": self.video_dataset}[kind]
        return Path(path or self.data_root)

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(self.base_channels, self.dilation_levels, self.level_channels)
        return ModelConfig(
            encoder=enc,
            fusion=self.fusion,
            excitation=self.excitation,
            detach_excitation=self.detach_excitation,
            eval_norm=self.eval_norm,
        )

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, values):
        return coerce(cls, values)


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_pair(text, kind):
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().replace("x", ",").replace("(", "").replace(")", "").split(",")
        parts = [p for p in (s.strip() for s in parts) if p]
    if len(parts) != 2:
        raise ConfigError(f"expected two values, got {text!r}")
    return tuple(kind(p) for p in parts)


def _convert(value, hint):
    try:
        if hint is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        if hint in (int, float):
            return hint(value)
        if typing.get_origin(hint) is tuple:
            return _parse_pair(value, typing.get_args(hint)[0])
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r}: {exc}") from exc


def coerce(cls, values):
    hints = typing.get_type_hints(cls)
    unknown = set(values) - set(hints)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {key: _convert(value, hints[key]) for key, value in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    known = {f.name for f in dataclasses.fields(TrainConfig)} | {f.name for f in dataclasses.fields(DatasetSpec)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def split_config(values, seed=None):
    """Build (TrainConfig, DatasetSpec) from one flat mapping.

    ``seed`` (e.g. from the command line) wins over $TENET_SEED, which wins
    over the file.
    """
    values = dict(values)
    if seed is None and os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    if seed is not None:
        values["seed"] = seed
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    data_keys = {f.name for f in dataclasses.fields(DatasetSpec)}
    train = coerce(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    spec = coerce(DatasetSpec, {k: v for k, v in values.items() if k in data_keys})
    return train, spec
