"""Flat experiment configuration.

One JSON object holds every knob of a run: encoder dimensions, optimizer
settings, synthetic-data parameters, the ablation variant, and dataset
location. Keys are flat (no nesting) so configs diff cleanly; unknown keys
are rejected by name, defaults are filled in, and :meth:`ExperimentConfig.save`
always writes the fully resolved document so each output directory records
exactly what produced it.

Key aliasing across the underlying component configs is deliberate:

- ``seed``        — model initialization and training (shuffling, sampling).
- ``data_seed``   — synthetic data generation only.
- ``d_img``       — ROI feature width for both the encoder and the generator.
- ``freeze_below``— encoder layer freezing (recorded in the train config too).
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .encoder import EncoderConfig
from .model import VARIANTS, MMRecModel
from .synthetic import SyntheticConfig
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig"]


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


_ENCODER_KEYS = tuple(f.name for f in fields(EncoderConfig))
_TRAIN_KEYS = tuple(
    f.name for f in fields(TrainConfig) if f.name not in ("seed", "freeze_below")
)
_SYNTH_KEYS = tuple(
    f.name for f in fields(SyntheticConfig) if f.name not in ("seed", "d_img")
)


def _defaults() -> dict:
    out = {
        "variant": "full",
        "scaled_attention": False,
        "seed": 0,
        "data_seed": 0,
        "data_dir": "data",
    }
    enc = EncoderConfig()
    for key in _ENCODER_KEYS:
        out[key] = getattr(enc, key)
    trn = TrainConfig()
    for key in _TRAIN_KEYS:
        out[key] = getattr(trn, key)
    syn = SyntheticConfig()
    for key in _SYNTH_KEYS:
        out[key] = getattr(syn, key)
    return out


_DEFAULTS = _defaults()


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
    return value


class ExperimentConfig:
    """Validated flat run configuration; construction fails fast.

    Every key has a default; passing an unrecognized key raises
    :class:`ConfigError` naming it. Instances are immutable in spirit —
    derive changed copies with :meth:`replace`.
    """

    def __init__(self, **overrides):
        values = dict(_DEFAULTS)
        for key, value in overrides.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _check_type(key, value, _DEFAULTS[key])
        for key, value in values.items():
            object.__setattr__(self, key, value)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        try:
            self.encoder_config().validate()
            self.train_config().validate()
            self.synthetic_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------------
    # views into the component configs

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{k: getattr(self, k) for k in _ENCODER_KEYS})

    def train_config(self) -> TrainConfig:
        kwargs = {k: getattr(self, k) for k in _TRAIN_KEYS}
        return TrainConfig(seed=self.seed, freeze_below=self.freeze_below, **kwargs)

    def synthetic_config(self) -> SyntheticConfig:
        kwargs = {k: getattr(self, k) for k in _SYNTH_KEYS}
        return SyntheticConfig(seed=self.data_seed, d_img=self.d_img, **kwargs)

    def build_model(self, vocab_size: int) -> MMRecModel:
        return MMRecModel(
            self.encoder_config(),
            vocab_size=vocab_size,
            variant=self.variant,
            seed=self.seed,
            scaled_attention=self.scaled_attention,
        )

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in _DEFAULTS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls(**raw)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**self.to_dict(), **changes})

    # ------------------------------------------------------------------

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        diff = {k: v for k, v in self.to_dict().items() if v != _DEFAULTS[k]}
        return f"ExperimentConfig({', '.join(f'{k}={v!r}' for k, v in diff.items())})"
