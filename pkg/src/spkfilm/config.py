"""Flat ``key = value`` run configuration shared by every subcommand.

Every key has a typed default. Files may set any subset; command-line
overrides win over file values. ``#`` starts a comment. Unknown keys are
rejected. Lists are comma-separated.

Keys:

    seed              master seed; per-role seeds are derived from it
    sample_rate       expected WAV sample rate (Hz)
    num_ceps          MFCCs per frame
    num_mel_bins      mel filters
    cmn               per-utterance mean normalization (true/false)
    context           frames on each side of the centre frame
    sirs              mixing SIRs in dB
    stage_channels    four ResNet stage widths
    num_classes       output classes
    embedding_dim     speaker embedding size
    fusion            none, affine, input_bias or middle_fusion
    at_blocks         conditioned stages for affine fusion (empty = all)
    scale_mode        free, frozen_one, sigmoid or tanh
    bias_mode         free or frozen_zero
    generator_hidden  hidden width of the scale/shift generator
    initial_lr        starting learning rate
    momentum          SGD momentum
    batch_size        context windows per minibatch
    max_epochs        hard epoch limit
    decay_factor      learning-rate multiplier on a plateau
    min_improvement   cv-loss gain that counts as progress
    patience          epochs without progress before a decay
    max_decays        decays before stopping on the next plateau
    cv_fraction       share of training utterances held out
    variant           name written into result tables
    run_index         repeat number written into result tables
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dsp import MfccConfig
from .errors import ConfigError
from .mixer import DEFAULT_SIRS
from .model import DESK_WIDTHS, ConditioningConfig, ModelConfig
from .training import Schedule


@dataclass
class RunConfig:
    seed: int = 0
    sample_rate: int = 16000
    num_ceps: int = 13
    num_mel_bins: int = 23
    cmn: bool = True
    context: int = 10
    sirs: tuple[float, ...] = DEFAULT_SIRS
    stage_channels: tuple[int, ...] = DESK_WIDTHS
    num_classes: int = 10
    embedding_dim: int = 512
    fusion: str = "affine"
    at_blocks: tuple[int, ...] = ()
    scale_mode: str = "free"
    bias_mode: str = "free"
    generator_hidden: int = 512
    initial_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 1024
    max_epochs: int = 100
    decay_factor: float = 0.5
    min_improvement: float = 0.01
    patience: int = 3
    max_decays: int = 6
    cv_fraction: float = 0.1
    variant: str = "model"
    run_index: int = 0

    # ------------------------------------------------------------ derived configs

    def mfcc(self) -> MfccConfig:
        return MfccConfig(sample_rate=self.sample_rate, num_ceps=self.num_ceps, num_mel_bins=self.num_mel_bins, cmn=self.cmn)

    def model(self) -> ModelConfig:
        return ModelConfig(
            stage_channels=tuple(self.stage_channels),
            num_classes=self.num_classes,
            input_shape=(1, 2 * self.context + 1, self.num_ceps),
            embedding_dim=self.embedding_dim,
        )

    def conditioning(self) -> ConditioningConfig:
        blocks = tuple(self.at_blocks) if self.at_blocks else None
        return ConditioningConfig(
            fusion=self.fusion, at_blocks=blocks, scale_mode=self.scale_mode,
            bias_mode=self.bias_mode, generator_hidden=self.generator_hidden,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            initial_lr=self.initial_lr, momentum=self.momentum, batch_size=self.batch_size,
            max_epochs=self.max_epochs, decay_factor=self.decay_factor, min_improvement=self.min_improvement,
            patience=self.patience, max_decays=self.max_decays,
        )

    def derived_seed(self, role: str) -> int:
        """Stable sub-seed for one consumer of randomness (``"mix"``, ``"init"``, ...)."""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(role.encode("utf-8"))])
        return int(seq.generate_state(1)[0])

    def validate(self) -> "RunConfig":
        try:
            self.model()
            self.conditioning()
            self.mfcc()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.context < 0:
            raise ConfigError("context must be >= 0")
        if not 0 < self.cv_fraction < 1:
            raise ConfigError("cv_fraction must be in (0, 1)")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        return self

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in _fields())


def _fields():
    return fields(RunConfig)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = float if name == "sirs" else int
            return tuple(kind(x) for x in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    defaults = RunConfig()
    known = {f.name for f in _fields()}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _parse(key, value, getattr(defaults, key))
    return out


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (strings or typed values)."""
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    defaults = RunConfig()
    known = {f.name for f in _fields()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse(key, value, getattr(defaults, key)) if isinstance(value, str) else value
    return RunConfig(**values).validate()
