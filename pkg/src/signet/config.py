"""Run configuration: one flat ``key=value`` namespace over every component.

Component fields are addressed with a section prefix (``data.seed``,
``model.k``, ``train.epochs``, ``split.ratios``); run-level paths and the
small-sample sweep live at the top level. Unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from . import flatconf
from .exceptions import ConfigError
from .models import ModelConfig
from .sigsynth import SCHEMES, SynthConfig
from .training import SplitSpec, TrainConfig

RUNS_ENV = "SIGNET_RUNS"

SECTIONS = {
    "data": SynthConfig,
    "split": SplitSpec,
    "model": ModelConfig,
    "train": TrainConfig,
}


@dataclass
class RunOptions:
    dataset: str = ""
    run_root: str = ""
    run_name: str = "run"
    eta_fracs: tuple = (1.0,)
    eval_batch_size: int = 128


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_flat(self) -> dict:
        out = flatconf.to_flat(self.run)
        for name in SECTIONS:
            out.update({f"{name}.{k}": v for k, v in flatconf.to_flat(getattr(self, name)).items()})
        return out

    def dumps(self) -> str:
        return flatconf.dumps(self.to_flat())

    def update(self, values: dict) -> "RunConfig":
        """New config with ``values`` (strings or typed) applied on top of this one."""
        grouped = {name: {} for name in (*SECTIONS, "run")}
        for key, val in values.items():
            section, dot, name = key.partition(".")
            if not dot:
                section, name = "run", key
            if section not in grouped:
                raise ConfigError(f"unknown config key {key!r}")
            grouped[section][name] = val
        parts = {}
        for section, vals in grouped.items():
            current = getattr(self, section)
            base = flatconf.to_flat(current)
            for name, val in vals.items():
                if name not in base:
                    raise ConfigError(f"unknown config key {key_of(section, name)!r}")
                base[name] = flatconf.coerce(val, _example(type(current), name, base[name])) if isinstance(val, str) else val
            try:
                parts[section] = type(current)(**base)
            except TypeError as exc:
                raise ConfigError(str(exc)) from None
        return RunConfig(**parts)

    def runs_root(self) -> str:
        return self.run.run_root or os.environ.get(RUNS_ENV) or "runs"

    def resolved_model(self, num_classes: int, input_length: int) -> ModelConfig:
        return replace(self.model, num_classes=num_classes, input_length=input_length)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.split.normalized()
        self.model.validate()
        self.train.validate()
        if not self.run.eta_fracs or any(not 0 < f <= 1 for f in self.run.eta_fracs):
            raise ConfigError("eta_fracs must be fractions in (0, 1]")
        if self.run.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")
        return self


def key_of(section: str, name: str) -> str:
    return name if section == "run" else f"{section}.{name}"


def _example(cls, name, current):
    # an empty tuple gives no element type to coerce against; fall back to the default
    if isinstance(current, tuple) and not current:
        return flatconf.defaults(cls)[name]
    return current


PRESETS = {
    # 11 classes x 20 SNRs at N = 128, raw (unnormalized) input
    "rml-mini": {
        "data.schemes": tuple(s for s in SCHEMES if s != "32QAM"),
        "data.symbols_per_sample": 16,
        "data.snr_grid_db": tuple(range(-20, 19, 2)),
        "data.samples_per_class_per_snr": 100,
        "data.normalize": False,
        "model.num_classes": 11,
        "model.input_length": 128,
    },
    # 12 classes x 26 SNRs at N = 512, min-max normalized
    "sig2019-mini": {
        "data.schemes": SCHEMES,
        "data.symbols_per_sample": 64,
        "data.snr_grid_db": tuple(range(-20, 31, 2)),
        "data.samples_per_class_per_snr": 50,
        "model.num_classes": 12,
        "model.input_length": 512,
    },
    # 4 well-separated classes at high SNR, 200/67/67 per cell; raw input with
    # random phase rotations, since 2400 training samples overfit quickly otherwise
    "toy4": {
        "data.schemes": ("BPSK", "4FSK", "16QAM", "4PAM"),
        "data.symbols_per_sample": 16,
        "data.snr_grid_db": (10, 14, 18),
        "data.samples_per_class_per_snr": 334,
        "data.seed": 1,
        "data.normalize": False,
        "split.ratios": (200.0, 67.0, 67.0),
        "model.num_classes": 4,
        "model.input_length": 128,
        "train.epochs": 12,
        "train.augment_phase": True,
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig().update(PRESETS[name])


def load_config(path=None, preset_name: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then a preset, then a config file, then explicit overrides."""
    cfg = preset(preset_name) if preset_name else RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = flatconf.loads(text)
        name = values.pop("preset", None)
        if name and not preset_name:
            cfg = preset(name)
        cfg = cfg.update(values)
    if overrides:
        cfg = cfg.update(overrides)
    return cfg

