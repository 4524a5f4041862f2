"""Run configuration: a key=value text format with dotted section keys.

Lines look like ``train.batch_size = 48``; blank lines and ``#`` comments are
ignored. Every runnable command resolves its configuration to a single
RunConfig and writes the resolved values as JSON next to its outputs, so a
run's exact settings are always diffable after the fact.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

from .backbone import BackboneConfig
from .losses import LossConfig
from .synth import SynthConfig
from .thresholds import ThresholdFitConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    dir: str = "data"


@dataclass
class SynthSection:
    count: int = 4000
    input_side: int = 64
    patch_grid: int = 8
    classes: int = 6
    boxed_classes: int = 4
    annotated_fraction: float = 0.01
    negative_fraction: float = 0.3
    label_noise: float = 0.0
    noise_sigma: float = 0.35
    blob_amplitude: float = 0.9


@dataclass
class ModelSection:
    input_side: int = 64
    patch_grid: int = 8
    classes: int = 6
    widths: tuple = (16, 32, 64)
    blur_taps: int = 3
    head_width: int = 32


@dataclass
class CrfSection:
    window: int = 5
    iterations: int = 5
    feature_dim: int = 8
    bandwidth: float = 1.0


@dataclass
class LossSection:
    family: str = "relu"
    lambda_ann: float = 70.0


@dataclass
class FitSection:
    slack_fraction: float = 0.02
    tau_hat_min: float = 1.0
    rho_hat_max_fraction: float = 0.25
    tau_rel_min: float = 0.1
    rho_rel_max: float = 0.25
    monotone: bool = True
    warmup_epochs: int = 6
    rounds: int = 12
    tolerance: float = 1e-3


@dataclass
class TrainSection:
    batch_size: int = 48
    lr: float = 0.001
    weight_decay: float = 0.01
    lr_decay: float = 0.95
    phase1_epochs: int = 12
    phase2_epochs: int = 6
    convergence_tol: float = 1e-3
    patience: int = 3
    unannotated_fraction: float = 0.2


@dataclass
class EvalSection:
    min_overlap: float = 0.1
    detection_threshold: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    folds: int = 5
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    crf: CrfSection = field(default_factory=CrfSection)
    loss: LossSection = field(default_factory=LossSection)
    fit: FitSection = field(default_factory=FitSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def backbone_config(self) -> BackboneConfig:
        m = self.model
        return BackboneConfig(input_side=m.input_side, patch_grid=m.patch_grid,
                              classes=m.classes, widths=tuple(m.widths),
                              blur_taps=m.blur_taps, head_width=m.head_width)

    def synth_config(self) -> SynthConfig:
        s = self.synth
        return SynthConfig(count=s.count, input_side=s.input_side, patch_grid=s.patch_grid,
                           classes=s.classes, boxed_classes=s.boxed_classes,
                           annotated_fraction=s.annotated_fraction,
                           negative_fraction=s.negative_fraction, label_noise=s.label_noise,
                           noise_sigma=s.noise_sigma, blob_amplitude=s.blob_amplitude,
                           seed=self.seed)

    def fit_config(self) -> ThresholdFitConfig:
        f = self.fit
        return ThresholdFitConfig(slack_fraction=f.slack_fraction, tau_hat_min=f.tau_hat_min,
                                  rho_hat_max_fraction=f.rho_hat_max_fraction,
                                  tau_rel_min=f.tau_rel_min, rho_rel_max=f.rho_rel_max,
                                  monotone=f.monotone, warmup_epochs=f.warmup_epochs,
                                  rounds=f.rounds, tolerance=f.tolerance)

    def loss_config(self, gamma) -> LossConfig:
        return LossConfig(lambda_ann=self.loss.lambda_ann, gamma=gamma,
                          family=self.loss.family)


_TOP_LEVEL = ("seed", "folds")


def _convert(value: str, ftype, key: str):
    value = value.strip()
    try:
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if ftype is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    """Apply one dotted key=value setting onto a RunConfig in place."""
    key = key.strip()
    if key in _TOP_LEVEL:
        setattr(cfg, key, _convert(value, int, key))
        return
    if "." not in key:
        raise ConfigError(f"config key {key!r} needs a section prefix (e.g. train.lr)")
    section_name, field_name = key.split(".", 1)
    section = getattr(cfg, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigError(f"unknown config section {section_name!r}")
    types = {f.name: f.type for f in dataclasses.fields(section)}
    if field_name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = type(getattr(section, field_name))
    setattr(section, field_name, _convert(value, ftype, key))


def load_config(path: Optional[str] = None,
                overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then the config file (if any), then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, value = stripped.split("=", 1)
            try:
                apply_setting(cfg, key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    for key, value in (overrides or {}).items():
        apply_setting(cfg, key, value)
    return cfg


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_resolved_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")
