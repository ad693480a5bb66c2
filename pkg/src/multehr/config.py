"""Experiment configuration: a single JSON file drives every command.

Schema is validated strictly before any work; unknown keys are rejected so a
typo cannot silently fall back to a default.  CLI flags override file values
and the resolved config is echoed into the output directory.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .data import SynthConfig
from .encoder import EncoderConfig
from .pretrain import PretrainConfig
from .training import LR_PRESETS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    mode: str = "random"          # random | partition
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    partition_file: str = ""      # patient_id,partition CSV for mode=partition

    def validate(self):
        if self.mode not in ("random", "partition"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if not (0 < self.val_fraction < 1) or not (0 < self.train_fraction < 1):
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.mode == "random" and self.train_fraction + self.val_fraction >= 1:
            raise ConfigError("train+val fractions must leave room for a test split")
        return self


@dataclass
class ExperimentConfig:
    data_dir: str = ""                 # CSV directory; empty -> use synth
    out_dir: str = "runs/latest"
    seed: int = 0
    deterministic: bool = False
    feature_dim: int = 128
    tasks: str = "RMDL"
    lam: float = 1.0
    lr_preset: str = ""                # '', 'main', or 'appendix'
    include_lab_events: bool = False
    readm_window_days: int = 15
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    folds: int = 5                     # cv command
    sweep: dict = field(default_factory=dict)

    def validate(self):
        if self.lr_preset and self.lr_preset not in LR_PRESETS:
            raise ConfigError(f"unknown lr preset {self.lr_preset!r}")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.encoder.hidden_dim != self.feature_dim:
            raise ConfigError("encoder.hidden_dim must equal feature_dim "
                              f"({self.encoder.hidden_dim} != {self.feature_dim})")
        self.split.validate()
        try:
            self.encoder.validate()
            self.train.validate()
            self.pretrain.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.lr_preset:
            lr, wd = LR_PRESETS[self.lr_preset]
            self.train.learning_rate = lr
            self.train.weight_decay = wd
        return self


_NESTED = {"synth": SynthConfig, "split": SplitConfig, "encoder": EncoderConfig,
           "train": TrainConfig, "pretrain": PretrainConfig}


def _build(cls, payload, path):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if name in _NESTED and cls is ExperimentConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a mapping")
            kwargs[name] = _build(_NESTED[name], value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"bad config near {path or 'top level'}: {err}") from err


def config_from_dict(payload):
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _build(ExperimentConfig, payload, "")
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    return config_from_dict(payload)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def echo_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
