"""Experiment configuration: a strict TOML schema with content hashing.

Unknown keys are hard errors; silent default drift is the main
reproducibility killer in evaluation harnesses. The canonical JSON dump of
the parsed config is hashed and embedded in every output file.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .attacks import ALL_METHODS
from .merging import AmConfig, RsConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Schema violation (unknown key, bad value, wrong version)."""


@dataclass
class TaskConfig:
    kind: str = "synthetic"
    num_tasks: int = 3
    input_dim: int = 64
    classes_per_task: int = 4
    n_train: int = 512
    n_test: int = 512
    center_low: float = 0.38
    center_high: float = 0.62
    noise_sigma: float = 0.17
    images_path: str = ""
    labels_path: str = ""


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    conv_channels: int = 4


@dataclass
class TrainingConfig:
    pretrain_epochs: int = 3
    pretrain_lr: float = 0.05
    pretrain_label_noise: float = 0.35
    pretrain_subsample: float = 0.4
    finetune_epochs: int = 40
    finetune_lr: float = 0.02
    batch_size: int = 32
    head_scale: float = 1.0


@dataclass
class MergingConfig:
    ta_scale: float = 0.6
    tm_scale: float = 0.6
    tm_trim_fraction: float = 0.2
    am: AmConfig = field(default_factory=AmConfig)
    rs: RsConfig = field(default_factory=RsConfig)


@dataclass
class AttackConfig:
    methods: list[str] = field(default_factory=lambda: list(ALL_METHODS))
    epsilon: float = 0.1
    step_size: float = 0.01
    iterations: int = 10
    momentum_decay: float = 1.0
    kernel_size: int = 5
    square_budget: int = 500
    square_p: float = 0.8
    n_attack_samples: int = 256

    def __post_init__(self):
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ConfigError(f"unknown attack method {m!r}")


@dataclass
class StatisticsConfig:
    alpha: float = 0.05
    fdr: float = 0.05


@dataclass
class DefenseConfig:
    crops: int = 30
    crop_fraction: float = 0.9
    bits: int = 5
    quality: int = 75
    noise_sigma: float = 0.02
    task: int = 0


@dataclass
class GradientConfig:
    probes: int = 256
    task: int = 0


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 7
    out_dir: str = "runs/desk"
    tasks: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    merging: MergingConfig = field(default_factory=MergingConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    statistics: StatisticsConfig = field(default_factory=StatisticsConfig)
    defenses: DefenseConfig = field(default_factory=DefenseConfig)
    gradient: GradientConfig = field(default_factory=GradientConfig)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "tasks": TaskConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "merging": MergingConfig,
    "attacks": AttackConfig,
    "statistics": StatisticsConfig,
    "defenses": DefenseConfig,
    "gradient": GradientConfig,
}
_NESTED = {"am": AmConfig, "rs": RsConfig}


def _build(cls, table: dict, path: str):
    allowed = set(cls.__dataclass_fields__)
    kwargs = {}
    for key, value in table.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key}")
        if isinstance(value, dict):
            if key in _NESTED:
                value = _build(_NESTED[key], value, f"{path}.{key}")
            else:
                raise ConfigError(f"unexpected table at {path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{path}]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    top_scalars = {"version", "seed", "out_dir"}
    kwargs = {}
    for key, value in raw.items():
        if key in top_scalars:
            kwargs[key] = value
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown key {key}")
    cfg = ExperimentConfig(**kwargs)
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}, "
                          f"this toolkit speaks version {CONFIG_VERSION}")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def default_config_toml(seed: int = 7, out_dir: str = "runs/desk") -> str:
    """A complete default config file, suitable for `init`."""
    return f"""\
version = 1
seed = {seed}
out_dir = "{out_dir}"

[tasks]
kind = "synthetic"
num_tasks = 3
input_dim = 64
classes_per_task = 4
n_train = 512
n_test = 512
center_low = 0.38
center_high = 0.62
noise_sigma = 0.17

[model]
arch = "mlp"
hidden = [128, 64]

[training]
pretrain_epochs = 3
pretrain_lr = 0.05
pretrain_label_noise = 0.35
pretrain_subsample = 0.4
finetune_epochs = 40
finetune_lr = 0.02
batch_size = 32

[merging]
ta_scale = 0.6
tm_scale = 0.6
tm_trim_fraction = 0.2

[merging.am]
learning_rate = 0.001
iterations = 300
initial_lambda = 0.3
mode = "taskwise"

[merging.rs]
rank = 8
iterations = 500
batch_size = 16
learning_rate = 0.01

[attacks]
methods = ["fgsm", "ifgsm", "pgd", "nifgsm", "tifgsm", "square"]
epsilon = 0.1
step_size = 0.01
iterations = 10
momentum_decay = 1.0
kernel_size = 5
square_budget = 500
square_p = 0.8
n_attack_samples = 256

[statistics]
alpha = 0.05
fdr = 0.05

[defenses]
crops = 30
crop_fraction = 0.9
bits = 5
quality = 75
noise_sigma = 0.02
task = 0

[gradient]
probes = 256
task = 0
"""
