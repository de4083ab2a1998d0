"""Experiment configuration: a flat INI file with sectioned keys.

Sections: [task] [data] [model] [train] [selflearn] [fed] [experiment].
Every key has a default; unknown keys are rejected so typos fail loudly.
The full schema with defaults is documented in the README.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import TaskSpec
from .fedsim import FedConfig, Weighting
from .model import ModelConfig
from .selflearn import Method, SelfLearnConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "NBADAPT_OUT_ROOT"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    dir: str = "data"
    seed_train: str = "seed_train.txt"
    seed_val: str = "seed_val.txt"
    adapt: str = "shifted_adapt.txt"
    adapt_val: str = "shifted_val.txt"
    n_seed_train: int = 2000
    n_seed_val: int = 200
    n_adapt: int = 400
    n_adapt_val: int = 150
    n_speakers: int = 50

    def path(self, base: Path, name: str) -> Path:
        return (base / self.dir / getattr(self, name)).resolve()


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    selflearn: SelfLearnConfig
    fed: FedConfig
    seeds: tuple = (1,)
    out: str = "runs"
    target_cer: float = 0.04
    patience: int = 8
    base_dir: Path = field(default_factory=Path)

    def data_path(self, name: str) -> Path:
        return self.data.path(self.base_dir, name)

    def out_root(self) -> Path:
        env = os.environ.get(OUTPUT_ROOT_ENV)
        if env:
            return Path(env)
        out = Path(self.out)
        return out if out.is_absolute() else self.base_dir / out


_SCHEMA = {
    "task": {
        "vocab_size": int, "feature_dim": int, "frames_per_token": "int_pair",
        "noise_sigma": float, "shift_angle_deg": float, "shift_perturbation": float,
        "seq_len_range": "int_pair", "speaker_jitter_sigma": float, "seed": int,
    },
    "data": {
        "dir": str, "seed_train": str, "seed_val": str, "adapt": str, "adapt_val": str,
        "n_seed_train": int, "n_seed_val": int, "n_adapt": int, "n_adapt_val": int,
        "n_speakers": int,
    },
    "model": {
        "encoder_layers": int, "encoder_hidden": int, "decoder_layers": int,
        "decoder_hidden": int, "embed_dim": int, "attention_dim": int, "dropout": float,
    },
    "train": {
        "learning_rate": float, "batch_size": int, "max_epochs": int,
        "label_smoothing": float, "sampling_max": float, "sampling_ramp_frac": float,
        "grad_clip_norm": float,
    },
    "selflearn": {
        "method": str, "n_best": int, "nbest_epochs": int, "onebest_epochs": int,
        "max_outer_iterations": int, "beam_width": int, "max_decode_len": int,
        "temperature": float, "improve_margin": float, "learning_rate": float,
        "batch_size": int,
    },
    "fed": {
        "cohort_size": int, "local_steps": int, "decode_refresh_interval": int,
        "server_optimizer": str, "server_lr": float, "weighting": str,
        "total_rounds": int, "learning_rate": float,
    },
    "experiment": {
        "seeds": "int_list", "out": str, "target_cer": float, "patience": int,
    },
}


def _parse_value(raw: str, kind):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw.strip()
    if kind == "int_pair":
        parts = raw.split()
        if len(parts) != 2:
            raise ValueError(f"expected two integers, got {raw!r}")
        return (int(parts[0]), int(parts[1]))
    if kind == "int_list":
        return tuple(int(x) for x in raw.split())
    raise ValueError(f"unknown kind {kind}")


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict = {section: {} for section in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = _parse_value(raw, _SCHEMA[section][key])
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {exc}") from exc

    try:
        task = TaskSpec(**values["task"])
        data = DataConfig(**values["data"])
        model = ModelConfig(feature_dim=task.feature_dim, vocab_size=task.vocab_size,
                            **values["model"])
        train = TrainConfig(**values["train"])
        sl_extra = dict(values["selflearn"])
        sl_train = TrainConfig(
            learning_rate=sl_extra.pop("learning_rate", 5e-4),
            batch_size=sl_extra.pop("batch_size", 8),
            label_smoothing=train.label_smoothing,
            grad_clip_norm=train.grad_clip_norm,
        )
        if "method" in sl_extra:
            sl_extra["method"] = Method(sl_extra["method"])
        selflearn = SelfLearnConfig(train=sl_train, **sl_extra)
        fed_extra = dict(values["fed"])
        fed_train = TrainConfig(
            learning_rate=fed_extra.pop("learning_rate", 5e-4),
            batch_size=1,
            label_smoothing=train.label_smoothing,
            grad_clip_norm=train.grad_clip_norm,
        )
        if "weighting" in fed_extra:
            fed_extra["weighting"] = Weighting(fed_extra["weighting"])
        fed = FedConfig(train=fed_train, method=selflearn.method, n_best=selflearn.n_best,
                        beam_width=selflearn.beam_width,
                        max_decode_len=selflearn.max_decode_len, **fed_extra)
        exp = values["experiment"]
        if "seeds" in exp and not exp["seeds"]:
            raise ConfigError(f"{path}: [experiment] seeds must be non-empty")
        return ExperimentConfig(
            task=task, data=data, model=model, train=train, selflearn=selflearn, fed=fed,
            seeds=exp.get("seeds", (1,)), out=exp.get("out", "runs"),
            target_cer=exp.get("target_cer", 0.04), patience=exp.get("patience", 5),
            base_dir=path.parent.resolve(),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


DEFAULT_CONFIG = """\
# Desk-scale experiment configuration (all values shown are the defaults).

[task]
vocab_size = 12
feature_dim = 16
frames_per_token = 1 3
noise_sigma = 0.3
shift_angle_deg = 50.0
shift_perturbation = 0.3
seq_len_range = 3 8
speaker_jitter_sigma = 0.1
seed = 12345

[data]
dir = data
seed_train = seed_train.txt
seed_val = seed_val.txt
adapt = shifted_adapt.txt
adapt_val = shifted_val.txt
n_seed_train = 2000
n_seed_val = 200
n_adapt = 400
n_adapt_val = 150
n_speakers = 50

[model]
encoder_layers = 1
encoder_hidden = 32
decoder_layers = 1
decoder_hidden = 64
embed_dim = 32
attention_dim = 32
dropout = 0.0

[train]
learning_rate = 1e-3
batch_size = 16
max_epochs = 14
label_smoothing = 0.1
sampling_max = 0.3
sampling_ramp_frac = 0.5
grad_clip_norm = 5.0

[selflearn]
method = mtl_shared_ae
n_best = 4
nbest_epochs = 2
onebest_epochs = 2
max_outer_iterations = 3
beam_width = 8
max_decode_len = 16
temperature = 1.0
improve_margin = 0.001
learning_rate = 5e-4
batch_size = 8

[fed]
cohort_size = 8
local_steps = 10
decode_refresh_interval = 16
server_optimizer = plain
server_lr = 1.0
weighting = uniform
total_rounds = 16
learning_rate = 5e-4

[experiment]
seeds = 1 2 3
out = runs
target_cer = 0.04
patience = 8
"""


def write_default_config(path) -> None:
    Path(path).write_text(DEFAULT_CONFIG)
