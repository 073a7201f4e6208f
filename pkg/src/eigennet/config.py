"""Run configuration: defaults, flat key=value config files, dataset resolution.

Precedence is defaults < config file < command-line flags. The synthetic
dataset is generated from a fixed data seed so that --seed varies only
initialization and shuffling, never the task itself.
"""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import load_cifar10_bin, load_idx, synth_blobs
from .errors import ConfigError
from .optim import OptimConfig
from .training import TrainConfig

DATASETS = ("mnist", "cifar10", "synth")

SYNTH_DATA_SEED = 20240601
SYNTH_SEPARATION = 4.0
SYNTH_TRAIN_PER_CLASS = 500
SYNTH_TEST_PER_CLASS = 100

DEFAULT_LAMBDA_GRID = (0.0, 1e-5, 1e-4, 2e-4, 1e-3, 4e-3, 1e-2)
LAMBDA_GRID_MAX = 0.01


@dataclass
class RunConfig:
    mode: str = "local"
    lam: float = 2e-4
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 128
    workers: int = 1
    seed: int = 0
    dataset: str = "synth"
    data_dir: str = ""
    out_dir: str = "runs"
    preset: str = "mlp-4block"
    checkpoint_interval: int = 0
    optim_rule: str = "adaptive-decoupled"
    weight_decay: float = 1e-4
    momentum: float = 0.0
    clip_norm: float = 0.0
    sweep_epochs: int = 15
    sweep_fraction: float = 0.25
    sweep_grid: tuple = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}, expected one of {DATASETS}")
        if not self.data_dir:
            self.data_dir = os.environ.get("EIGENNET_DATA_DIR", "data")

    def train_config(self, mode=None):
        optim = OptimConfig(rule=self.optim_rule, lr=self.lr, momentum=self.momentum,
                            weight_decay=self.weight_decay, clip_norm=self.clip_norm)
        return TrainConfig(mode=mode or self.mode, lam=self.lam, epochs=self.epochs,
                           batch_size=self.batch_size, workers=self.workers,
                           seed=self.seed, optim=optim)


@dataclass
class SweepSpec:
    lam_grid: tuple = DEFAULT_LAMBDA_GRID
    epochs: int = 15
    fraction: float = 0.25

    def __post_init__(self):
        for lam in self.lam_grid:
            if not 0.0 <= lam <= LAMBDA_GRID_MAX:
                raise ConfigError(f"lambda grid value {lam} outside the swept interval [0, {LAMBDA_GRID_MAX}]")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"dataset fraction must lie in (0, 1], got {self.fraction}")
        if self.epochs < 1:
            raise ConfigError("sweep needs at least one epoch")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    kind = _FIELD_TYPES[key]
    try:
        if key == "sweep_grid":
            return tuple(float(v) for v in raw.split(","))
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse config value {key} = {raw!r}") from None
    return raw


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key == "lambda":
            key = "lam"
        values[key] = _parse_value(key, raw)
    return values


def build_run_config(config_path=None, overrides=None):
    values = {}
    if config_path:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        values.update(parse_config_file(config_path))
    for key, val in (overrides or {}).items():
        if val is not None:
            values.update({key: val})
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def synth_geometry(preset):
    return (3, 32, 32) if preset.startswith("cnn") else (1, 28, 28)


def load_datasets(cfg):
    """(train, test) pair for the configured dataset."""
    if cfg.dataset == "synth":
        c, h, w = synth_geometry(cfg.preset)
        dims = c * h * w
        train = synth_blobs(10, dims, SYNTH_TRAIN_PER_CLASS, SYNTH_SEPARATION,
                            SYNTH_DATA_SEED, geometry=(c, h, w))
        test = synth_blobs(10, dims, SYNTH_TEST_PER_CLASS, SYNTH_SEPARATION,
                           SYNTH_DATA_SEED + 1, geometry=(c, h, w))
        return train, test
    root = Path(cfg.data_dir)
    if cfg.dataset == "mnist":
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        paths = [_find_file(root, n) for n in names]
        return load_idx(paths[0], paths[1]), load_idx(paths[2], paths[3])
    batch_dir = root / "cifar-10-batches-bin"
    if not batch_dir.is_dir():
        batch_dir = root
    train_paths = [batch_dir / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_path = batch_dir / "test_batch.bin"
    for p in train_paths + [test_path]:
        if not p.exists():
            raise ConfigError(f"missing CIFAR-10 file: {p}")
    return load_cifar10_bin(train_paths), load_cifar10_bin([test_path])


def _find_file(root, name):
    for candidate in (root / name, root / "MNIST" / "raw" / name):
        if candidate.exists():
            return candidate
    raise ConfigError(f"missing dataset file {name} under {root}")
