"""Flat ``key = value`` experiment configuration.

One file drives every command. Blank lines and ``#`` comments are
ignored; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from triplab.model import ModelConfig
from triplab.training import TrainConfig

DEFAULT_ROOT = "triplab_data"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # paths
    root: str = ""
    dataset: str = "dataset"
    run: str = "run"
    checkpoint: str = ""
    # vocabulary and generation
    vocab: str = "canonical"
    classes: str = ""
    n_classes: int = 128
    n_frames: int = 100
    frames_per_video: int = 5
    height: int = 64
    width: int = 112
    distribution: str = "cooccurrence"
    distribution_power: float = 1.0
    count_probs: tuple[float, ...] = (0.1, 0.5, 0.3, 0.1)
    unique_instruments: bool = True
    n_distractors: int = 1
    noise: float = 0.03
    split_fractions: tuple[float, ...] = (0.625, 0.125, 0.25)
    split_seed: int = 0
    # model
    kind: str = "tripnet"
    stride: int = 8
    backbone_blocks: int = 4
    backbone_channels: tuple[int, ...] = (32, 64)
    batchnorm: bool = True
    branch_channels: int = 32
    head: str = "gmp"
    cag: bool = True
    space: str = "trained"
    projection: str = "vector"
    cam_detach: bool = True
    instrument_grad: float = 1.0
    padding: str = "zeros"
    # training
    epochs: int = 100
    warmup_epochs: int = 3
    batch_size: int = 16
    lr_subnets: float = 1e-3
    lr_backbone: float = 1e-4
    lr_space: float = 1e-5
    decay_rate: float = 0.95
    decay_steps: int = 0
    weight_decay: float = 1e-5
    momentum: float = 0.9
    grad_clip: float = 0.0
    aug_rotate: bool = True
    aug_flip: bool = True
    aug_patch: bool = True
    aug_prob: float = 0.5
    class_weighting: bool = True
    seed: int = 0
    threshold: float = 0.5
    # evaluation
    eval_split: str = "test"
    instrument_source: str = "volume"
    prob_thresh: float = 0.5
    cam_thresh_frac: float = 0.5
    # ablation
    ablate_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablate_baselines: bool = True

    def __post_init__(self):
        if self.kind not in ("tripnet", "mtl", "naive"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"unknown eval_split {self.eval_split!r}")
        if self.instrument_source not in ("volume", "branch"):
            raise ConfigError(f"unknown instrument_source {self.instrument_source!r}")
        try:
            self.train_config()
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def root_dir(self) -> Path:
        return Path(self.root or os.environ.get("TRIPLAB_DATA_DIR") or DEFAULT_ROOT)

    @property
    def dataset_dir(self) -> Path:
        return self.root_dir / self.dataset

    @property
    def run_dir(self) -> Path:
        return self.root_dir / self.run

    def train_config(self) -> TrainConfig:
        return _project(self, TrainConfig)

    def model_config(self) -> ModelConfig:
        return _project(self, ModelConfig)

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, **kw)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _project(cfg: ExperimentConfig, cls):
    return cls(**{f.name: getattr(cfg, f.name) for f in fields(cls) if f.init and hasattr(cfg, f.name)})


_TYPES = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        (item,) = set(typing.get_args(kind)) - {Ellipsis}
        return tuple(item(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, val)
    values.update(overrides or {})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def format_config(cfg: ExperimentConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
