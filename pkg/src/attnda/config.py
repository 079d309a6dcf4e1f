"""Experiment configuration: TOML file with dotted sections plus ``--set`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import tomli
import tomli_w

from .attention import TransformSpec
from .data import AugmentConfig, SyntheticSpec
from .losses import RegularizerParams
from .models import ModelSpec


class ConfigError(ValueError):
    """Configuration failed validation; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass(frozen=True)
class ScheduleConfig:
    lr0: float = 0.01
    max_steps: int = 2000
    # when > 0, max_steps is replaced by epochs * ceil(len(source) / batch_size)
    epochs: int = 0
    momentum: float = 0.9
    power: float = 0.9
    weight_decay: float = 5e-4
    eval_interval: int = 500
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class AblationFlags:
    disable_adv: bool = False
    disable_pseudo: bool = False
    disable_ac: bool = False
    disable_as: bool = False
    use_prediction_consistency: bool = False
    disable_entropy_weight: bool = False
    ac_gate_all: bool = False
    as_gate_all: bool = False
    ac_distance: str = "l2"


@dataclass(frozen=True)
class DataConfig:
    """Dataset locations; ``kind = "synthetic"`` ignores the paths."""

    kind: str = "synthetic"
    source_train: Optional[str] = None
    source_test: Optional[str] = None
    target_train: Optional[str] = None
    target_test: Optional[str] = None
    image_size: Optional[int] = None
    channels: int = 1
    synthetic: SyntheticSpec = SyntheticSpec()


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "synthetic"
    data: DataConfig = DataConfig()
    model: ModelSpec = ModelSpec()
    regularizers: RegularizerParams = RegularizerParams()
    schedule: ScheduleConfig = ScheduleConfig()
    augment: AugmentConfig = AugmentConfig()
    transform: TransformSpec = TransformSpec()
    ablation: AblationFlags = AblationFlags()
    batch_size: int = 36
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = True
    use_augmentation: bool = True


_NESTED = {
    "data": DataConfig,
    "model": ModelSpec,
    "regularizers": RegularizerParams,
    "schedule": ScheduleConfig,
    "augment": AugmentConfig,
    "transform": TransformSpec,
    "ablation": AblationFlags,
    "synthetic": SyntheticSpec,
}


def to_dict(obj) -> dict:
    """Plain nested dict (tuples become lists, ``None`` fields dropped for TOML)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif v is None:
            continue
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _build(cls, data: dict, prefix: str, problems: list):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"unknown key {prefix}{key}")
            continue
        if key in _NESTED and isinstance(value, dict):
            sub = _build(_NESTED[key], value, f"{prefix}{key}.", problems)
            if sub is not None:
                kwargs[key] = sub
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return None


def from_dict(data: dict) -> ExperimentConfig:
    problems: list = []
    cfg = _build(ExperimentConfig, data, "", problems)
    if cfg is not None:
        problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig) -> list:
    problems = []
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if cfg.data.kind not in ("synthetic", "files"):
        problems.append(f"data.kind must be 'synthetic' or 'files', got {cfg.data.kind!r}")
    if cfg.data.kind == "files":
        for key in ("source_train", "target_train"):
            path = getattr(cfg.data, key)
            if not path:
                problems.append(f"data.{key} is required for file datasets")
            elif not Path(path).exists():
                problems.append(f"data.{key} does not exist: {path}")
        for key in ("source_test", "target_test"):
            path = getattr(cfg.data, key)
            if path and not Path(path).exists():
                problems.append(f"data.{key} does not exist: {path}")
    if cfg.data.kind == "synthetic" and cfg.data.synthetic.classes != cfg.model.class_count:
        problems.append(
            f"data.synthetic.classes={cfg.data.synthetic.classes} != model.class_count={cfg.model.class_count}"
        )
    if cfg.ablation.ac_distance not in ("l2", "mse"):
        problems.append("ablation.ac_distance must be 'l2' or 'mse'")
    if cfg.model.in_channels != cfg.data.channels:
        problems.append(f"model.in_channels={cfg.model.in_channels} != data.channels={cfg.data.channels}")
    return problems


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings to a nested dict (values parsed as TOML literals)."""
    data = _deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key!r} descends into a non-section"])
        node[parts[-1]] = _parse_value(text.strip())
    return data


def _deepcopy(d):
    return {k: _deepcopy(v) if isinstance(v, dict) else v for k, v in d.items()}


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            data = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
    return from_dict(apply_overrides(data, overrides))


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path


def with_updates(cfg: ExperimentConfig, **sections: Any) -> ExperimentConfig:
    """``with_updates(cfg, ablation={"disable_ac": True}, seed=3)`` style helper."""
    kwargs = {}
    for name, value in sections.items():
        if isinstance(value, dict):
            kwargs[name] = replace(getattr(cfg, name), **value)
        else:
            kwargs[name] = value
    return replace(cfg, **kwargs)


def digits_preset(task: str = "u2m") -> ExperimentConfig:
    """Hyperparameters of the digit tasks (LeNet, Grad-CAM, rotation transform)."""
    size = 32 if task == "s2m" else 28
    return ExperimentConfig(
        task=f"digits-{task}",
        data=DataConfig(kind="files", image_size=size),
        model=ModelSpec(extractor_kind="lenet-like", class_count=10, image_size=size),
        regularizers=RegularizerParams.digits(),
        schedule=ScheduleConfig(lr0=0.003 if task == "s2m" else 0.01, epochs=40),
        augment=AugmentConfig(flip_probability=0.0),
        transform=TransformSpec(kind="rotation", max_rotation=10.0),
        batch_size=64,
        use_augmentation=False,
    )
