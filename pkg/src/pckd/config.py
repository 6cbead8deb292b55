"""Experiment configuration: YAML schema, validation, and CLI overrides.

The schema is strict: unknown keys are rejected and every error names the
offending field with its dotted path. Override precedence is CLI flag over
config file over registry default; the fully resolved configuration is
echoed at run start and written next to the run outputs.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .losses import LOSS_TERM_NAMES, LossWeights
from .models import BACKBONES
from .preview import POLICIES, SchedulerConfig
from .train import TrainConfig

DATA_ROOT_ENV = "PCKD_DATA_ROOT"


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    name: str = "synthetic"
    root: str = "data"
    num_classes: int = 10
    per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 20
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    hard_fraction: float = 0.3
    contrast: float = 0.25
    clutter_strength: float = 1.0
    noise_std: float = 0.08
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes, per_class=self.per_class,
            image_size=self.image_size, channels=self.channels, seed=self.seed,
            hard_fraction=self.hard_fraction, contrast=self.contrast,
            clutter_strength=self.clutter_strength, noise_std=self.noise_std,
            val_per_class=self.val_per_class, test_per_class=self.test_per_class,
        )


@dataclass
class ModelConfig:
    backbone: str = "convnet_small"
    checkpoint: str = ""


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/exp"
    run_name: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: ModelConfig = field(default_factory=ModelConfig)
    student: ModelConfig = field(default_factory=lambda: ModelConfig(backbone="convnet_tiny"))
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        raw = {
            "output_dir": self.output_dir,
            "run_name": self.run_name,
            "dataset": asdict(self.dataset),
            "teacher": asdict(self.teacher),
            "student": asdict(self.student),
            "train": {
                k: v for k, v in asdict(self.train).items()
                if k not in ("loss_weights", "scheduler")
            },
            "loss": asdict(self.train.loss_weights)
            | {"normalize_contrast": self.train.normalize_contrast},
            "preview": asdict(self.train.scheduler)
            | {"applies_to": list(self.train.preview_applies_to)},
        }
        raw["train"].pop("normalize_contrast", None)
        raw["train"].pop("preview_applies_to", None)
        raw["dataset"]["mean"] = list(self.dataset.mean)
        raw["dataset"]["std"] = list(self.dataset.std)
        raw["train"]["lr_milestones"] = list(self.train.lr_milestones)
        return raw

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _expect(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{path}: {message}")


def _typed(value, types, path: str, type_name: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{path}: expected {type_name}, got a boolean")
    _expect(isinstance(value, types), path, f"expected {type_name}, got {type(value).__name__}")
    return value


def _take(section: dict, path: str, known: dict) -> dict:
    """Pop known keys with type checks; reject anything left over."""
    out = {}
    for key, (types, type_name) in known.items():
        if key in section:
            out[key] = _typed(section.pop(key), types, f"{path}.{key}", type_name)
    if section:
        raise ConfigError(f"{path}: unknown keys {sorted(section)}")
    return out


_NUM = ((int, float), "a number")
_INT = (int, "an integer")
_STR = (str, "a string")
_BOOL = (bool, "a boolean")
_LIST = (list, "a list")


def parse_experiment_config(raw: dict, path_hint: str = "config") -> ExperimentConfig:
    """Validate a raw mapping against the schema and build the config object."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path_hint}: top level must be a mapping")
    raw = dict(raw)
    top = _take(
        {k: raw.pop(k) for k in ("output_dir", "run_name") if k in raw},
        path_hint, {"output_dir": _STR, "run_name": _STR},
    )

    ds_raw = _typed(raw.pop("dataset", {}), dict, f"{path_hint}.dataset", "a mapping")
    ds_kw = _take(dict(ds_raw), f"{path_hint}.dataset", {
        "kind": _STR, "name": _STR, "root": _STR, "num_classes": _INT,
        "per_class": _INT, "val_per_class": _INT, "test_per_class": _INT,
        "image_size": _INT, "channels": _INT, "seed": _INT,
        "hard_fraction": _NUM, "contrast": _NUM, "clutter_strength": _NUM,
        "noise_std": _NUM, "mean": _LIST, "std": _LIST,
    })
    if "mean" in ds_kw:
        ds_kw["mean"] = tuple(float(x) for x in ds_kw["mean"])
    if "std" in ds_kw:
        ds_kw["std"] = tuple(float(x) for x in ds_kw["std"])
    dataset = DatasetConfig(**ds_kw)
    _expect(dataset.kind in ("synthetic", "binary"), f"{path_hint}.dataset.kind",
            "must be 'synthetic' or 'binary'")
    _expect(dataset.num_classes >= 2, f"{path_hint}.dataset.num_classes", "must be >= 2")
    _expect(all(s > 0 for s in dataset.std), f"{path_hint}.dataset.std",
            "entries must be > 0")

    teacher = ModelConfig(**_take(
        _typed(raw.pop("teacher", {}), dict, f"{path_hint}.teacher", "a mapping"),
        f"{path_hint}.teacher", {"backbone": _STR, "checkpoint": _STR},
    ))
    student = ModelConfig(**_take(
        _typed(raw.pop("student", {}), dict, f"{path_hint}.student", "a mapping"),
        f"{path_hint}.student", {"backbone": _STR, "checkpoint": _STR},
    ))
    for label, model in (("teacher", teacher), ("student", student)):
        _expect(model.backbone in BACKBONES, f"{path_hint}.{label}.backbone",
                f"unknown backbone {model.backbone!r}; known: {sorted(BACKBONES)}")

    tr_kw = _take(
        _typed(raw.pop("train", {}), dict, f"{path_hint}.train", "a mapping"),
        f"{path_hint}.train", {
            "epochs": _INT, "batch_size": _INT, "lr": _NUM, "momentum": _NUM,
            "weight_decay": _NUM, "lr_milestones": _LIST, "lr_decay": _NUM,
            "seed": _INT, "flip_prob": _NUM, "deterministic": _BOOL, "eval_every": _INT,
        },
    )
    loss_kw = _take(
        _typed(raw.pop("loss", {}), dict, f"{path_hint}.loss", "a mapping"),
        f"{path_hint}.loss", {
            "alpha": _NUM, "beta_cc": _NUM, "beta_fa": _NUM, "beta_ca": _NUM,
            "tau_kd": _NUM, "tau_cc": _NUM, "normalize_contrast": _BOOL,
        },
    )
    pv_kw = _take(
        _typed(raw.pop("preview", {}), dict, f"{path_hint}.preview", "a mapping"),
        f"{path_hint}.preview", {
            "policy": _STR, "epsilon": _NUM, "focal_gamma": _NUM, "applies_to": _LIST,
        },
    )
    if raw:
        raise ConfigError(f"{path_hint}: unknown keys {sorted(raw)}")

    _expect(tr_kw.get("lr", 0.05) > 0, f"{path_hint}.train.lr", "must be > 0")
    _expect(tr_kw.get("epochs", 1) >= 1, f"{path_hint}.train.epochs", "must be >= 1")
    _expect(tr_kw.get("batch_size", 1) >= 1, f"{path_hint}.train.batch_size", "must be >= 1")
    for key in ("alpha", "beta_cc", "beta_fa", "beta_ca"):
        _expect(loss_kw.get(key, 0) >= 0, f"{path_hint}.loss.{key}", "must be >= 0")
    for key in ("tau_kd", "tau_cc"):
        _expect(loss_kw.get(key, 1) > 0, f"{path_hint}.loss.{key}", "must be > 0")
    _expect(pv_kw.get("policy", "preview") in POLICIES, f"{path_hint}.preview.policy",
            f"must be one of {POLICIES}")
    _expect(pv_kw.get("epsilon", 0.05) > 0, f"{path_hint}.preview.epsilon", "must be > 0")
    applies_to = tuple(pv_kw.pop("applies_to", ("kd", "cc")))
    bad = set(applies_to) - set(LOSS_TERM_NAMES)
    _expect(not bad, f"{path_hint}.preview.applies_to",
            f"unknown loss names {sorted(bad)}; known: {list(LOSS_TERM_NAMES)}")

    normalize_contrast = loss_kw.pop("normalize_contrast", True)
    if "lr_milestones" in tr_kw:
        tr_kw["lr_milestones"] = tuple(int(m) for m in tr_kw["lr_milestones"])
    train = TrainConfig(
        loss_weights=LossWeights(**loss_kw),
        scheduler=SchedulerConfig(**pv_kw),
        preview_applies_to=applies_to,
        normalize_contrast=normalize_contrast,
        **tr_kw,
    )
    try:
        train.validate()
    except Exception as err:
        raise ConfigError(f"{path_hint}.train: {err}") from err
    return ExperimentConfig(dataset=dataset, teacher=teacher, student=student,
                            train=train, **top)


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from err
    return parse_experiment_config(raw or {}, path_hint=str(path))


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Re-parse the config dict with dotted-path overrides applied on top."""
    raw = config.to_dict()
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    cfg = parse_experiment_config(raw)
    if os.environ.get(DATA_ROOT_ENV) and "dataset.root" not in overrides:
        cfg.dataset.root = os.environ[DATA_ROOT_ENV]
    return cfg
