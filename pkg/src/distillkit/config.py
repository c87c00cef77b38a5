"""Run configuration: one YAML key tree, parsed into frozen dataclasses.

Every field has a default, and the resolved tree (defaults materialized) is what
gets written into run manifests, so a manifest alone is enough to repeat a run.
Defaults describe the desk-scale toy task.
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from pydantic import TypeAdapter, ValidationError

from .augment import AugmentPolicy
from .datasets import LabeledImageSet, load_image_folder, make_gaussian_class_dataset
from .engine import DistillConfig, OptimizerConfig
from .errors import ConfigError, IngestionError
from .losses import LossWeights
from .models import FAMILIES, PRETRAIN_RECIPE, ExtractorSpec, TrainRecipe

TOY_SHAPE = (3, 16, 16)


@dataclass(frozen=True)
class DataConfig:
    source: str = "gaussian"  # gaussian | folder
    name: str = "toy"
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    image_shape: tuple = TOY_SHAPE
    template_spread: float = 0.5
    noise_sigma: float = 0.3
    template_cells: int | None = 4
    seed: int = 1
    test_noise_seed: int = 99
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.source not in ("gaussian", "folder"):
            raise ConfigError(f"unknown data source {self.source!r}", field="source")
        if self.source == "folder" and not (self.train_path and self.test_path):
            raise ConfigError("folder data needs train_path and test_path", field="train_path")


@dataclass(frozen=True)
class EmbedderConfig:
    spec: ExtractorSpec = ExtractorSpec("resnet18", 3, 16, 8, output="pooled_vector")
    epochs: int = 30
    seed: int = 0
    recipe: TrainRecipe = PRETRAIN_RECIPE


@dataclass(frozen=True)
class EvalConfig:
    arch: ExtractorSpec = ExtractorSpec("convnet", 3, 16, 16)
    repeats: int = 5
    seed: int = 0
    recipe: TrainRecipe = TrainRecipe()
    augment: AugmentPolicy = AugmentPolicy()
    families: tuple = FAMILIES

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1", field="repeats")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigError(f"unknown family {f!r}", field="families")

    def arch_list(self) -> list[ExtractorSpec]:
        return [dataclasses.replace(self.arch, family=f) for f in self.families]


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "beta"
    values: tuple = (0.1, 1.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if self.axis not in ("beta", "lambda_cc", "lambda_cm", "ipc", "iterations"):
            raise ConfigError(f"unknown sweep axis {self.axis!r}", field="axis")
        if not self.values:
            raise ConfigError("sweep values must be nonempty", field="values")


@dataclass(frozen=True)
class ContinualConfig:
    steps: int = 5
    buffer_per_class: int = 10
    methods: tuple = ("distill", "random")
    orders: int = 5
    nets: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            if m not in ("distill", "herding", "random"):
                raise ConfigError(f"unknown continual method {m!r}", field="methods")


@dataclass(frozen=True)
class DiagnoseConfig:
    extractor_seed: int = 12345


def _toy_distill() -> DistillConfig:
    return DistillConfig(
        dataset="toy",
        ipc=10,
        batch_real=16,
        iterations=500,
        optimizer=OptimizerConfig(lr=1.0, momentum=0.5),
        weights=LossWeights(lambda_cc=0.05, lambda_cm=0.01, alpha=0.1, beta=0.1),
        extractor=ExtractorSpec("convnet", 3, 16, 16),
    )


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    distill: DistillConfig = field(default_factory=_toy_distill)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)

    def __post_init__(self):
        if self.distill.dataset != self.data.name:
            raise ConfigError(
                f"distill.dataset={self.distill.dataset!r} but data.name={self.data.name!r}", field="distill.dataset"
            )
        if self.distill.optimizer.lr <= 0:
            raise ConfigError("lr must be > 0 for a distillation run", field="distill.optimizer.lr")


_ADAPTER = TypeAdapter(RunConfig)


def _dataclass_of(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def _unknown_keys(cls, data, path=()):
    if not isinstance(data, dict):
        return
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        where = ".".join(path + (str(key),))
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}", field=where)
        sub = _dataclass_of(hints[key])
        if sub is not None:
            _unknown_keys(sub, value, path + (key,))


def _field_path(err: dict) -> str:
    loc = [str(p) for p in err["loc"]]
    inner = err.get("ctx", {}).get("error")
    leaf = getattr(inner, "field", None)
    if leaf and not loc:
        return leaf
    if leaf:
        leaf = leaf.split(".")[-1]
        if not loc or loc[-1] != leaf:
            loc.append(leaf)
    return ".".join(loc)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_config(tree: dict | None) -> RunConfig:
    """Build a RunConfig from a nested mapping; missing keys take the toy defaults."""
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    _unknown_keys(RunConfig, tree)
    merged = _merge(copy.deepcopy(_DEFAULT_TREE), tree)
    user_distill = tree.get("distill") or {}
    if isinstance(merged["distill"], dict) and isinstance(user_distill, dict) and "dataset" not in user_distill:
        if isinstance(merged["data"], dict):
            merged["distill"]["dataset"] = merged["data"].get("name")
    try:
        return _ADAPTER.validate_python(merged)
    except ValidationError as exc:
        err = exc.errors()[0]
        inner = err.get("ctx", {}).get("error")
        message = str(inner) if inner is not None else err["msg"]
        raise ConfigError(message, field=_field_path(err)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(tree)


def to_tree(config: RunConfig) -> dict:
    """Plain nested dict with every default materialized."""
    return _ADAPTER.dump_python(config, mode="json")


_DEFAULT_TREE = to_tree(RunConfig())


def dump_yaml(config: RunConfig) -> str:
    return yaml.safe_dump(to_tree(config), sort_keys=True)


def load_data(cfg: DataConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    """(train, test) for a data config."""
    if cfg.source == "folder":
        train = load_image_folder(cfg.train_path, cfg.image_shape, name=cfg.name)
        test = load_image_folder(cfg.test_path, cfg.image_shape, name=cfg.name + "-test")
        if train.class_names != test.class_names:
            raise IngestionError(f"train and test class folders differ: {train.class_names} vs {test.class_names}")
        return train, test
    kw = dict(template_cells=cfg.template_cells)
    train = make_gaussian_class_dataset(cfg.classes, cfg.per_class, cfg.image_shape, cfg.template_spread,
                                        cfg.noise_sigma, cfg.seed, name=cfg.name, **kw)
    test = make_gaussian_class_dataset(cfg.classes, cfg.test_per_class, cfg.image_shape, cfg.template_spread,
                                       cfg.noise_sigma, cfg.seed, noise_seed=cfg.test_noise_seed,
                                       name=cfg.name + "-test", **kw)
    return train, test
