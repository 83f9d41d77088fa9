"""Experiment configuration: one YAML file per experiment, round-trippable."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .imp import ImpConfig
from .model import HEAD_KINDS, ModelConfig
from .trainer import TrainerConfig

MODES = ("single", "hard", "hierarchical", "sparse")
ENV_OUTPUT_DIR = "SPARSE_SHARING_OUTPUT_DIR"
ENV_SEED = "SPARSE_SHARING_SEED"


@dataclass
class TaskSpec:
    """Where a task's data comes from.

    ``source: conll`` reads ``train``/``dev``/``test`` files.  ``source:
    pattern`` takes one side (``which: a`` or ``b``) of the synthetic pattern
    pair built from ``generator`` arguments.  ``source: position`` relabels
    the splits of the task named in ``base`` with token positions.
    """

    name: str
    source: str = "conll"
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    token_column: int = 0
    label_column: int = -1
    scheme: str | None = None
    target_scheme: str | None = None
    metric: str | None = None
    head: str = "softmax"
    which: str = "a"
    base: str | None = None
    max_position: int = 63
    generator: dict[str, Any] = field(default_factory=dict)

    def validate(self, root: Path | None = None) -> None:
        if self.source not in ("conll", "pattern", "position"):
            raise ConfigError(f"task {self.name!r}: unknown source {self.source!r}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"task {self.name!r}: unknown head {self.head!r}")
        if self.metric is not None and self.metric not in ("accuracy", "span_f1"):
            raise ConfigError(f"task {self.name!r}: unknown metric {self.metric!r}")
        if self.source == "conll":
            if self.train is None:
                raise ConfigError(f"task {self.name!r}: conll tasks need a train path")
            for split in ("train", "dev", "test"):
                path = getattr(self, split)
                if path is not None and not resolve(path, root).exists():
                    raise ConfigError(f"task {self.name!r}: {split} file {path} does not exist")
        elif self.source == "pattern":
            if self.which not in ("a", "b"):
                raise ConfigError(f"task {self.name!r}: 'which' must be 'a' or 'b'")
        elif self.base is None:
            raise ConfigError(f"task {self.name!r}: position tasks need a base task")
        elif self.max_position < 1:
            raise ConfigError(f"task {self.name!r}: max_position must be >= 1")


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    mode: str = "sparse"
    seed: int = 0
    output_dir: str = "runs/experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    imp: ImpConfig = field(default_factory=ImpConfig)
    hierarchy: dict[str, int] = field(default_factory=dict)
    min_count: int = 1
    word_vectors: str | None = None

    def validate(self, root: Path | None = None) -> None:
        if not self.tasks:
            raise ConfigError("no tasks configured")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique")
        if self.mode not in MODES:
            raise ConfigError(f"unknown sharing mode {self.mode!r}; choose from {', '.join(MODES)}")
        for spec in self.tasks:
            spec.validate(root)
            if spec.source == "position" and spec.base not in names:
                raise ConfigError(f"task {spec.name!r}: base task {spec.base!r} is not configured")
        if self.mode == "hierarchical":
            missing = set(names) - set(self.hierarchy)
            if missing:
                raise ConfigError(f"hierarchical mode needs a layer for every task; missing {sorted(missing)}")
            for task, layer in self.hierarchy.items():
                if not 1 <= layer <= self.model.layers:
                    raise ConfigError(f"task {task!r} attached to layer {layer}, encoder has {self.model.layers}")
        if self.word_vectors is not None and not resolve(self.word_vectors, root).exists():
            raise ConfigError(f"word vector file {self.word_vectors} does not exist")
        # vocabulary sizes come from the data, so check the rest with placeholders
        dataclasses.replace(self.model, vocab_size=1, char_vocab_size=1).validate()
        self.trainer.validate()
        if self.mode == "sparse":
            self.imp.validate()

    def sync_seeds(self) -> None:
        """Every component draws from the experiment seed."""
        self.trainer.seed = self.seed
        self.imp.seed = self.seed

    def to_dict(self) -> dict:
        out = asdict(self)
        # sizes are derived from the data at init time, not configured
        out["model"].pop("vocab_size")
        out["model"].pop("char_vocab_size")
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")


def resolve(path: str, root: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or root is None else root / p


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = dict(data)
    tasks = data.pop("tasks", None)
    if not isinstance(tasks, list):
        raise ConfigError("config needs a list of tasks")
    specs = [_build(TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(tasks)]
    sub = {
        "model": _build(ModelConfig, data.pop("model", None), "model"),
        "trainer": _build(TrainerConfig, data.pop("trainer", None), "trainer"),
        "imp": _build(ImpConfig, data.pop("imp", None), "imp"),
    }
    cfg = _build(ExperimentConfig, {**data, "tasks": specs}, "config")
    for k, v in sub.items():
        setattr(cfg, k, v)
    cfg.sync_seeds()
    return cfg


def load_config(path: str | Path, *, seed: int | None = None, output_dir: str | None = None, mode: str | None = None) -> ExperimentConfig:
    """Parse and validate a config file.

    Precedence for seed and output directory: explicit argument, then the
    environment variable, then the file.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(data)
    apply_overrides(cfg, seed=seed, output_dir=output_dir, mode=mode)
    cfg.validate(path.parent)
    # pin data paths so the ledger's config echo works from any directory
    for spec in cfg.tasks:
        for split in ("train", "dev", "test"):
            if getattr(spec, split) is not None:
                setattr(spec, split, str(resolve(getattr(spec, split), path.parent).resolve()))
    if cfg.word_vectors is not None:
        cfg.word_vectors = str(resolve(cfg.word_vectors, path.parent).resolve())
    return cfg


def apply_overrides(cfg: ExperimentConfig, *, seed=None, output_dir=None, mode=None) -> None:
    env_seed = os.environ.get(ENV_SEED)
    if seed is None and env_seed:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{ENV_SEED}={env_seed!r} is not an integer") from None
    if seed is not None:
        cfg.seed = int(seed)
    output_dir = output_dir or os.environ.get(ENV_OUTPUT_DIR) or None
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    if mode is not None:
        cfg.mode = mode
    cfg.sync_seeds()
