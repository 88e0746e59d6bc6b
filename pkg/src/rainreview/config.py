"""Run configuration: one YAML (or JSON) file drives synthesis and training.

Example::

    preset: tiny
    seed: 0
    out_dir: runs/desk
    ablation: full
    data:
      frames: 10
      height: 48
      width: 48
      train_clips: 2
      eval_clips: 1
    tasks:
      - task_id: A
        angle_deg_range: [-5, 5]
        width_px_range: [1, 1]
      - task_id: B
        angle_deg_range: [40, 50]
        width_px_range: [3, 3]
    train:
      epochs: 20
      crop_size: 32
    weights:
      sigma1: 1.1
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import RainTaskSpec
from .losses import LossWeights
from .nets import PRESETS
from .train import ABLATIONS, Ablation, StageConfig
from .validation import ValidationError, check_positive_int

OUT_ENV = "RAINREVIEW_OUT"

PRESET_TRAIN = {
    "tiny": {"epochs": 20, "crop_size": 32},
    "paper": {"epochs": 160, "crop_size": 240},
}

_TRAIN_KEYS = {"epochs", "learning_rate", "betas", "eps", "batch_size", "crop_size", "grad_clip", "steps_per_epoch"}


@dataclass
class DataConfig:
    frames: int = 10
    height: int = 48
    width: int = 48
    train_clips: int = 2
    eval_clips: int = 1
    # directories of clean PNG frames to rain on instead of procedural clips
    clean_dirs: list = field(default_factory=list)
    clean_seed: int = 0

    def __post_init__(self):
        check_positive_int("data.frames", self.frames, 5)
        check_positive_int("data.height", self.height, 16)
        check_positive_int("data.width", self.width, 16)
        check_positive_int("data.train_clips", self.train_clips)
        check_positive_int("data.eval_clips", self.eval_clips, 0)


@dataclass
class TaskEntry:
    spec: RainTaskSpec | None
    task_id: str
    # pre-existing dataset; synthesis is skipped for this task
    manifest: str | None = None


@dataclass
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    out_dir: str = ""
    ablation: str = "full"
    data: DataConfig = field(default_factory=DataConfig)
    tasks: list = field(default_factory=list)
    train: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    source: str = ""

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        Ablation.named(self.ablation)
        if not self.tasks:
            raise ValidationError("config must list at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"task ids must be unique, got {ids}")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ValidationError(f"unknown train keys: {sorted(unknown)}")
        if not self.out_dir:
            self.out_dir = os.environ.get(OUT_ENV, "runs")
        self.stage_template()  # validates train values

    @property
    def ablation_flags(self) -> Ablation:
        return ABLATIONS[self.ablation]

    @property
    def data_root(self) -> Path:
        return Path(self.out_dir) / "data"

    def manifest_path(self, task: TaskEntry) -> Path:
        if task.manifest:
            p = Path(task.manifest)
            if not p.is_absolute() and self.source:
                p = Path(self.source).parent / p
            return p
        return self.data_root / task.task_id / "manifest.json"

    def stage_template(self) -> StageConfig:
        kw = dict(PRESET_TRAIN[self.preset])
        kw.update(self.train)
        return StageConfig(stage_index=1, seed=self.seed, weights=self.weights, **kw)

    def stage_configs(self) -> list[StageConfig]:
        t = self.stage_template()
        return [dataclasses.replace(t, stage_index=j, task_id=task.task_id) for j, task in enumerate(self.tasks, 1)]

    def with_overrides(self, preset=None, seed=None, ablation=None, out_dir=None) -> "RunConfig":
        changes = {k: v for k, v in (("preset", preset), ("seed", seed), ("ablation", ablation), ("out_dir", out_dir))
                   if v is not None}
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        d = {
            "preset": self.preset, "seed": self.seed, "ablation": self.ablation,
            "data": dataclasses.asdict(self.data),
            "tasks": [t.spec.to_dict() if t.spec else {"task_id": t.task_id, "manifest": t.manifest} for t in self.tasks],
            "train": self.train, "weights": dataclasses.asdict(self.weights),
        }
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _strict(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


def parse_config(raw: dict, source: str = "") -> RunConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a mapping")
    allowed = {"preset", "seed", "out_dir", "ablation", "data", "tasks", "train", "weights"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    tasks = []
    for i, t in enumerate(raw.get("tasks") or []):
        if not isinstance(t, dict) or "task_id" not in t:
            raise ValidationError(f"tasks[{i}] must be a mapping with a task_id")
        t = dict(t)
        manifest = t.pop("manifest", None)
        if manifest is not None:
            if set(t) != {"task_id"}:
                raise ValidationError(f"tasks[{i}] with a manifest takes no rain parameters")
            tasks.append(TaskEntry(None, t["task_id"], str(manifest)))
        else:
            tasks.append(TaskEntry(RainTaskSpec.from_dict(t), t["task_id"]))
    train = raw.get("train") or {}
    if not isinstance(train, dict):
        raise ValidationError("train must be a mapping")
    return RunConfig(
        preset=raw.get("preset", "tiny"),
        seed=raw.get("seed", 0),
        out_dir=str(raw.get("out_dir", "") or ""),
        ablation=raw.get("ablation", "full"),
        data=_strict(DataConfig, raw.get("data"), "data"),
        tasks=tasks,
        train=dict(train),
        weights=_strict(LossWeights, raw.get("weights"), "weights"),
        source=source,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ValidationError(f"cannot parse {path}: {e}") from e
    return parse_config(raw, str(path))


def desk_task_specs() -> list[RainTaskSpec]:
    """The two-task desk setup: near-vertical thin streaks, then 45 degree thick ones."""
    return [
        RainTaskSpec("A", angle_deg_range=(-5.0, 5.0), length_px_range=(6, 12), width_px_range=(1, 1),
                     density=25.0, intensity_range=(0.3, 0.6), drift_px_per_frame=3.0, seed=1),
        RainTaskSpec("B", angle_deg_range=(40.0, 50.0), length_px_range=(8, 16), width_px_range=(3, 3),
                     density=12.0, intensity_range=(0.3, 0.6), drift_px_per_frame=3.0, seed=2),
    ]
