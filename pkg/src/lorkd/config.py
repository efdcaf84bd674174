"""Run configuration schema.

A config file is JSON with four sections: ``train`` (optimization and
decomposition hyperparameters), ``architecture``, ``tasks`` (one synthetic
task spec each) and ``data``; ``paths`` is optional. Unknown keys are
rejected. Unset hyperparameters resolve to per-mode defaults.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .data import SyntheticTaskSpec
from .errors import ValidationError
from .objectives import CLS_BETA, DEFAULT_TAU, SEG_BETA

MODE_DEFAULTS = {
    "cls": {"beta": CLS_BETA, "learning_rate": 0.05, "optimizer": "sgd_momentum"},
    "seg": {"beta": SEG_BETA, "learning_rate": 1e-4, "optimizer": "adamw"},
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainConfig(_Strict):
    mode: Literal["cls", "seg"]
    task_count: int = Field(ge=1)
    base_rank: int = Field(default=8, ge=2)
    beta: Optional[float] = Field(default=None, ge=0)
    tau: float = Field(default=DEFAULT_TAU, gt=0)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    optimizer: Optional[Literal["sgd_momentum", "adamw"]] = None
    weight_decay: Optional[float] = Field(default=None, ge=0)
    scheduler: Literal["constant", "cosine"] = "cosine"
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    train_steps: int = Field(ge=1)
    teacher_steps: int = Field(default=200, ge=0)
    batch_size: int = Field(ge=1)
    seed: int = 0
    rank_mode: Literal["balanced", "imbalanced"] = "balanced"

    @model_validator(mode="after")
    def _fill_defaults(self):
        d = MODE_DEFAULTS[self.mode]
        if self.beta is None:
            self.beta = d["beta"]
        if self.learning_rate is None:
            self.learning_rate = d["learning_rate"]
        if self.optimizer is None:
            self.optimizer = d["optimizer"]
        if self.warmup_steps is None:
            self.warmup_steps = self.train_steps // 10
        return self


class ArchConfig(_Strict):
    width: int = Field(default=8, ge=4)
    teacher_widths: list[int] = Field(default_factory=lambda: [16, 32, 64, 64])
    in_channels: int = Field(default=1, ge=1)


class TaskConfig(_Strict):
    task_id: int = Field(ge=0)
    kind: Literal["pattern_cls", "shape_seg"]
    num_outputs: int = Field(ge=1)
    family: Optional[str] = None
    image_size: int = 32
    conflict_coupling: float = Field(default=0.0, ge=0, le=1)
    noise: float = Field(default=0.3, ge=0)

    def to_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(**self.model_dump())


class DataConfig(_Strict):
    train_size: int = Field(default=512, ge=1)
    eval_size: int = Field(default=256, ge=1)
    probe_size: int = Field(default=128, ge=2)


class PathsConfig(_Strict):
    output_dir: Optional[str] = None


class RunConfig(_Strict):
    train: TrainConfig
    architecture: ArchConfig = Field(default_factory=ArchConfig)
    tasks: list[TaskConfig]
    data: DataConfig = Field(default_factory=DataConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _check_tasks(self):
        T = self.train.task_count
        if len(self.tasks) != T:
            raise ValueError(f"train.task_count={T} but {len(self.tasks)} tasks are listed")
        if sorted(t.task_id for t in self.tasks) != list(range(T)):
            raise ValueError("task ids must be exactly 0..task_count-1")
        want = "pattern_cls" if self.train.mode == "cls" else "shape_seg"
        for t in self.tasks:
            if t.kind != want:
                raise ValueError(f"task {t.task_id} kind {t.kind} does not match mode {self.train.mode}")
        if len({t.image_size for t in self.tasks}) != 1:
            raise ValueError("all tasks must share one image size")
        self.tasks = sorted(self.tasks, key=lambda t: t.task_id)
        return self

    @property
    def specs(self) -> list[SyntheticTaskSpec]:
        return [t.to_spec() for t in self.tasks]

    @property
    def task_sizes(self) -> list[int]:
        return [t.num_outputs for t in self.tasks]

    def resolved(self) -> dict:
        """Config with defaults filled in, as written into reports."""
        return self.model_dump(mode="json")

    def digest(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def parse_config(obj: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except PydanticError as exc:
        raise ValidationError(f"invalid config: {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    return parse_config(obj)
