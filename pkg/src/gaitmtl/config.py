"""Run configuration: one JSON document, strict keys, command-line flags layered on top."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import InvalidConfig
from .pipeline import AUGMENT_DURATIONS
from .synthgait import CADENCES, TERRAINS, DatasetConfig, TrialCondition, default_grid
from .trainer import TABLE_III


@dataclass(frozen=True)
class DataSection:
    """Synthetic dataset used by train-gpr, train-tc and compare."""

    trial_duration: float = 30.0  # seconds per trial
    strides_per_trial: int = 24  # > 0: trial length set by stride count instead of trial_duration
    grid_seed: int = 0
    terrains: tuple[str, ...] = TERRAINS
    cadences: tuple[float, ...] = CADENCES
    durations: tuple[float, ...] = AUGMENT_DURATIONS
    gpr_stride: int = 15
    tc_stride: int = 2
    smooth_len: int = 5
    fsr_threshold: float = 0.5

    def conditions(self) -> list[TrialCondition]:
        grid = default_grid(self.trial_duration, self.grid_seed, self.terrains, self.cadences)
        if self.strides_per_trial > 0:
            # a little over n strides so the last labeled cycle closes inside the trial
            grid = [replace(c, duration=round((self.strides_per_trial + 1) * c.stride_period, 6)) for c in grid]
        return grid

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(durations=tuple(self.durations), gpr_stride=self.gpr_stride,
                             tc_stride=self.tc_stride, smooth_len=self.smooth_len,
                             fsr_threshold=self.fsr_threshold)


@dataclass(frozen=True)
class TrainSection:
    lr: float
    batch_size: int
    epochs: int


def _train_default(task: str) -> TrainSection:
    t = TABLE_III[task]
    return TrainSection(t["lr"], t["batch_size"], t["epochs"])


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: DataSection = field(default_factory=DataSection)
    gpr: TrainSection = field(default_factory=lambda: _train_default("gpr"))
    tc: TrainSection = field(default_factory=lambda: _train_default("tc"))
    gpr_output_activation: str = "identity"
    cycles_per_terrain: int = 5

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def train_overrides(self, task: str) -> dict:
        """Only the values that differ from the task defaults."""
        sec = getattr(self, task)
        base = TABLE_III[task]
        return {k: v for k, v in asdict(sec).items() if v != base[k]}


_SECTIONS = {"data": DataSection, "gpr": TrainSection, "tc": TrainSection}
_TUPLES = {"seeds", "terrains", "cadences", "durations"}


def _merge(cls, base, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidConfig(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    upd = {}
    for k, v in values.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise InvalidConfig(f"{where}.{k} must be an object")
            upd[k] = _merge(_SECTIONS[k], getattr(base, k), v, f"{where}.{k}")
        elif k in _TUPLES:
            if not isinstance(v, list):
                raise InvalidConfig(f"{where}.{k} must be a list")
            upd[k] = tuple(v)
        else:
            upd[k] = v
    return replace(base, **upd)


def from_dict(values: dict, base: RunConfig | None = None) -> RunConfig:
    if not isinstance(values, dict):
        raise InvalidConfig("config must be a JSON object")
    cfg = _merge(RunConfig, base or RunConfig(), values, "config")
    validate(cfg)
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(values)


def validate(cfg: RunConfig) -> None:
    if cfg.gpr_output_activation not in ("identity", "relu"):
        raise InvalidConfig("gpr_output_activation must be identity or relu")
    if not cfg.seeds:
        raise InvalidConfig("seeds must not be empty")
    for name in ("gpr", "tc"):
        sec = getattr(cfg, name)
        if sec.lr < 0 or sec.batch_size < 2 or sec.epochs < 0:
            raise InvalidConfig(f"{name}: need lr >= 0, batch_size >= 2, epochs >= 0")
    d = cfg.data
    if set(d.terrains) - set(TERRAINS):
        raise InvalidConfig(f"terrains must be drawn from {TERRAINS}")
    if d.trial_duration <= 0 or d.gpr_stride < 1 or d.tc_stride < 1 or cfg.cycles_per_terrain < 1:
        raise InvalidConfig("trial_duration > 0, strides >= 1 and cycles_per_terrain >= 1 required")
