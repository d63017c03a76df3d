"""Cell partitions of the environment and the three pretraining regimes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core import TAG_SPLIT, CellId, ConfigError, Sample, hash_unit, keyed_rng
from .learner import ModelSnapshot, OptimizerState, TrainingConfig, adam_step, loss_and_grad
from .slow_route import epoch_batches
from .world import WorldState, sample_at, weather_at, zone_of


class PartitionKind(str, enum.Enum):
    BASELINE = "Baseline"
    COMMON = "Common"
    SPATIAL = "Spatial"
    WEATHER = "Weather"
    DAYLIGHT = "Daylight"
    SPECIFIC = "Specific"


class PretrainMode(str, enum.Enum):
    SCRATCH = "Scratch"
    GENERAL = "General"
    CELL = "Cell"


class Context(NamedTuple):
    agent: int
    zone: int
    weather: int  # dominant weather kind
    daylight: int


@dataclass(frozen=True)
class CellPartition:
    kind: PartitionKind
    n_agents: int = 12
    n_zones: int = 7

    def __post_init__(self):
        object.__setattr__(self, "kind", PartitionKind(self.kind))

    @property
    def n_cells(self) -> int:
        return {
            PartitionKind.BASELINE: self.n_agents,
            PartitionKind.COMMON: 1,
            PartitionKind.SPATIAL: self.n_zones,
            PartitionKind.WEATHER: 3,
            PartitionKind.DAYLIGHT: 2,
            PartitionKind.SPECIFIC: self.n_zones * 3 * 2,
        }[self.kind]

    @classmethod
    def for_world(cls, kind, world: WorldState) -> CellPartition:
        return cls(PartitionKind(kind), world.config.n_agents, world.config.n_zones)


def cell_of(partition: CellPartition, context: Context) -> CellId:
    kind = partition.kind
    if kind is PartitionKind.BASELINE:
        return context.agent
    if kind is PartitionKind.COMMON:
        return 0
    if kind is PartitionKind.SPATIAL:
        return context.zone
    if kind is PartitionKind.WEATHER:
        return context.weather
    if kind is PartitionKind.DAYLIGHT:
        return context.daylight
    return context.zone * 6 + context.weather * 2 + context.daylight


@dataclass(frozen=True)
class PretrainSpec:
    mode: PretrainMode = PretrainMode.SCRATCH
    split: float = 0.9
    general_epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PretrainMode(self.mode))
        if not 0 < self.split < 1:
            raise ConfigError("split must lie in (0, 1)")
        if self.general_epochs < 1:
            raise ConfigError("general_epochs must be >= 1")


@dataclass
class PretrainingSets:
    train: dict[CellId, list[tuple[Sample, np.ndarray]]] = field(default_factory=dict)
    val: dict[CellId, list[tuple[Sample, np.ndarray]]] = field(default_factory=dict)

    def count(self, cell: CellId) -> int:
        return len(self.train.get(cell, ())) + len(self.val.get(cell, ()))

    @property
    def total(self) -> int:
        return sum(map(len, self.train.values())) + sum(map(len, self.val.values()))

    def pooled_train(self) -> list[tuple[Sample, np.ndarray]]:
        items = [it for v in self.train.values() for it in v]
        return sorted(items, key=lambda it: (it[0].time, it[0].agent))

    def pooled_val(self) -> list[tuple[Sample, np.ndarray]]:
        items = [it for v in self.val.values() for it in v]
        return sorted(items, key=lambda it: (it[0].time, it[0].agent))


def context_at(world: WorldState, agent: int, t: float, weather=None) -> Context:
    weather = weather if weather is not None else weather_at(world, t)
    return Context(agent, zone_of(world, agent, t), weather.kind, weather.daylight)


def build_pretraining_set(
    world: WorldState,
    partition: CellPartition,
    duration: float,
    f_D: float = 1.0,
    split: float = 0.9,
) -> PretrainingSets:
    """Ground-truth labeled stream samples over [0, duration), bucketed by cell.

    Each sample goes to train or validation by a stable hash of
    (seed, agent, time), so the split never changes between runs.
    """
    if duration > world.config.horizon:
        raise ConfigError("pretraining duration exceeds the world horizon")
    sets = PretrainingSets()
    seed = world.config.seed
    n_ticks = math.ceil(duration * f_D - 1e-9)
    for i in range(n_ticks):
        t = i / f_D
        weather = weather_at(world, t)
        for agent in world.active_agents(t):
            sample = sample_at(world, agent, t, weather=weather)
            cell = cell_of(partition, context_at(world, agent, t, weather))
            bucket = sets.train if hash_unit(seed, TAG_SPLIT, agent, int(round(t * 1000))) < split else sets.val
            bucket.setdefault(cell, []).append((sample, sample.truth))
    return sets


def validation_loss(model: ModelSnapshot, items: Sequence) -> float:
    return loss_and_grad(model, items)[0]


def fit_epochs(
    model: ModelSnapshot,
    train: Sequence,
    cfg: TrainingConfig,
    epochs: int,
    val: Sequence = (),
    shuffle_seed: int | None = None,
) -> tuple[ModelSnapshot, int, int]:
    """Train ``epochs`` passes with train_tick batching; keep the best-validation epoch.

    Returns (selected model, optimizer steps taken, selected epoch index).
    Without validation data the last epoch is kept.
    """
    opt = OptimizerState.zeros_like(model)
    best, best_loss, best_epoch, steps = model, math.inf, 0, 0
    train = list(train)
    for epoch in range(1, epochs + 1):
        order = train
        if shuffle_seed is not None:
            perm = keyed_rng(shuffle_seed, TAG_SPLIT, epoch).permutation(len(train))
            order = [train[i] for i in perm]
        for batch in epoch_batches(order, cfg.batch_size):
            _, g_W, g_b = loss_and_grad(model, batch)
            model, opt = adam_step(model, opt, (g_W, g_b), cfg)
            steps += 1
        if val:
            loss = validation_loss(model, val)
            if loss < best_loss:
                best, best_loss, best_epoch = model, loss, epoch
        else:
            best, best_epoch = model, epoch
    return best.with_version(0), steps, best_epoch


def cell_epochs(general_epochs: int, n_total: int, n_cells: int, n_cell: int) -> int:
    """Per-cell epochs giving each nonempty cell an equal share of the backward passes."""
    return max(1, math.floor(general_epochs * n_total / (n_cells * n_cell) + 0.5))


def pretrain(
    spec: PretrainSpec,
    sets: PretrainingSets,
    cfg: TrainingConfig,
    partition: CellPartition,
    n_classes: int,
    dim: int,
) -> dict[CellId, ModelSnapshot]:
    zero = ModelSnapshot.zeros(n_classes, dim)
    cells = range(partition.n_cells)
    if spec.mode is PretrainMode.SCRATCH:
        return {c: zero for c in cells}

    pooled = sets.pooled_train()
    if not pooled:
        raise ConfigError(f"{spec.mode.value} pretraining needs a nonempty training set")

    def general() -> ModelSnapshot:
        model, _, _ = fit_epochs(
            zero, pooled, cfg, spec.general_epochs, sets.pooled_val(), shuffle_seed=spec.seed
        )
        return model

    if spec.mode is PretrainMode.GENERAL:
        model = general()
        return {c: model for c in cells}

    nonempty = sorted(c for c, v in sets.train.items() if v)
    n_total = sum(len(sets.train[c]) for c in nonempty)
    out: dict[CellId, ModelSnapshot] = {}
    for c in nonempty:
        epochs = cell_epochs(spec.general_epochs, n_total, len(nonempty), len(sets.train[c]))
        out[c], _, _ = fit_epochs(
            zero, sets.train[c], cfg, epochs, sets.val.get(c, ()), shuffle_seed=spec.seed * 1009 + c
        )
    missing = [c for c in cells if c not in out]
    if missing:
        fallback = general()
        for c in missing:
            out[c] = fallback
    return out
