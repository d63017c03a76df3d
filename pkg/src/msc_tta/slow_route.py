"""Per-cell slow route: pseudo-labeling, FIFO replay and gated student training."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import CellId, ContractError, Sample, TrainingFault
from .learner import (
    ModelSnapshot,
    OptimizerState,
    TeacherOracle,
    TrainingConfig,
    adam_step,
    loss_and_grad,
    teacher_label,
)


class Mode(str, enum.Enum):
    TTA = "TTA"  # teacher pseudo labels
    OL = "OL"  # ground-truth labels (online-learning upper bound)


class BufferItem(NamedTuple):
    sample: Sample
    labels: np.ndarray
    inserted_at: float


@dataclass(frozen=True)
class ReplayBuffer:
    capacity: int = 100
    items: tuple = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError("buffer capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.items)


def _arrival_key(item) -> tuple:
    # opaque items (no timestamp/agent) keep their pushed order
    sample = getattr(item, "sample", None)
    return (getattr(item, "inserted_at", 0.0), getattr(sample, "agent", 0))


def buffer_push(buf: ReplayBuffer, *items) -> ReplayBuffer:
    """Append items FIFO, evicting the oldest beyond capacity.

    Items pushed together are ordered by (insertion time, agent id), so
    simultaneous arrivals land in ascending agent order.
    """
    ordered = sorted(items, key=_arrival_key)
    merged = buf.items + tuple(ordered)
    return dataclasses.replace(buf, items=merged[-buf.capacity :])


@dataclass(frozen=True)
class CellState:
    cell: CellId
    buffer: ReplayBuffer
    student: ModelSnapshot
    opt: OptimizerState
    has_new_samples: bool = False
    last_trained_at: float | None = None
    last_loss: float | None = None
    last_steps: int = 0

    @classmethod
    def fresh(cls, cell: CellId, init: ModelSnapshot, capacity: int = 100) -> CellState:
        return cls(cell, ReplayBuffer(capacity), init, OptimizerState.zeros_like(init))


def ingest_tick(
    state: CellState,
    arrivals: Sequence[Sample],
    weather,
    teacher: TeacherOracle,
    mode: Mode = Mode.TTA,
) -> CellState:
    """Label every arrival (teacher or ground truth) and push it into the buffer."""
    if not arrivals:
        return state
    items = []
    for sample in arrivals:
        labels = sample.truth.copy() if Mode(mode) is Mode.OL else teacher_label(teacher, sample, weather)
        items.append(BufferItem(sample, labels, sample.time))
    return dataclasses.replace(
        state, buffer=buffer_push(state.buffer, *items), has_new_samples=True
    )


def epoch_batches(items: Sequence, batch_size: int) -> list[list]:
    """Consecutive insertion-order batches; the last one may be partial."""
    return [list(items[i : i + batch_size]) for i in range(0, len(items), batch_size)]


def train_tick(
    state: CellState, cfg: TrainingConfig, now: float | None = None
) -> tuple[CellState, ModelSnapshot | None]:
    """One epoch over the buffer if it received new samples; otherwise a no-op.

    Returns the updated state and the snapshot to broadcast (None when idle).
    """
    if not state.has_new_samples or len(state.buffer) == 0:
        return state, None
    model, opt = state.student, state.opt
    total, weight = 0.0, 0
    try:
        for batch in epoch_batches(state.buffer.items, cfg.batch_size):
            pairs = [(it.sample, it.labels) for it in batch]
            loss, g_W, g_b = loss_and_grad(model, pairs)
            model, opt = adam_step(model, opt, (g_W, g_b), cfg, cell=state.cell)
            total += loss * len(batch)
            weight += len(batch)
    except TrainingFault as exc:
        exc.cell, exc.time = state.cell, now
        raise
    steps = -(-len(state.buffer) // cfg.batch_size)
    model = model.with_version(state.student.version + 1)
    new_state = dataclasses.replace(
        state,
        student=model,
        opt=opt,
        has_new_samples=False,
        last_trained_at=now,
        last_loss=total / weight,
        last_steps=steps,
    )
    return new_state, model
