"""Per-agent real-time inference with instant model switching."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .core import AgentId, CellId, Sample
from .learner import ModelSnapshot, predict
from .scenarios import CellPartition, Context, cell_of


@dataclass(frozen=True)
class AgentState:
    agent: AgentId
    current_cell: CellId | None = None
    model: ModelSnapshot | None = None
    last_prediction_at: float | None = None
    switched: bool = False  # the cell changed at the last tick


def agent_tick(
    state: AgentState,
    sample: Sample,
    context: Context,
    partition: CellPartition,
    cell_models: Mapping[CellId, ModelSnapshot],
    fallback: Callable[[CellId], ModelSnapshot] | None = None,
) -> tuple[AgentState, np.ndarray]:
    """Predict ``sample`` with the model of the agent's current cell.

    A cell change swaps the model before inference, so the transition tick
    already uses the new cell's weights. Cells that never published a model
    use ``fallback(cell)`` (their pretrained initialization).
    """
    cell = cell_of(partition, context)
    switched = state.current_cell is not None and cell != state.current_cell
    model = cell_models.get(cell)
    if model is None:
        if fallback is None:
            raise KeyError(f"no model for cell {cell} and no fallback")
        model = fallback(cell)
    new_state = dataclasses.replace(
        state, current_cell=cell, model=model, last_prediction_at=sample.time, switched=switched
    )
    return new_state, predict(model, sample)
