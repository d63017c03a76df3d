"""Deterministic tick engine driving world sampling, both routes and logging.

Per test tick: (1) weather advances, (2) active agents observe and resolve
their cell, (3) fast-route predictions are logged, (4) on teacher ticks the
cells ingest the agents' current samples, (5) on student ticks the cells
train and broadcast. Frozen runs skip (4) and (5).
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .core import ConfigError, RateConfig, TrainingFault, cm_update, empty_cm, hash_unit
from .evaluation import RunSummary, future_series, imminent_series, summarize
from .fast_route import AgentState, agent_tick
from .learner import ModelSnapshot, TeacherOracle, TrainingConfig, predict
from .runlog import SCHEMA_VERSION, RunLog
from .scenarios import (
    CellPartition,
    Context,
    PartitionKind,
    PretrainMode,
    PretrainSpec,
    build_pretraining_set,
    pretrain,
)
from .slow_route import CellState, Mode, ingest_tick, train_tick
from .world import WorldConfig, WorldState, build_world, sample_at, weather_at


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    partition: PartitionKind = PartitionKind.SPATIAL
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    rates: RateConfig = field(default_factory=RateConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    mode: Mode = Mode.TTA
    adapt: bool = True
    teacher: TeacherOracle = field(default_factory=TeacherOracle)
    pretrain_duration: float = 2 * 3600.0
    test_duration: float = 3 * 3600.0
    buffer_capacity: int = 100
    future_delay: float = 300.0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "partition", PartitionKind(self.partition))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.pretrain_duration < 0 or self.test_duration <= 0:
            raise ConfigError("durations must be positive")
        if self.pretrain_duration + self.test_duration > self.world.horizon + 1e-9:
            raise ConfigError("pretrain_duration + test_duration exceeds the world horizon")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        if self.training.batch_size > self.buffer_capacity:
            raise ConfigError("batch size must not exceed the buffer capacity")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.future_delay < 0:
            raise ConfigError("future_delay must be non-negative")
        for name, value in (("pretrain_duration", self.pretrain_duration), ("test_duration", self.test_duration)):
            if not math.isclose(value * self.rates.f_D, round(value * self.rates.f_D), abs_tol=1e-6):
                raise ConfigError(f"{name} must lie on the stream tick grid")

    @property
    def test_start(self) -> float:
        return self.pretrain_duration

    @property
    def test_end(self) -> float:
        return self.pretrain_duration + self.test_duration

    def scaled(self, horizon: float) -> RunConfig:
        """Rescale the world schedule and both phases to a shorter horizon."""
        k = horizon / self.world.horizon
        pre = round(self.pretrain_duration * k * self.rates.f_D) / self.rates.f_D
        test = round(self.test_duration * k * self.rates.f_D) / self.rates.f_D
        return dataclasses.replace(
            self, world=self.world.scaled(horizon), pretrain_duration=pre, test_duration=test
        )

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, world=dataclasses.replace(self.world, seed=seed))


@dataclass
class RunArtifacts:
    log: RunLog
    summary: RunSummary | None
    checkpoints: dict[str, ModelSnapshot]
    pretrain_counts: dict[int, int]

    @property
    def records(self) -> list[dict[str, Any]]:
        return self.log.records


def derived_key(seed: int, key: int, salt: int) -> int:
    return int(hash_unit(seed, key, salt) * (1 << 53))


def _flat(cm: np.ndarray) -> list[int]:
    return [int(v) for v in cm.ravel()]


class _History:
    """Broadcast history per cell, for stale-model (future) scoring."""

    def __init__(self, init: dict[int, ModelSnapshot]):
        self._init = init
        self._times: dict[int, list[float]] = {}
        self._models: dict[int, list[ModelSnapshot]] = {}

    def add(self, cell: int, t: float, model: ModelSnapshot) -> None:
        self._times.setdefault(cell, []).append(t)
        self._models.setdefault(cell, []).append(model)

    def held(self, cell: int, s: float) -> ModelSnapshot:
        times = self._times.get(cell, [])
        i = int(np.searchsorted(times, s, side="left"))
        return self._models[cell][i - 1] if i > 0 else self._init[cell]


def pretrained_models(
    cfg: RunConfig, world: WorldState, partition: CellPartition
) -> tuple[dict[int, ModelSnapshot], dict[int, int]]:
    wc = world.config
    spec = dataclasses.replace(cfg.pretrain, seed=derived_key(wc.seed, cfg.pretrain.seed, 11))
    if spec.mode is PretrainMode.SCRATCH:
        return pretrain(spec, None, cfg.training, partition, wc.n_classes, wc.dim), {}
    sets = build_pretraining_set(world, partition, cfg.pretrain_duration, cfg.rates.f_D, spec.split)
    counts = {c: sets.count(c) for c in range(partition.n_cells)}
    return pretrain(spec, sets, cfg.training, partition, wc.n_classes, wc.dim), counts


def run(
    cfg: RunConfig,
    world: WorldState | None = None,
    pretrained: tuple[dict[int, ModelSnapshot], dict[int, int]] | None = None,
    config_hash: str = "",
) -> RunArtifacts:
    """Execute one full run; the result is a pure function of ``cfg``."""
    world = world if world is not None else build_world(cfg.world)
    if world.config != cfg.world:
        raise ConfigError("world was built from a different WorldConfig")
    wc = world.config
    partition = CellPartition(cfg.partition, wc.n_agents, wc.n_zones)
    init, counts = pretrained if pretrained is not None else pretrained_models(cfg, world, partition)
    teacher = dataclasses.replace(
        cfg.teacher, key=derived_key(wc.seed, cfg.teacher.key, 7), n_classes=wc.n_classes
    )
    rates = cfg.rates
    f_d = rates.f_D
    s_t, s_s = rates.teacher_stride, rates.student_stride
    i0 = int(round(cfg.test_start * f_d))
    i1 = int(round(cfg.test_end * f_d))
    c = wc.n_classes

    header = {
        "schema": SCHEMA_VERSION,
        "config_hash": config_hash,
        "seed": wc.seed,
        "n_classes": c,
        "n_agents": wc.n_agents,
        "n_zones": wc.n_zones,
        "partition": partition.kind.value,
        "pretrain": cfg.pretrain.mode.value,
        "mode": cfg.mode.value,
        "adapt": cfg.adapt,
        "f_D": f_d,
        "f_T": rates.f_T,
        "f_S": rates.f_S,
        "test_start": cfg.test_start,
        "test_end": cfg.test_end,
        "future_delay": cfg.future_delay,
        "pretrain_counts": {str(k): v for k, v in sorted(counts.items())},
    }
    records: list[dict[str, Any]] = []
    cell_models: dict[int, ModelSnapshot] = {}
    cells: dict[int, CellState] = {}
    agents: dict[int, AgentState] = {}
    history = _History(init)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def fmap(fn, items):
        return list(pool.map(fn, items)) if pool is not None else [fn(x) for x in items]

    def fallback(cell: int) -> ModelSnapshot:
        return init[cell]

    try:
        for i in range(i0, i1):
            t = i / f_d
            weather = weather_at(world, t)
            active = world.active_agents(t)

            def observe(agent: int):
                sample = sample_at(world, agent, t, weather=weather)
                sched = world.schedules[agent]
                zone = int(sched.seg_zones[sched.zone_index(t)])
                ctx = Context(agent, zone, weather.kind, weather.daylight)
                state = agents.get(agent, AgentState(agent))
                state, labels = agent_tick(state, sample, ctx, partition, cell_models, fallback)
                cm = cm_update(empty_cm(c), labels, sample.truth)
                rec = {
                    "k": "predict", "t": t, "agent": agent, "cell": state.current_cell,
                    "ver": state.model.version, "zone": zone, "wk": weather.kind,
                    "dl": weather.daylight, "cm": _flat(cm),
                }
                if t - cfg.future_delay >= cfg.test_start - 1e-9:
                    stale = history.held(state.current_cell, t - cfg.future_delay)
                    rec["fver"] = stale.version
                    if stale.version != state.model.version:
                        rec["fcm"] = _flat(cm_update(empty_cm(c), predict(stale, sample), sample.truth))
                return agent, state, sample, rec

            observed = fmap(observe, active)
            for agent, state, _, rec in observed:
                prev = agents.get(agent)
                if state.switched and prev is not None:
                    records.append({"k": "transition", "t": t, "agent": agent,
                                    "from": prev.current_cell, "to": state.current_cell})
                agents[agent] = state
            records.extend(rec for _, _, _, rec in observed)

            if not cfg.adapt:
                continue
            if i % s_t == 0 and observed:
                arrivals: dict[int, list] = {}
                for agent, state, sample, _ in observed:
                    arrivals.setdefault(state.current_cell, []).append(sample)
                order = sorted(arrivals)
                for cell in order:
                    if cell not in cells:
                        cells[cell] = CellState.fresh(cell, init[cell], cfg.buffer_capacity)
                new_states = fmap(
                    lambda cell: ingest_tick(cells[cell], arrivals[cell], weather, teacher, cfg.mode), order
                )
                for cell, st in zip(order, new_states):
                    cells[cell] = st
                    records.append({"k": "ingest", "t": t, "cell": cell,
                                    "agents": [s.agent for s in arrivals[cell]], "buf": len(st.buffer)})
            if i % s_s == 0 and cells:
                order = sorted(cells)
                results = fmap(lambda cell: train_tick(cells[cell], cfg.training, now=t), order)
                broadcasts = []
                for cell, (st, snap) in zip(order, results):
                    cells[cell] = st
                    if snap is None:
                        continue
                    records.append({"k": "train", "t": t, "cell": cell, "buf": len(st.buffer),
                                    "steps": st.last_steps, "loss": st.last_loss})
                    broadcasts.append((cell, snap))
                # delivered atomically after every cell has trained
                for cell, snap in broadcasts:
                    cell_models[cell] = snap
                    history.add(cell, t, snap)
                    records.append({"k": "broadcast", "t": t, "cell": cell, "ver": snap.version})
    except TrainingFault as exc:
        if exc.time is None:
            exc.time = t
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    run_log = RunLog(header, records)
    checkpoints = {
        f"pretrain_{cfg.pretrain.mode.value}_{partition.kind.value}_{cell}": snap
        for cell, snap in sorted(init.items())
    }
    summary = summarize_log(run_log)
    return RunArtifacts(run_log, summary, checkpoints, counts)


def summarize_log(run_log: RunLog) -> RunSummary | None:
    if not run_log.of_kind("predict"):
        return None
    h = run_log.header
    imm = imminent_series(run_log)
    fut = future_series(run_log, delay=h["future_delay"])
    try:
        return summarize(imm, fut, h["test_start"], h["test_end"])
    except ArithmeticError:
        return None


class SharedInputs:
    """Cache of worlds and pretrained models reused across a grid of runs."""

    def __init__(self):
        self._worlds: dict[WorldConfig, WorldState] = {}
        self._pretrained: dict[tuple, tuple] = {}

    def world(self, cfg: RunConfig) -> WorldState:
        if cfg.world not in self._worlds:
            self._worlds[cfg.world] = build_world(cfg.world)
        return self._worlds[cfg.world]

    def pretrained(self, cfg: RunConfig) -> tuple[dict[int, ModelSnapshot], dict[int, int]]:
        key = (cfg.world, cfg.partition, cfg.pretrain, cfg.training, cfg.rates.f_D, cfg.pretrain_duration)
        if key not in self._pretrained:
            world = self.world(cfg)
            partition = CellPartition(cfg.partition, world.config.n_agents, world.config.n_zones)
            self._pretrained[key] = pretrained_models(cfg, world, partition)
        return self._pretrained[key]

    def run(self, cfg: RunConfig, config_hash: str = "") -> RunArtifacts:
        return run(cfg, world=self.world(cfg), pretrained=self.pretrained(cfg), config_hash=config_hash)


@dataclass
class MatrixRow:
    scenario: str
    pretrain: str
    mode: str
    adapt: bool
    seed: int
    summary: RunSummary | None
    artifacts: RunArtifacts | None = None


def grid(
    base: RunConfig,
    scenarios: Iterable,
    pretrains: Iterable,
    modes: Iterable,
    seeds: Iterable[int],
    adapts: Iterable[bool] = (True,),
) -> list[RunConfig]:
    """Cartesian product of run configs, seed-major so each world is built once."""
    axes = [list(scenarios), list(pretrains), list(modes), list(seeds), list(adapts)]
    if not all(axes):
        raise ConfigError("every grid axis needs at least one value")
    scenarios, pretrains, modes, seeds, adapts = axes
    out = []
    for seed in seeds:
        seeded = base.with_seed(seed)
        for scenario in scenarios:
            for pre in pretrains:
                for mode in modes:
                    for adapt in adapts:
                        out.append(dataclasses.replace(
                            seeded,
                            partition=PartitionKind(scenario),
                            pretrain=dataclasses.replace(seeded.pretrain, mode=PretrainMode(pre)),
                            mode=Mode(mode),
                            adapt=adapt,
                        ))
    return out


def run_matrix(
    base: RunConfig,
    scenarios: Iterable,
    pretrains: Iterable,
    modes: Iterable,
    seeds: Iterable[int],
    adapts: Iterable[bool] = (True,),
    keep_artifacts: bool = False,
) -> list[MatrixRow]:
    """Summaries over the grid; all runs of one seed share one world."""
    shared = SharedInputs()
    rows = []
    for cfg in grid(base, scenarios, pretrains, modes, seeds, adapts):
        art = shared.run(cfg)
        rows.append(MatrixRow(cfg.partition.value, cfg.pretrain.mode.value, cfg.mode.value,
                              cfg.adapt, cfg.world.seed, art.summary, art if keep_artifacts else None))
    return rows
