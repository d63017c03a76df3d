import dataclasses
from collections import defaultdict

import numpy as np
import pytest

from msc_tta import slow_route
from msc_tta.core import ConfigError, TrainingFault
from msc_tta.runlog import EVENT_ORDER
from msc_tta.scenarios import PretrainSpec
from msc_tta.sim import RunConfig, grid, run, run_matrix
from msc_tta.slow_route import Mode

HORIZON = 1800.0


def cfg_for(**kw):
    world_kw = kw.pop("world", {})
    base = RunConfig(**kw).scaled(HORIZON)
    return dataclasses.replace(base, world=dataclasses.replace(base.world, **world_kw))


@pytest.fixture(scope="module")
def spatial_run():
    return run(cfg_for(partition="Spatial", mode=Mode.TTA))


def test_frozen_run_keeps_versions(spatial_run):
    art = run(cfg_for(partition="Spatial", adapt=False))
    vers = {r["ver"] for r in art.log.of_kind("predict")}
    assert vers == {0}
    assert not art.log.of_kind("train") and not art.log.of_kind("broadcast")
    assert not art.log.of_kind("ingest")


def test_tick_order_contract(spatial_run):
    rank = {k: i for i, k in enumerate(EVENT_ORDER)}
    last = (-1.0, -1)
    for r in spatial_run.records:
        key = (r["t"], rank[r["k"]])
        assert key >= last
        last = key


def test_versions_strictly_increase_per_cell(spatial_run):
    seen = defaultdict(int)
    for r in spatial_run.log.of_kind("broadcast"):
        assert r["ver"] == seen[r["cell"]] + 1
        seen[r["cell"]] = r["ver"]
        assert r["t"] % 30 == 0


def test_agents_predict_with_their_cells_latest_broadcast(spatial_run):
    latest = defaultdict(int)
    for r in spatial_run.records:
        if r["k"] == "broadcast":
            latest[r["cell"]] = r["ver"]
        elif r["k"] == "predict":
            assert r["ver"] == latest[r["cell"]]
            assert r["cell"] == r["zone"]


def test_ingest_only_on_teacher_ticks_and_training_gated(spatial_run):
    ingested = defaultdict(list)
    for r in spatial_run.log.of_kind("ingest"):
        assert r["t"] % 3 == 0
        ingested[r["cell"]].append(r["t"])
    for r in spatial_run.log.of_kind("train"):
        assert any(r["t"] - 30 < t <= r["t"] for t in ingested[r["cell"]])
        assert r["steps"] == -(-r["buf"] // 25) and r["buf"] <= 100


def test_every_active_agent_predicts_every_tick(spatial_run):
    from msc_tta.world import build_world
    cfg = cfg_for(partition="Spatial", mode=Mode.TTA)
    world = build_world(cfg.world)
    by_t = defaultdict(set)
    for r in spatial_run.log.of_kind("predict"):
        by_t[r["t"]].add(r["agent"])
    for t in range(int(cfg.test_start), int(cfg.test_end), 7):
        assert by_t.get(float(t), set()) == set(world.active_agents(float(t)))


def test_baseline_has_no_cross_agent_sharing():
    art = run(cfg_for(partition="Baseline", mode=Mode.OL))
    for r in art.log.of_kind("ingest"):
        assert r["agents"] == [r["cell"]]
    for r in art.log.of_kind("predict"):
        assert r["cell"] == r["agent"]


def test_transitions_logged_on_cell_change(spatial_run):
    last = {}
    trans = {(r["t"], r["agent"]) for r in spatial_run.log.of_kind("transition")}
    for r in spatial_run.log.of_kind("predict"):
        prev = last.get(r["agent"])
        changed = prev is not None and prev != r["cell"]
        assert ((r["t"], r["agent"]) in trans) == changed
        last[r["agent"]] = r["cell"]


def test_identical_config_identical_log():
    cfg = cfg_for(partition="Common", mode=Mode.TTA)
    assert run(cfg).records == run(cfg).records


def test_parallel_workers_match_sequential():
    cfg = cfg_for(partition="Specific", mode=Mode.TTA, world={"dynamic_weather": True})
    seq = run(cfg).records
    par = run(dataclasses.replace(cfg, workers=4)).records
    assert seq == par


def test_specific_cells_starve_without_samples():
    cfg = cfg_for(partition="Specific", mode=Mode.TTA, world={"dynamic_weather": True})
    art = run(cfg)
    ingest = defaultdict(set)
    for r in art.log.of_kind("ingest"):
        ingest[r["cell"]].add(r["t"])
    trained = defaultdict(set)
    for r in art.log.of_kind("train"):
        trained[r["cell"]].add(r["t"])
    for t in range(int(cfg.test_start), int(cfg.test_end), 30):
        for cell in range(42):
            fed = any(t - 30 < s <= t for s in ingest[cell])
            assert (t in trained[cell]) == fed


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(pretrain_duration=10_000, test_duration=10_000)
    with pytest.raises(ConfigError):
        RunConfig(buffer_capacity=10)
    with pytest.raises(ConfigError):
        RunConfig(test_duration=100.5)


def test_scaled_keeps_two_to_three_split():
    cfg = RunConfig().scaled(3600)
    assert (cfg.pretrain_duration, cfg.test_duration, cfg.world.horizon) == (1440, 2160, 3600)


def test_training_fault_carries_cell_and_tick(monkeypatch):
    def broken(model, batch):
        c, d = model.W.shape
        return float("nan"), np.full((c, d), np.nan), np.zeros(c)
    monkeypatch.setattr(slow_route, "loss_and_grad", broken)
    cfg = cfg_for(partition="Common", mode=Mode.OL)
    with pytest.raises(TrainingFault) as info:
        run(cfg)
    assert info.value.cell == 0 and info.value.time is not None
    assert info.value.time >= cfg.test_start and info.value.time % 30 == 0


def test_grid_count():
    cfgs = grid(RunConfig(), ["Baseline", "Common", "Spatial", "Weather", "Daylight", "Specific"],
                ["Scratch", "General", "Cell"], ["TTA", "OL"], [0])
    assert len(cfgs) == 36
    assert len({(c.partition, c.pretrain.mode, c.mode) for c in cfgs}) == 36
    with pytest.raises(ConfigError):
        grid(RunConfig(), [], ["Scratch"], ["OL"], [0])


def test_matrix_runs_share_streams():
    base = cfg_for(mode=Mode.OL)
    rows = run_matrix(base, ["Common", "Spatial"], ["Scratch"], ["OL"], [1], keep_artifacts=True)
    assert len(rows) == 2
    def stream(row):
        return [(r["t"], r["agent"], r["zone"], tuple(np.array(r["cm"]).reshape(6, 6).sum(axis=1)))
                for r in row.artifacts.log.of_kind("predict")]
    assert stream(rows[0]) == stream(rows[1])
    assert rows[0].seed == 1 and rows[1].scenario == "Spatial"


def test_future_scores_logged_for_stale_versions(spatial_run):
    recs = spatial_run.log.of_kind("predict")
    start = spatial_run.log.header["test_start"]
    for r in recs:
        if r["t"] - 300 < start:
            assert "fver" not in r
        else:
            assert "fver" in r and r["fver"] <= r["ver"]
            assert ("fcm" in r) == (r["fver"] != r["ver"])


def test_general_pretraining_starts_from_trained_model():
    art = run(cfg_for(partition="Spatial", pretrain=PretrainSpec("General"), adapt=False))
    ckpt = next(iter(art.checkpoints.values()))
    assert ckpt.W.any()
    assert sum(art.pretrain_counts.values()) > 0
