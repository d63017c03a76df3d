import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msc_tta.core import ConfigError, ContractError
from msc_tta.world import (
    CLEAR,
    DAY,
    NIGHT,
    WorldConfig,
    build_world,
    sample_at,
    schedule_rows,
    sun_altitude,
    weather_at,
    weather_rows,
    zone_of,
)


def switch_times(world, step=1.0):
    times, prev = [], None
    t = 0.0
    while t <= world.config.horizon:
        w = weather_at(world, t)
        if prev is not None and not np.array_equal(w.weights, prev) and prev.max() == 1.0:
            times.append(t)
        prev = w.weights
        t += step
    return times


def test_weather_switches_every_ten_minutes(full_world):
    # first departure from a pure state happens one second after each boundary
    times = switch_times(full_world)
    assert times[:3] == [601.0, 1201.0, 1801.0]
    assert all(round(t - 1) % 600 == 0 for t in times)


def test_each_kind_four_night_and_six_day_periods(full_world):
    counts = np.zeros((3, 2), dtype=int)
    for i, kind in enumerate(full_world.period_kinds):
        mid = weather_at(full_world, i * 600 + 300)
        counts[kind, mid.daylight] += 1
    assert counts[:, NIGHT].tolist() == [4, 4, 4]
    assert counts[:, DAY].tolist() == [6, 6, 6]
    assert all(a != b for a, b in zip(full_world.period_kinds, full_world.period_kinds[1:]))


def test_transition_midpoint_is_half_and_half(full_world):
    k = full_world.period_kinds
    w = weather_at(full_world, 605.0)
    assert w.weights[k[0]] == pytest.approx(0.5) and w.weights[k[1]] == pytest.approx(0.5)
    assert weather_at(full_world, 610.0).weights[k[1]] == 1.0


def test_night_at_start_and_end_day_in_between(full_world):
    assert weather_at(full_world, 0.0).daylight == NIGHT
    assert weather_at(full_world, 3599.0).daylight == NIGHT
    assert weather_at(full_world, 3601.0).daylight == DAY
    assert weather_at(full_world, 9000.0).daylight == DAY
    assert weather_at(full_world, 14401.0).daylight == NIGHT


def test_sun_altitude_range(full_world):
    alts = [sun_altitude(full_world.config, t) for t in range(0, 18001, 60)]
    assert min(alts) == pytest.approx(-15.0) and max(alts) == pytest.approx(45.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 18000))
def test_weights_sum_to_one_and_daylight_follows_altitude(t):
    world = _full_world()
    w = weather_at(world, float(t))
    assert w.weights.sum() == pytest.approx(1.0)
    assert (w.daylight == DAY) == (w.sun_altitude > 5.0)
    in_transition = (t % 600) < 10 and t >= 600
    if not in_transition:
        assert sorted(w.weights.tolist()) == [0.0, 0.0, 1.0]


_CACHE = {}


def _full_world():
    if "w" not in _CACHE:
        _CACHE["w"] = build_world(WorldConfig(seed=0, dynamic_weather=True))
    return _CACHE["w"]


def test_static_weather_is_clear_day(small_world):
    w = weather_at(small_world, 100.0)
    assert w.kind == CLEAR and w.daylight == DAY


def test_out_of_range_time(small_world):
    with pytest.raises(ContractError):
        weather_at(small_world, -1.0)
    with pytest.raises(ContractError):
        weather_at(small_world, small_world.config.horizon + 1)


def test_same_seed_same_world():
    a = build_world(WorldConfig(seed=5).scaled(1800))
    b = build_world(WorldConfig(seed=5).scaled(1800))
    assert np.array_equal(a.prototypes, b.prototypes)
    assert schedule_rows(a) == schedule_rows(b)
    assert weather_rows(a, 60) == weather_rows(b, 60)


def test_infeasible_config():
    with pytest.raises(ConfigError):
        WorldConfig(n_agents=0)
    with pytest.raises(ConfigError):
        WorldConfig(weather_period=15, transition_length=10)


def test_zone_lookup_is_right_continuous(small_world):
    sched = next(s for s in small_world.schedules if len(s.seg_starts) > 1)
    t1 = float(sched.seg_starts[1])
    assert zone_of(small_world, sched.agent, t1) == sched.seg_zones[1]
    assert zone_of(small_world, sched.agent, t1 - 0.5) == sched.seg_zones[0]


def test_inactive_agent(small_world):
    sched = next(s for s in small_world.schedules if s.start > 0)
    assert sample_at(small_world, sched.agent, sched.start - 1) is None
    with pytest.raises(ContractError):
        zone_of(small_world, sched.agent, sched.start - 1)


def test_schedules_visit_several_zones():
    for seed in range(5):
        world = build_world(WorldConfig(seed=seed))
        multi = sum(len(set(s.seg_zones.tolist())) >= 2 for s in world.schedules)
        assert multi >= len(world.schedules) / 2
        for s in world.schedules:
            assert 0 <= s.start < s.end <= world.config.horizon


def test_priors_are_pairwise_separated():
    for seed in range(5):
        pri = build_world(WorldConfig(seed=seed)).priors
        assert np.allclose(pri.sum(axis=1), 1.0)
        for i in range(len(pri)):
            for j in range(i + 1, len(pri)):
                assert 0.5 * np.abs(pri[i] - pri[j]).sum() >= 0.1


def test_sample_independent_of_query_order(small_world):
    sched = small_world.schedules[0]
    times = [sched.start + k for k in (5, 1, 9)]
    first = [sample_at(small_world, 0, t) for t in times]
    for t in reversed(times):
        sample_at(small_world, 1 if small_world.schedules[1].is_active(t) else 0, t)
    second = [sample_at(small_world, 0, t) for t in times]
    for a, b in zip(first, second):
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.truth, b.truth)


def test_zero_noise_gives_identical_features_per_class():
    world = build_world(dataclasses.replace(WorldConfig(seed=1).scaled(1800), noise=0.0))
    sched = world.schedules[0]
    s = sample_at(world, 0, sched.start + 1)
    for c in np.unique(s.truth):
        rows = s.pixels[s.truth == c]
        assert np.all(rows == rows[0])


def test_sample_features_follow_prototypes(small_world):
    sched = small_world.schedules[2]
    zone = zone_of(small_world, 2, sched.start)
    s = sample_at(small_world, 2, sched.start)
    noise = small_world.config.noise
    resid = s.pixels - small_world.prototypes[zone, s.truth]
    assert abs(resid.std() - noise) < 0.25 * noise


def test_boundary_blend_leaks_next_zone():
    cfg = dataclasses.replace(WorldConfig(seed=2).scaled(3600), boundary_blend=10.0, noise=0.0)
    world = build_world(cfg)
    sched = next(s for s in world.schedules if len(s.seg_starts) > 1)
    t1 = float(sched.seg_starts[1])
    nxt = int(sched.seg_zones[1])
    s = sample_at(world, sched.agent, t1 - 1)
    leaked = [any(np.array_equal(px, world.prototypes[nxt, c]) for c in range(cfg.n_classes))
              for px in s.pixels]
    assert any(leaked)
    far = sample_at(world, sched.agent, t1 - 60)
    assert not any(any(np.array_equal(px, world.prototypes[nxt, c]) for c in range(cfg.n_classes))
                   for px in far.pixels)


def test_scaled_world_keeps_proportions():
    cfg = WorldConfig(dynamic_weather=True).scaled(3600)
    assert cfg.weather_period == 120 and cfg.transition_length == 2
    world = build_world(cfg)
    assert len(world.period_kinds) == 30
    assert weather_at(world, 0.0).daylight == NIGHT and weather_at(world, 1800.0).daylight == DAY
