"""Deterministic synthetic driving world.

Zones, a map-wide weather/daylight timeline and per-agent trajectories are
frozen at build time. Samples are Gaussian-perturbed class prototypes
conditioned on (zone, weather, daylight), drawn from streams keyed by
``(seed, agent, time)`` so any sample can be regenerated in isolation.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .core import TAG_SAMPLE, TAG_WORLD, ConfigError, ContractError, Sample, keyed_rng

FULL_HORIZON = 5 * 3600.0

ZONE_NAMES = (
    "forest",
    "countryside",
    "rural_farmland",
    "highway",
    "low_density_residential",
    "community_buildings",
    "high_density_residential",
)
WEATHER_KINDS = ("clear", "rain", "fog")
DAYLIGHT = ("day", "night")
CLEAR, RAIN, FOG = 0, 1, 2
DAY, NIGHT = 0, 1

SUN_MIN_DEG = -15.0
SUN_MAX_DEG = 45.0
SUN_DAY_THRESHOLD_DEG = 5.0
# night for the first and last fifth of the horizon (hour 1 and hour 5 of 5)
_SUNRISE_FRACTION = 0.2
# exponent making sin(pi*u)**k hit the 5 degree threshold exactly at u = 0.2 and 0.8
_SUN_EXPONENT = math.log(3.0) / -math.log(math.sin(math.pi * _SUNRISE_FRACTION))

DEFAULT_POPULARITY = (0.06, 0.05, 0.08, 0.15, 0.22, 0.14, 0.30)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    horizon: float = FULL_HORIZON
    n_agents: int = 12
    n_zones: int = 7
    n_classes: int = 6
    dim: int = 16
    n_pixels: int = 32
    # feature model
    # features are large next to the 1e-4 Adam step so students leave the
    # near-uniform softmax regime within a few hundred updates
    prototype_scale: float = 20.0
    zone_spread: float = 1.5
    noise: float = 40.0
    weather_scale: float = 0.8
    night_scale: float = 1.2
    prior_concentration: float = 2.0
    prior_min_tv: float = 0.1
    zone_popularity: tuple[float, ...] | None = DEFAULT_POPULARITY
    # weather timeline
    dynamic_weather: bool = False
    weather_period: float = 600.0
    transition_length: float = 10.0
    # trajectories
    active_fraction: tuple[float, float] = (0.15, 0.5)
    mean_segment: float = 500.0
    boundary_blend: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "active_fraction", tuple(self.active_fraction))
        if self.zone_popularity is not None:
            object.__setattr__(self, "zone_popularity", tuple(self.zone_popularity))
        if self.n_agents < 1:
            raise ConfigError("world needs at least one agent")
        if self.n_zones < 1 or self.n_classes < 2 or self.dim < 1 or self.n_pixels < 1:
            raise ConfigError("n_zones >= 1, n_classes >= 2, dim >= 1 and n_pixels >= 1 required")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.noise < 0:
            raise ConfigError("noise scale must be non-negative")
        if self.weather_period <= 2 * self.transition_length or self.transition_length < 0:
            raise ConfigError("weather period must be much longer than the transition length")
        lo, hi = self.active_fraction
        if not 0 < lo <= hi <= 1:
            raise ConfigError("active_fraction must satisfy 0 < lo <= hi <= 1")
        if self.mean_segment <= 0:
            raise ConfigError("mean_segment must be positive")
        if self.zone_popularity is not None:
            if len(self.zone_popularity) != self.n_zones or min(self.zone_popularity) < 0:
                raise ConfigError("zone_popularity needs one non-negative weight per zone")

    def scaled(self, horizon: float) -> WorldConfig:
        """Copy with every schedule duration rescaled to a new horizon."""
        k = horizon / self.horizon
        return dataclasses.replace(
            self,
            horizon=float(horizon),
            weather_period=self.weather_period * k,
            transition_length=self.transition_length * k,
            mean_segment=self.mean_segment * k,
        )


@dataclass(frozen=True)
class AgentSchedule:
    agent: int
    start: float
    end: float
    seg_starts: np.ndarray  # ascending, seg_starts[0] == start
    seg_zones: np.ndarray

    def is_active(self, t: float) -> bool:
        return self.start <= t <= self.end

    def zone_index(self, t: float) -> int:
        # right-continuous: a segment starting at t already applies at t
        return int(np.searchsorted(self.seg_starts, t, side="right")) - 1

    def next_change(self, t: float) -> tuple[float, int] | None:
        i = self.zone_index(t) + 1
        if i >= len(self.seg_starts):
            return None
        return float(self.seg_starts[i]), int(self.seg_zones[i])


@dataclass(frozen=True)
class WeatherState:
    weights: np.ndarray  # (3,) over WEATHER_KINDS, sums to 1
    kind: int  # dominant kind (incoming kind from the transition midpoint on)
    sun_altitude: float
    daylight: int

    @property
    def kind_name(self) -> str:
        return WEATHER_KINDS[self.kind]

    @property
    def daylight_name(self) -> str:
        return DAYLIGHT[self.daylight]


@dataclass(frozen=True)
class WorldState:
    config: WorldConfig
    prototypes: np.ndarray  # (Z, C, d)
    priors: np.ndarray  # (Z, C)
    shifts: np.ndarray  # (3, 2, d): [weather kind][daylight]
    schedules: tuple[AgentSchedule, ...]
    period_kinds: np.ndarray  # weather kind of each period

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def schedule(self, agent: int) -> AgentSchedule:
        if not 0 <= agent < len(self.schedules):
            raise ContractError(f"unknown agent {agent}")
        return self.schedules[agent]

    def active_agents(self, t: float) -> list[int]:
        return [s.agent for s in self.schedules if s.is_active(t)]


def sun_altitude(cfg: WorldConfig, t: float) -> float:
    if not cfg.dynamic_weather:
        return SUN_MAX_DEG
    u = min(max(t / cfg.horizon, 0.0), 1.0)
    return SUN_MIN_DEG + (SUN_MAX_DEG - SUN_MIN_DEG) * math.sin(math.pi * u) ** _SUN_EXPONENT


def _daylight(altitude: float) -> int:
    return DAY if altitude > SUN_DAY_THRESHOLD_DEG else NIGHT


def _pairwise_tv(priors: np.ndarray) -> float:
    z = len(priors)
    if z < 2:
        return math.inf
    return min(
        0.5 * float(np.abs(priors[i] - priors[j]).sum()) for i in range(z) for j in range(i + 1, z)
    )


def _draw_priors(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    for _ in range(1000):
        p = rng.dirichlet(np.full(cfg.n_classes, cfg.prior_concentration), size=cfg.n_zones)
        # keep every class present everywhere so no zone is trivially degenerate
        p = 0.9 * p + 0.1 / cfg.n_classes
        if _pairwise_tv(p) >= cfg.prior_min_tv:
            return p
    raise ConfigError("could not draw zone priors with the requested pairwise separation")


def _arrange_kinds(groups: list[int], rng: np.random.Generator) -> np.ndarray:
    """Assign a weather kind to every period.

    ``groups[i]`` is the daylight group of period i. Within each group the
    three kinds are balanced, and consecutive periods always differ.
    """
    groups = list(groups)
    sizes = {g: groups.count(g) for g in set(groups)}
    for _ in range(200):
        remaining = {}
        for g, n in sizes.items():
            base = np.full(3, n // 3)
            base[rng.permutation(3)[: n % 3]] += 1
            remaining[g] = base
        out, prev, ok = [], -1, True
        for i, g in enumerate(groups):
            left_in_group = groups[i:].count(g)
            rem = remaining[g].copy()
            forced = np.flatnonzero(rem * 2 > left_in_group + 1)
            cand = rem.astype(float)
            if prev >= 0:
                cand[prev] = 0.0
            if len(forced) and cand[forced[0]] > 0:
                k = int(forced[0])
            elif cand.sum() > 0:
                k = int(rng.choice(3, p=cand / cand.sum()))
            else:
                ok = False
                break
            remaining[g][k] -= 1
            out.append(k)
            prev = k
        if ok:
            return np.array(out, dtype=np.int64)
    raise ConfigError("could not arrange a weather schedule without repeated periods")


def _weather_timeline(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    n_periods = max(1, math.ceil(cfg.horizon / cfg.weather_period - 1e-9))
    if not cfg.dynamic_weather:
        return np.zeros(n_periods, dtype=np.int64)
    mids = [(i + 0.5) * cfg.weather_period for i in range(n_periods)]
    groups = [_daylight(sun_altitude(cfg, min(m, cfg.horizon))) for m in mids]
    return _arrange_kinds(groups, rng)


def _schedule(cfg: WorldConfig, agent: int, popularity: np.ndarray) -> AgentSchedule:
    rng = keyed_rng(cfg.seed, TAG_WORLD, 100 + agent)
    lo, hi = cfg.active_fraction
    duration = math.floor(rng.uniform(lo, hi) * cfg.horizon)
    duration = max(duration, 1)
    start = math.floor(rng.uniform(0.0, cfg.horizon - duration))
    end = start + duration
    starts, zones = [float(start)], [int(rng.choice(cfg.n_zones, p=popularity))]
    t = float(start)
    while True:
        t += max(1.0, math.floor(rng.uniform(0.5, 1.5) * cfg.mean_segment))
        if t >= end or cfg.n_zones == 1:
            break
        p = popularity.copy()
        p[zones[-1]] = 0.0
        starts.append(t)
        zones.append(int(rng.choice(cfg.n_zones, p=p / p.sum())))
    return AgentSchedule(agent, float(start), float(end), np.array(starts), np.array(zones, dtype=np.int64))


def build_world(cfg: WorldConfig) -> WorldState:
    """Freeze prototypes, priors, weather timeline and trajectories for ``cfg.seed``."""
    rng = keyed_rng(cfg.seed, TAG_WORLD, 0)
    z, c, d = cfg.n_zones, cfg.n_classes, cfg.dim
    a = cfg.prototype_scale
    shared = rng.normal(0.0, a, size=(c, d))
    prototypes = shared[None] + rng.normal(0.0, a * cfg.zone_spread, size=(z, c, d))
    priors = _draw_priors(cfg, rng)

    kind_shift = rng.normal(0.0, a * cfg.weather_scale, size=(3, d))
    kind_shift[CLEAR] = 0.0
    night_shift = rng.normal(0.0, a * cfg.night_scale, size=d)
    shifts = np.stack([kind_shift, kind_shift + night_shift], axis=1)

    if cfg.zone_popularity is None:
        popularity = np.full(z, 1.0 / z)
    else:
        popularity = np.asarray(cfg.zone_popularity, dtype=float)
        popularity = popularity / popularity.sum()
    schedules = tuple(_schedule(cfg, i, popularity) for i in range(cfg.n_agents))
    kinds = _weather_timeline(cfg, keyed_rng(cfg.seed, TAG_WORLD, 1))
    return WorldState(
        config=cfg,
        prototypes=prototypes,
        priors=priors,
        shifts=shifts,
        schedules=schedules,
        period_kinds=kinds,
    )


def _check_time(world: WorldState, t: float) -> None:
    if not 0.0 <= t <= world.config.horizon:
        raise ContractError(f"time {t} outside [0, {world.config.horizon}]")


def weather_at(world: WorldState, t: float) -> WeatherState:
    _check_time(world, t)
    cfg = world.config
    alt = sun_altitude(cfg, t)
    weights = np.zeros(3)
    period = min(int(t // cfg.weather_period), len(world.period_kinds) - 1)
    cur = int(world.period_kinds[period])
    t0 = period * cfg.weather_period
    prev = int(world.period_kinds[period - 1]) if period > 0 else cur
    frac = (t - t0) / cfg.transition_length if cfg.transition_length > 0 else 1.0
    if period > 0 and frac < 1.0 and prev != cur:
        weights[prev] = 1.0 - frac
        weights[cur] += frac
        kind = cur if frac >= 0.5 else prev
    else:
        weights[cur] = 1.0
        kind = cur
    return WeatherState(weights=weights, kind=kind, sun_altitude=alt, daylight=_daylight(alt))


def zone_of(world: WorldState, agent: int, t: float) -> int:
    sched = world.schedule(agent)
    if not sched.is_active(t):
        raise ContractError(f"agent {agent} is inactive at t={t}")
    return int(sched.seg_zones[sched.zone_index(t)])


def _time_key(t: float) -> int:
    return int(round(t * 1000))


def _draw_classes(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def sample_at(
    world: WorldState,
    agent: int,
    t: float,
    rng_stream: np.random.Generator | None = None,
    weather: WeatherState | None = None,
) -> Sample | None:
    """Observation of ``agent`` at ``t``, or None when the agent is inactive.

    Without an explicit ``rng_stream`` the draw is keyed by (seed, agent, t).
    """
    sched = world.schedule(agent)
    if not sched.is_active(t):
        return None
    cfg = world.config
    rng = rng_stream if rng_stream is not None else keyed_rng(cfg.seed, TAG_SAMPLE, agent, _time_key(t))
    if weather is None:
        weather = weather_at(world, t)
    zone = int(sched.seg_zones[sched.zone_index(t)])
    p = cfg.n_pixels

    labels = _draw_classes(np.cumsum(world.priors[zone]), rng.random(p))
    eps = rng.standard_normal((p, cfg.dim))
    zones = np.full(p, zone)
    if cfg.boundary_blend > 0:
        nxt = sched.next_change(t)
        if nxt is not None and nxt[0] - t <= cfg.boundary_blend:
            # content of the next zone leaks in as the boundary approaches
            q = 0.5 * (1.0 - (nxt[0] - t) / cfg.boundary_blend)
            leak = rng.random(p) < q
            other = _draw_classes(np.cumsum(world.priors[nxt[1]]), rng.random(p))
            labels = np.where(leak, other, labels)
            zones = np.where(leak, nxt[1], zones)
    shift = weather.weights @ world.shifts[:, weather.daylight, :]
    pixels = world.prototypes[zones, labels] + shift + cfg.noise * eps
    return Sample(agent=agent, time=float(t), pixels=pixels, truth=labels.astype(np.int64))


def schedule_rows(world: WorldState) -> list[tuple[float, int, int]]:
    """(time_s, agent_id, zone_id) at every segment start; zone -1 marks the end."""
    rows = []
    for s in world.schedules:
        rows.extend((float(t0), s.agent, int(z)) for t0, z in zip(s.seg_starts, s.seg_zones))
        rows.append((s.end, s.agent, -1))
    rows.sort()
    return rows


def weather_rows(world: WorldState, step: float = 1.0) -> list[tuple[float, str, float]]:
    rows = []
    n = int(world.config.horizon // step)
    for i in range(n + 1):
        t = i * step
        w = weather_at(world, t)
        kinds = ";".join(f"{k}={v:.4f}" for k, v in zip(WEATHER_KINDS, w.weights))
        rows.append((t, kinds, round(w.sun_altitude, 4)))
    return rows
