"""Online evaluation computed from run logs.

All horizon aggregates merge confusion matrices first and score once;
window series do the same over trailing windows on the stream tick grid.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import UndefinedMetricError, miou
from .runlog import RunLog
from .scenarios import CellPartition, Context, cell_of


@dataclass(frozen=True)
class FrameTable:
    t: np.ndarray
    tick: np.ndarray  # integer tick index
    agent: np.ndarray
    cell: np.ndarray
    ver: np.ndarray
    zone: np.ndarray
    wk: np.ndarray
    dl: np.ndarray
    cm: np.ndarray  # (n, C, C)
    fver: np.ndarray  # -1 where no future score was logged
    fcm: np.ndarray  # (n, C, C); equals cm where fver == ver

    def __len__(self) -> int:
        return len(self.t)


def frames(log: RunLog) -> FrameTable:
    """Prediction records as column arrays (cached on the log)."""
    if log._frames is not None:
        return log._frames
    c = log.n_classes
    f_d = float(log.header.get("f_D", 1.0))
    recs = log.of_kind("predict")
    n = len(recs)
    cm = np.array([r["cm"] for r in recs], dtype=np.int64).reshape(n, c, c)
    fcm = cm.copy()
    fver = np.full(n, -1, dtype=np.int64)
    for i, r in enumerate(recs):
        fv = r.get("fver")
        if fv is None:
            continue
        fver[i] = fv
        if "fcm" in r:
            fcm[i] = np.asarray(r["fcm"], dtype=np.int64).reshape(c, c)
    t = np.array([r["t"] for r in recs], dtype=np.float64)
    table = FrameTable(
        t=t,
        tick=np.rint(t * f_d).astype(np.int64),
        agent=np.array([r["agent"] for r in recs], dtype=np.int64),
        cell=np.array([r["cell"] for r in recs], dtype=np.int64),
        ver=np.array([r["ver"] for r in recs], dtype=np.int64),
        zone=np.array([r["zone"] for r in recs], dtype=np.int64),
        wk=np.array([r["wk"] for r in recs], dtype=np.int64),
        dl=np.array([r["dl"] for r in recs], dtype=np.int64),
        cm=cm,
        fver=fver,
        fcm=fcm,
    )
    log._frames = table
    return table


@dataclass(frozen=True)
class MetricSeries:
    """Windowed mIoU on the tick grid plus the per-tick merged matrices behind it."""

    times: np.ndarray  # window end times
    miou: np.ndarray  # NaN where the window is empty
    tick_cms: np.ndarray  # (T, C, C) merged matrices of frames at each tick
    window: float

    def points(self) -> list[tuple[float, float | None]]:
        return [(float(t), None if math.isnan(m) else float(m)) for t, m in zip(self.times, self.miou)]


def _safe_miou(cm: np.ndarray) -> float:
    try:
        return miou(cm)
    except UndefinedMetricError:
        return math.nan


def _tick_grid(log: RunLog) -> tuple[np.ndarray, int, float]:
    f_d = float(log.header.get("f_D", 1.0))
    i0 = int(round(log.header["test_start"] * f_d))
    i1 = int(round(log.header["test_end"] * f_d))
    return np.arange(i0, i1), i0, f_d


def _windowed(tick_cms: np.ndarray, w: int) -> np.ndarray:
    csum = np.concatenate([np.zeros((1,) + tick_cms.shape[1:], dtype=np.int64), np.cumsum(tick_cms, axis=0)])
    idx = np.arange(1, len(tick_cms) + 1)
    return csum[idx] - csum[np.maximum(idx - w, 0)]


def _series(log: RunLog, cms: np.ndarray, ticks: np.ndarray, keep: np.ndarray,
            window: float, agents: np.ndarray | None) -> MetricSeries:
    grid, i0, f_d = _tick_grid(log)
    c = log.n_classes
    w = max(1, int(round(window * f_d)))
    pos = ticks[keep] - i0
    tick_cms = np.zeros((len(grid), c, c), dtype=np.int64)
    np.add.at(tick_cms, pos, cms[keep])
    if agents is None:
        win = _windowed(tick_cms, w)
        values = np.array([_safe_miou(m) for m in win])
    else:
        per_agent = []
        for a in np.unique(agents[keep]):
            sel = agents[keep] == a
            acm = np.zeros_like(tick_cms)
            np.add.at(acm, pos[sel], cms[keep][sel])
            per_agent.append([_safe_miou(m) for m in _windowed(acm, w)])
        arr = np.array(per_agent) if per_agent else np.full((1, len(grid)), np.nan)
        with np.errstate(all="ignore"):
            counts = (~np.isnan(arr)).sum(axis=0)
            values = np.where(counts > 0, np.nansum(arr, axis=0) / np.maximum(counts, 1), np.nan)
    return MetricSeries(times=grid / f_d, miou=values, tick_cms=tick_cms, window=window)


def imminent_series(log: RunLog, window: float = 30.0, aggregation: str = "fleet") -> MetricSeries:
    """Trailing-window mIoU of the matrices of all frames in (t - window, t].

    ``aggregation="agent"`` averages per-agent window scores instead of
    merging across the fleet.
    """
    fr = frames(log)
    keep = np.ones(len(fr), dtype=bool)
    return _series(log, fr.cm, fr.tick, keep, window, _agents_for(aggregation, fr))


def _agents_for(aggregation: str, fr: FrameTable):
    if aggregation == "fleet":
        return None
    if aggregation == "agent":
        return fr.agent
    raise ValueError(f"unknown aggregation {aggregation!r}")


def _version_history(log: RunLog) -> dict[int, tuple[list[float], list[int]]]:
    hist: dict[int, tuple[list[float], list[int]]] = {}
    for r in log.of_kind("broadcast"):
        times, vers = hist.setdefault(int(r["cell"]), ([], []))
        times.append(float(r["t"]))
        vers.append(int(r["ver"]))
    return hist


def held_version(history, cell: int, s: float) -> int:
    """Version of ``cell`` that agents predicted with at time ``s``.

    Broadcasts at a tick land after that tick's predictions, hence the strict
    inequality. Cells that never broadcast before ``s`` hold version 0.
    """
    times, vers = history.get(cell, ((), ()))
    i = bisect.bisect_left(times, s)
    return vers[i - 1] if i > 0 else 0


Scorer = Callable[[int, int], np.ndarray]


def future_series(
    log: RunLog,
    delay: float = 300.0,
    window: float = 30.0,
    scorer: Optional[Scorer] = None,
    aggregation: str = "fleet",
) -> MetricSeries:
    """Score each frame at t with the model its cell held at t - delay.

    Frames earlier than ``test_start + delay`` are skipped. When the stale
    version differs from the one used live, the matrix comes from
    ``scorer(frame_index, version)`` or, failing that, from the future score
    the simulator logged for the same delay.
    """
    fr = frames(log)
    hist = _version_history(log)
    start = float(log.header["test_start"])
    logged_delay = log.header.get("future_delay")
    cms = fr.cm.copy()
    keep = fr.t - delay >= start - 1e-9
    for i in np.flatnonzero(keep):
        v = held_version(hist, int(fr.cell[i]), fr.t[i] - delay)
        if v == fr.ver[i]:
            continue
        if scorer is not None:
            cms[i] = scorer(int(i), v)
        elif logged_delay is not None and math.isclose(logged_delay, delay) and fr.fver[i] == v:
            cms[i] = fr.fcm[i]
        else:
            raise ValueError(
                f"frame at t={fr.t[i]} (agent {fr.agent[i]}) needs rescoring with version {v}; "
                "pass a scorer or use the logged future delay"
            )
    return _series(log, cms, fr.tick, keep, window, _agents_for(aggregation, fr))


def horizon_miou(series: MetricSeries, start: float, end: float) -> float:
    """mIoU of all frame matrices merged over [start, end)."""
    sel = (series.times >= start - 1e-9) & (series.times < end - 1e-9)
    return miou(series.tick_cms[sel].sum(axis=0))


@dataclass(frozen=True)
class RunSummary:
    miou_imminent_3h: float
    miou_imminent_lasthour: float
    miou_future_3h: float
    miou_future_lasthour: float
    miou_imminent_lastquarter: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def summarize(imminent: MetricSeries, future: MetricSeries, test_start: float, test_end: float) -> RunSummary:
    """Whole-test-window and last-third aggregates (the 3 hours / last hour analogs).

    The last-quarter imminent aggregate is included for desk-scale runs.
    """
    last_third = test_end - (test_end - test_start) / 3.0
    last_quarter = test_end - (test_end - test_start) / 4.0
    return RunSummary(
        miou_imminent_3h=horizon_miou(imminent, test_start, test_end),
        miou_imminent_lasthour=horizon_miou(imminent, last_third, test_end),
        miou_future_3h=horizon_miou(future, test_start, test_end),
        miou_future_lasthour=horizon_miou(future, last_third, test_end),
        miou_imminent_lastquarter=horizon_miou(imminent, last_quarter, test_end),
    )


@dataclass(frozen=True)
class TransitionReport:
    offsets: np.ndarray  # seconds relative to the transition
    miou: np.ndarray
    cms: np.ndarray  # (n_offsets, C, C) summed over transitions
    n_transitions: int

    def mean_over(self, lo: float, hi: float) -> float:
        """Mean aligned mIoU over offsets in (lo, hi]."""
        sel = (self.offsets > lo + 1e-9) & (self.offsets <= hi + 1e-9) & ~np.isnan(self.miou)
        return float(self.miou[sel].mean()) if sel.any() else math.nan


def transition_times(log: RunLog, partition: CellPartition | None = None) -> list[tuple[int, int]]:
    """(agent, tick) of every cell change between consecutive ticks of one agent.

    With ``partition`` the cells are recomputed from the logged context, so a
    run can be analyzed against another run's cell boundaries.
    """
    fr = frames(log)
    if partition is None:
        cells = fr.cell
    else:
        cells = np.array(
            [cell_of(partition, Context(int(a), int(z), int(w), int(d)))
             for a, z, w, d in zip(fr.agent, fr.zone, fr.wk, fr.dl)]
        )
    out = []
    for a in np.unique(fr.agent):
        idx = np.flatnonzero(fr.agent == a)
        idx = idx[np.argsort(fr.tick[idx], kind="stable")]
        ticks, cs = fr.tick[idx], cells[idx]
        for j in range(1, len(idx)):
            if ticks[j] == ticks[j - 1] + 1 and cs[j] != cs[j - 1]:
                out.append((int(a), int(ticks[j])))
    return out


def transition_report(
    log: RunLog,
    halfwidth: float = 30.0,
    window: float = 3.0,
    partition: CellPartition | None = None,
) -> TransitionReport:
    """Average mIoU aligned on cell transitions, scored in trailing windows.

    Only the transiting agent's frames within +-halfwidth contribute; windows
    near run boundaries simply see fewer frames.
    """
    fr = frames(log)
    f_d = float(log.header.get("f_D", 1.0))
    h = int(round(halfwidth * f_d))
    w = max(1, int(round(window * f_d)))
    c = log.n_classes
    offsets = np.arange(-h, h + 1)
    total = np.zeros((len(offsets), c, c), dtype=np.int64)
    by_agent = {}
    for a in np.unique(fr.agent):
        idx = np.flatnonzero(fr.agent == a)
        by_agent[int(a)] = {int(k): i for k, i in zip(fr.tick[idx], idx)}
    events = transition_times(log, partition)
    for agent, tick in events:
        lookup = by_agent[agent]
        per_offset = np.zeros((len(offsets), c, c), dtype=np.int64)
        for j, o in enumerate(offsets):
            i = lookup.get(tick + int(o))
            if i is not None:
                per_offset[j] = fr.cm[i]
        total += _windowed(per_offset, w)
    values = np.array([_safe_miou(m) for m in total])
    return TransitionReport(offsets=offsets / f_d, miou=values, cms=total, n_transitions=len(events))


def merge_reports(reports: list[TransitionReport]) -> TransitionReport:
    cms = sum(r.cms for r in reports)
    return TransitionReport(
        offsets=reports[0].offsets,
        miou=np.array([_safe_miou(m) for m in cms]),
        cms=cms,
        n_transitions=sum(r.n_transitions for r in reports),
    )
