
import numpy as np
import pytest

from msc_tta.core import Sample
from msc_tta.runlog import SCHEMA_VERSION, RunLog
from msc_tta.world import WorldConfig, build_world


@pytest.fixture(scope="session")
def small_world():
    return build_world(WorldConfig(seed=3).scaled(1800))


@pytest.fixture(scope="session")
def full_world():
    return build_world(WorldConfig(seed=0, dynamic_weather=True))


def make_sample(rng, agent=0, t=0.0, p=8, d=4, c=3):
    return Sample(agent, float(t), rng.normal(size=(p, d)), rng.integers(0, c, size=p))


def make_log(frames, c=2, test_start=0.0, test_end=None, broadcasts=(), transitions=(), delay=300.0):
    """Hand-built run log from (t, agent, cell, ver, cm) tuples."""
    recs = []
    for t, agent, cell, ver, cm in frames:
        recs.append({"k": "predict", "t": float(t), "agent": agent, "cell": cell, "ver": ver,
                     "zone": cell, "wk": 0, "dl": 0, "cm": np.asarray(cm).ravel().tolist()})
    for t, cell, ver in broadcasts:
        recs.append({"k": "broadcast", "t": float(t), "cell": cell, "ver": ver})
    for t, agent, a, b in transitions:
        recs.append({"k": "transition", "t": float(t), "agent": agent, "from": a, "to": b})
    recs.sort(key=lambda r: r["t"])
    if test_end is None:
        test_end = max(f[0] for f in frames) + 1.0
    header = {"schema": SCHEMA_VERSION, "config_hash": "x" * 64, "seed": 0, "n_classes": c,
              "n_agents": 4, "n_zones": 7, "f_D": 1.0, "test_start": float(test_start),
              "test_end": float(test_end), "future_delay": delay, "partition": "Spatial",
              "pretrain": "Scratch", "mode": "OL", "adapt": True}
    return RunLog(header, recs)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
