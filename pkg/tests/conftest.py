from __future__ import annotations

import numpy as np
import pytest

from delayvio.delayed import DelayedGraph
from delayvio.harness import run_simulation
from delayvio.pipeline import PipelineConfig
from delayvio.simulation import SimConfig


def dso_order(rng: np.random.Generator, n_frames: int, window: int = 8):
    """Yield ``(new_frame, victims)`` for a random admissible marginalization order.

    Once the window is full, one frame other than the two newest is removed
    per step, as the keyframe heuristic would.
    """
    active: list[int] = []
    for f in range(n_frames):
        active.append(f)
        victims = []
        if len(active) >= window:
            v = active[int(rng.integers(len(active) - 2))]
            active.remove(v)
            victims.append(v)
        yield f, victims


def replay_order(delay: int, n_frames: int, seed: int, window: int = 8) -> DelayedGraph:
    rng = np.random.default_rng(seed)
    d = DelayedGraph(delay)
    for f, victims in dso_order(rng, n_frames, window):
        d.add_frame(f)
        for v in victims:
            d.record_marginalization(v)
    return d


@pytest.fixture(scope="session")
def reinit_run():
    """Excited sequence run until the scale has been re-initialized."""
    return run_simulation(SimConfig(seed=0, duration=15.0), PipelineConfig(), stop_when_reinitialized=True)


@pytest.fixture(scope="session")
def visual_run():
    """Visual-only run long enough for the delayed graph to eliminate frames."""
    return run_simulation(SimConfig(seed=1, duration=12.0), PipelineConfig(use_imu=False, delay=5))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
