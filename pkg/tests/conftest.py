"""Shared fixtures: the two-stream experiment is run once per session."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import settings

from gmcr.checkpoint import Checkpoint, CompressionStats, dumps, loads
from gmcr.em import FitConfig, FitReport, warm_up
from gmcr.pic import (DiagRecord, PICState, SimConfig, checkpoint_now, init_two_stream,
                      initial_record, push_cost, restart_from, restart_record, step_implicit,
                      steps_until)

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# acceptance criterion number -> (passed, detail); printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")


def columns(records: list[DiagRecord]) -> dict[str, np.ndarray]:
    rows = np.array([r.row() for r in records], dtype=float)
    return {name: rows[:, i] for i, name in enumerate(DiagRecord.FIELDS)}


@dataclass
class Snapshot:
    step: int
    x: np.ndarray
    v: np.ndarray
    alpha: np.ndarray


def snapshot(state: PICState) -> Snapshot:
    p = state.species[0].particles
    return Snapshot(state.step, p.x.copy(), p.v[:, 0].copy(), p.alpha.copy())


SNAPSHOT_STEPS = (50, 70, 97)


@dataclass
class RunTrace:
    records: list[DiagRecord]
    snapshots: dict[int, Snapshot] = field(default_factory=dict)
    state: PICState | None = None

    @property
    def cols(self) -> dict[str, np.ndarray]:
        return columns(self.records)


def advance(state: PICState, t_end: float, trace: RunTrace) -> None:
    for _ in range(steps_until(state, t_end)):
        trace.records.append(step_implicit(state))
        if state.step in SNAPSHOT_STEPS:
            trace.snapshots[state.step] = snapshot(state)
    trace.state = state


@dataclass
class TwoStream:
    cfg: SimConfig
    reference: RunTrace
    checkpoint: Checkpoint
    checkpoint_bytes: bytes
    stats: CompressionStats
    reports: list[FitReport]
    state_at_checkpoint: PICState
    lemons: RunTrace
    no_lemons: RunTrace
    restarted_lemons: PICState
    restarted_plain: PICState
    push_seconds: float
    wall_seconds: float


def _copy_state(state: PICState) -> PICState:
    from copy import deepcopy
    return deepcopy(state)


@pytest.fixture(scope="session")
def two_stream() -> TwoStream:
    start = time.perf_counter()
    warm_up()
    cfg = SimConfig()
    state = init_two_stream(cfg)
    ref = RunTrace([initial_record(state)])
    advance(state, 10.0, ref)
    at_ckpt = _copy_state(state)
    ckpt, reports = checkpoint_now(state, FitConfig(k_max=8, seed=cfg.seed))
    data, stats = dumps(ckpt)
    advance(state, cfg.t_end, ref)
    push = push_cost(state)

    runs = {}
    for lemons in (True, False):
        restored = restart_from(loads(data), lemons=lemons)
        trace = RunTrace([restart_record(restored, ckpt)])
        runs[lemons] = (_copy_state(restored), trace)
        advance(restored, cfg.t_end, trace)
    return TwoStream(cfg, ref, ckpt, data, stats, reports, at_ckpt, runs[True][1],
                     runs[False][1], runs[True][0], runs[False][0], push,
                     time.perf_counter() - start)
