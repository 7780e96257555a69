"""Step loop with scheduled checkpoints, phase-space dumps and a diagnostics CSV."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CompressionStats, write_checkpoint
from .config import RunConfig
from .dumps import ParticleDump, write_dump, write_phase_space
from .pic import (DiagRecord, PICState, StepFailure, checkpoint_now, initial_record,
                  step_implicit, steps_until)

log = logging.getLogger(__name__)

HEADER = DiagRecord.FIELDS


class RunFailure(RuntimeError):
    """A step failed; ``last_checkpoint`` is the newest file written, if any."""

    def __init__(self, cause: StepFailure, last_checkpoint: Path | None):
        self.cause = cause
        self.last_checkpoint = last_checkpoint
        super().__init__(str(cause))


class DiagnosticsWriter:
    """Appends rows to the diagnostics CSV; the header is written once."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists() and self.path.stat().st_size > 0)
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._csv.writerow(HEADER)
        self._fh.flush()

    def write(self, rec: DiagRecord) -> None:
        self._csv.writerow([rec.step, repr(rec.t), *(repr(float(x)) for x in rec.row()[2:])])
        self._fh.flush()

    def marker(self, text: str) -> None:
        self._fh.write(f"# {text}\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class DiagnosticsTable:
    columns: dict[str, np.ndarray]
    markers: list[tuple[int, str]]  # (index of the next row, text)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def split(self) -> list[dict[str, np.ndarray]]:
        """Segments between markers (e.g. before and after a restart)."""
        cuts = [0, *(i for i, _ in self.markers), len(self.columns["t"])]
        return [{k: v[a:b] for k, v in self.columns.items()} for a, b in zip(cuts, cuts[1:])
                if b > a]


def read_diagnostics(path) -> DiagnosticsTable:
    rows, markers = [], []
    with open(path, newline="") as fh:
        header = None
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                markers.append((len(rows), line[1:].strip()))
                continue
            if not line.strip():
                continue
            fields = next(csv.reader([line]))
            if header is None:
                if tuple(fields) != HEADER:
                    raise ValueError(f"{path}:{lineno}: unexpected header {fields}")
                header = fields
                continue
            try:
                rows.append([float(x) for x in fields])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad row {line.strip()!r}") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(HEADER))
    cols = {name: arr[:, i] for i, name in enumerate(HEADER)}
    cols["step"] = cols["step"].astype(np.int64)
    return DiagnosticsTable(cols, markers)


def _due(state: PICState, times, tol: float) -> bool:
    return any(abs(state.time - t) <= tol for t in times)


def checkpoint_path(cfg: RunConfig, state: PICState) -> Path:
    return cfg.path(f"checkpoint_step{state.step:06d}.gmcr")


@dataclass
class RunResult:
    state: PICState
    records: list[DiagRecord] = field(default_factory=list)
    checkpoints: list[tuple[Path, CompressionStats]] = field(default_factory=list)
    in_memory: list[Checkpoint] = field(default_factory=list)


def run(state: PICState, cfg: RunConfig, writer: DiagnosticsWriter | None = None,
        t_end: float | None = None, first: DiagRecord | None = None,
        write_files: bool = True) -> RunResult:
    """Step to ``t_end`` (default ``cfg.t_end``), honouring the schedules in ``cfg``.

    ``first`` is written before stepping; it defaults to the initial-state
    record.  Checkpoints due at the current time are taken before stepping.
    """
    t_end = cfg.t_end if t_end is None else t_end
    result = RunResult(state)
    first = first or initial_record(state)
    result.records.append(first)
    if writer:
        writer.write(first)
    tol = 0.5 * state.dt
    n_steps = steps_until(state, t_end)
    for i in range(n_steps + 1):
        if _due(state, cfg.checkpoint_at, tol):
            ckpt, _ = checkpoint_now(state, cfg.fit(), cfg.min_particles, cfg.solver_tol,
                                     cfg.threads)
            result.in_memory.append(ckpt)
            if write_files:
                path = checkpoint_path(cfg, state)
                stats = write_checkpoint(ckpt, path)
                result.checkpoints.append((path, stats))
                log.info("checkpoint %s: ratio %.2f", path, stats.ratio)
        if write_files and (_due(state, cfg.phase_space_at, tol) or
                            (cfg.phase_space_every and state.step % cfg.phase_space_every == 0)):
            write_phase_space(cfg.path(f"phase_step{state.step:06d}.csv"),
                              [s.particles for s in state.species])
        if write_files and _due(state, cfg.dump_at, tol):
            write_dump(ParticleDump.from_species([s.particles for s in state.species]),
                       cfg.path(f"particles_step{state.step:06d}.csv"))
        if i == n_steps:
            break
        try:
            rec = step_implicit(state)
        except StepFailure as exc:
            last = result.checkpoints[-1][0] if result.checkpoints else None
            raise RunFailure(exc, last) from exc
        result.records.append(rec)
        if writer:
            writer.write(rec)
    return result
