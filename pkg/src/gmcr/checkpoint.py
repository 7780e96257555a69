"""Binary checkpoint files holding per-cell mixtures instead of particles.

Layout (little-endian, IEEE-754 doubles; byte-level description in
docs/format.md)::

    header   magic "GMCR", version, flags, dim, species count, grid,
             time, step, seed, dt, Picard tolerance
    fit      k_max, max_iters, tol, covariance floor, Gauss solver tol,
             min_particles
    species  (repeated) q, m, rho_target[n_x], cell records[n_x]
    fields   E[n_x] (cell centres), rho_background[n_x]
    trailer  CRC-32 of everything above

A cell record is a tag byte (K for mixtures, 0 for raw particles), a uint32
particle count, then either K x (mass, mean[D], cov upper triangle) or
count x (x, v[D], alpha).
"""
from __future__ import annotations

import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import GM, RAW, CellRecord
from .grid import Grid
from .particles import Particles

MAGIC = b"GMCR"
VERSION = 1
MAX_K = 255

_HEADER = struct.Struct("<4sHHBBIdddqQdd")
_FIT = struct.Struct("<HIdddI")
_SPECIES = struct.Struct("<dd")
_RECORD = struct.Struct("<BI")
_CRC = struct.Struct("<I")
_F8 = np.dtype("<f8")


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, offset: int, needed: int, size: int):
        self.offset = offset
        super().__init__(f"file truncated at offset {offset}: needed {needed} bytes, "
                         f"{max(size - offset, 0)} left")


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class FitEcho:
    k_max: int = 8
    max_iters: int = 1000
    tol: float = 1e-6
    covariance_floor: float = 1e-10
    solver_tol: float = 1e-12
    min_particles: int = 10


@dataclass
class SpeciesCheckpoint:
    q: float
    m: float
    rho_target: np.ndarray
    records: list[CellRecord]


@dataclass
class Checkpoint:
    grid: Grid
    time: float
    step: int
    dt: float
    species: list[SpeciesCheckpoint]
    efield: np.ndarray
    rho_background: np.ndarray
    seed: int = 0
    picard_tol: float = 1e-10
    dim: int = 1
    periodic: bool = True
    fit: FitEcho = field(default_factory=FitEcho)


@dataclass(frozen=True)
class CompressionStats:
    raw_bytes: int
    compressed_bytes: int
    file_bytes: int

    @property
    def ratio(self) -> float:
        if self.raw_bytes == 0 or self.compressed_bytes == 0:
            return 1.0
        return self.raw_bytes / self.compressed_bytes

    @property
    def file_ratio(self) -> float:
        return self.raw_bytes / self.file_bytes if self.raw_bytes else 1.0


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F8).tobytes()


def _record_bytes(rec: CellRecord, dim: int) -> bytes:
    if rec.mode == GM:
        if not 1 <= rec.k <= MAX_K:
            raise ValueError(f"cell {rec.cell_index}: K={rec.k} outside 1..{MAX_K}")
        iu = np.triu_indices(dim)
        rows = np.column_stack([rec.masses, rec.means.reshape(rec.k, dim),
                                rec.covs[:, iu[0], iu[1]]])
        return _RECORD.pack(rec.k, rec.count) + _f8(rows)
    p = rec.particles
    rows = np.column_stack([p.x, p.v.reshape(len(p), dim), p.alpha])
    return _RECORD.pack(0, len(p)) + _f8(rows)


def dumps(ckpt: Checkpoint) -> tuple[bytes, CompressionStats]:
    """Serialize; returns (file bytes, compression stats)."""
    g, d = ckpt.grid, ckpt.dim
    parts = [_HEADER.pack(MAGIC, VERSION, int(ckpt.periodic), d, len(ckpt.species),
                          g.n, g.length, g.dx, ckpt.time, ckpt.step, ckpt.seed,
                          ckpt.dt, ckpt.picard_tol)]
    f = ckpt.fit
    parts.append(_FIT.pack(f.k_max, f.max_iters, f.tol, f.covariance_floor,
                           f.solver_tol, f.min_particles))
    n_particles = 0
    record_bytes = 0
    for sp in ckpt.species:
        if len(sp.records) != g.n:
            raise ValueError(f"expected {g.n} cell records, got {len(sp.records)}")
        parts.append(_SPECIES.pack(sp.q, sp.m))
        parts.append(_f8(sp.rho_target))
        for c, rec in enumerate(sp.records):
            if rec.cell_index != c:
                raise ValueError(f"record for cell {rec.cell_index} found in slot {c}")
            blob = _record_bytes(rec, d)
            record_bytes += len(blob)
            n_particles += rec.count
            parts.append(blob)
    parts.append(_f8(ckpt.efield))
    parts.append(_f8(ckpt.rho_background))
    body = b"".join(parts)
    data = body + _CRC.pack(zlib.crc32(body))
    stats = CompressionStats(n_particles * (d + 2) * 8, record_bytes, len(data))
    return data, stats


def write_checkpoint(ckpt: Checkpoint, path) -> CompressionStats:
    data, stats = dumps(ckpt)
    Path(path).write_bytes(data)
    return stats


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(self.pos, n, len(self.data))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, s: struct.Struct):
        return s.unpack(self.take(s.size))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype=_F8).astype(float)


def _read_record(r: _Reader, cell: int, dim: int) -> CellRecord:
    k, count = r.unpack(_RECORD)
    if k == 0:
        rows = r.floats(count * (dim + 2)).reshape(count, dim + 2)
        p = Particles(rows[:, 0].copy(), rows[:, 1:1 + dim].copy(), rows[:, -1].copy())
        return CellRecord(RAW, cell, count, particles=p)
    width = 1 + dim + dim * (dim + 1) // 2
    rows = r.floats(k * width).reshape(k, width)
    iu = np.triu_indices(dim)
    covs = np.zeros((k, dim, dim))
    covs[:, iu[0], iu[1]] = rows[:, 1 + dim:]
    covs[:, iu[1], iu[0]] = rows[:, 1 + dim:]
    return CellRecord(GM, cell, count, rows[:, 0].copy(), rows[:, 1:1 + dim].copy(), covs)


def loads(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.unpack(struct.Struct("<H"))
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version}, this reader handles {VERSION}")
    r.pos = 0
    (_, _, flags, dim, n_species, n_x, length, dx, t, step, seed, dt,
     picard_tol) = r.unpack(_HEADER)
    if dim < 1 or n_x < 2:
        raise CorruptCheckpointError(f"invalid header: dim={dim}, n_x={n_x}")
    grid = Grid(n_x, length)
    if abs(dx - grid.dx) > 1e-15 * grid.dx:
        raise CorruptCheckpointError(f"stored dx {dx!r} != L/n_x {grid.dx!r}")
    fit = FitEcho(*r.unpack(_FIT))
    species = []
    for _ in range(n_species):
        q, m = r.unpack(_SPECIES)
        rho = r.floats(n_x)
        records = [_read_record(r, c, dim) for c in range(n_x)]
        species.append(SpeciesCheckpoint(q, m, rho, records))
    efield = r.floats(n_x)
    background = r.floats(n_x)
    body_end = r.pos
    (crc,) = r.unpack(_CRC)
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} trailing bytes after offset {r.pos}")
    if zlib.crc32(data[:body_end]) != crc:
        raise CorruptCheckpointError("CRC mismatch: file contents are corrupted")
    return Checkpoint(grid, t, step, dt, species, efield, background, seed=seed,
                      picard_tol=picard_tol, dim=dim, periodic=bool(flags & 1), fit=fit)


def read_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def compression_stats(ckpt: Checkpoint) -> CompressionStats:
    return dumps(ckpt)[1]


def summarize(ckpt: Checkpoint) -> dict:
    """Per-species K histogram, record counts and conserved totals."""
    out = {"time": ckpt.time, "step": ckpt.step, "n_x": ckpt.grid.n,
           "length": ckpt.grid.length, "species": []}
    for sp in ckpt.species:
        ks = [rec.k for rec in sp.records if rec.mode == GM]
        mass = 0.0
        momentum = np.zeros(ckpt.dim)
        energy = 0.0
        for rec in sp.records:
            if rec.count == 0:
                continue
            t = rec.targets()
            mass += t.mass
            momentum = momentum + t.momentum
            energy += t.energy
        out["species"].append({
            "q": sp.q, "m": sp.m,
            "gm_cells": len(ks),
            "raw_cells": sum(rec.mode == RAW for rec in sp.records),
            "particles": sum(rec.count for rec in sp.records),
            "k_histogram": dict(sorted(Counter(ks).items())),
            "mean_k": float(np.mean(ks)) if ks else 0.0,
            "mass": mass, "momentum": momentum.tolist(), "second_moment": energy,
        })
    stats = compression_stats(ckpt)
    out.update(raw_bytes=stats.raw_bytes, compressed_bytes=stats.compressed_bytes,
               file_bytes=stats.file_bytes, ratio=stats.ratio)
    return out


def inspect(path) -> str:
    s = summarize(read_checkpoint(path))
    lines = [f"checkpoint {path}",
             f"  t = {s['time']:g} (step {s['step']}), n_x = {s['n_x']}, L = {s['length']:g}",
             f"  compression ratio {s['ratio']:.2f} "
             f"(raw {s['raw_bytes']} B / records {s['compressed_bytes']} B; "
             f"file {s['file_bytes']} B)"]
    for i, sp in enumerate(s["species"]):
        hist = ", ".join(f"K={k}: {n}" for k, n in sp["k_histogram"].items()) or "none"
        lines += [f"  species {i} (q={sp['q']:g}, m={sp['m']:g}): {sp['particles']} particles, "
                  f"{sp['gm_cells']} GM cells, {sp['raw_cells']} RAW cells",
                  f"    K histogram: {hist}; mean K {sp['mean_k']:.3f}",
                  f"    mass {sp['mass']:.16g}, momentum {sp['momentum']}, "
                  f"sum alpha|v|^2 {sp['second_moment']:.16g}"]
    return "\n".join(lines)
