"""Particle dump files: CSV and an equivalent little-endian binary form.

CSV has the header ``x,v,alpha,species`` (1V) or
``x,v_0,...,v_{D-1},alpha,species`` and one particle per row.  The binary
form is described in docs/format.md; files are told apart by the magic
bytes ``GMPD`` at offset 0.
"""
from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .particles import Particles

MAGIC = b"GMPD"
VERSION = 1
_HEADER = struct.Struct("<4sHBxQ")
_CRC = struct.Struct("<I")


class MalformedDumpError(ValueError):
    """Unreadable dump; ``line`` (CSV, 1-based) or ``offset`` (binary) locate it."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        if line is not None:
            message = f"line {line}: {message}"
        elif offset is not None:
            message = f"offset {offset}: {message}"
        super().__init__(message)


@dataclass
class ParticleDump:
    x: np.ndarray
    v: np.ndarray  # (n, D)
    alpha: np.ndarray
    species: np.ndarray  # (n,) int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float)
        self.v = v if v.ndim == 2 else v.reshape(self.x.size, -1 if self.x.size else 1)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        if not (self.v.shape[0] == self.alpha.size == self.species.size == self.x.size):
            raise ValueError("dump columns have different lengths")

    def __len__(self):
        return self.x.size

    @property
    def dim(self) -> int:
        return self.v.shape[1]

    @classmethod
    def from_species(cls, parts: list[Particles]) -> "ParticleDump":
        dim = parts[0].dim if parts else 1
        p = Particles.concatenate(parts, dim)
        ids = np.concatenate([np.full(len(q), i) for i, q in enumerate(parts)]) if parts else []
        return cls(p.x, p.v, p.alpha, ids)

    def by_species(self) -> dict[int, Particles]:
        return {int(s): Particles(self.x[m], self.v[m], self.alpha[m])
                for s in np.unique(self.species) for m in [self.species == s]}


def _csv_header(dim: int) -> list[str]:
    vs = ["v"] if dim == 1 else [f"v_{i}" for i in range(dim)]
    return ["x", *vs, "alpha", "species"]


def dump_csv_text(dump: ParticleDump) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(_csv_header(dump.dim))
    for x, v, a, s in zip(dump.x, dump.v, dump.alpha, dump.species):
        w.writerow([repr(float(x)), *(repr(float(c)) for c in v), repr(float(a)), int(s)])
    return out.getvalue()


def parse_csv(text: str) -> ParticleDump:
    rows = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise MalformedDumpError("empty file", line=1) from None
    dim = len(header) - 3
    if dim < 1 or header != _csv_header(dim):
        raise MalformedDumpError(f"bad header {','.join(header)!r}, expected "
                                 "'x,v,alpha,species' or 'x,v_0,...,alpha,species'", line=1)
    values, species = [], []
    for lineno, row in enumerate(rows, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != dim + 3:
            raise MalformedDumpError(f"expected {dim + 3} fields, got {len(row)}", line=lineno)
        try:
            nums = [float(c) for c in row[:-1]]
            sp = int(row[-1])
        except ValueError as exc:
            raise MalformedDumpError(str(exc), line=lineno) from None
        if not all(np.isfinite(nums)):
            raise MalformedDumpError("non-finite value", line=lineno)
        if not nums[-1] > 0:
            raise MalformedDumpError(f"weight {nums[-1]!r} is not positive", line=lineno)
        values.append(nums)
        species.append(sp)
    arr = np.array(values, dtype=float).reshape(-1, dim + 2)
    return ParticleDump(arr[:, 0], arr[:, 1:1 + dim], arr[:, -1], species)


def dump_binary(dump: ParticleDump) -> bytes:
    body = (_HEADER.pack(MAGIC, VERSION, dump.dim, len(dump))
            + np.ascontiguousarray(dump.x, "<f8").tobytes()
            + np.ascontiguousarray(dump.v, "<f8").tobytes()
            + np.ascontiguousarray(dump.alpha, "<f8").tobytes()
            + np.ascontiguousarray(dump.species, "<i4").tobytes())
    return body + _CRC.pack(zlib.crc32(body))


def parse_binary(data: bytes) -> ParticleDump:
    if len(data) < _HEADER.size:
        raise MalformedDumpError(f"header needs {_HEADER.size} bytes, file has {len(data)}",
                                 offset=len(data))
    magic, version, dim, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedDumpError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise MalformedDumpError(f"unsupported version {version}", offset=4)
    if dim < 1:
        raise MalformedDumpError("dimension must be at least 1", offset=6)
    expected = _HEADER.size + n * (8 * (dim + 2) + 4) + _CRC.size
    if len(data) != expected:
        raise MalformedDumpError(f"size {len(data)} does not match {n} particles "
                                 f"({expected} bytes)", offset=min(len(data), expected))
    pos = _HEADER.size

    def take(count, dtype):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.astype(np.int64 if dtype == "<i4" else float)

    x, v, alpha, species = take(n, "<f8"), take(n * dim, "<f8"), take(n, "<f8"), take(n, "<i4")
    (crc,) = _CRC.unpack_from(data, pos)
    if zlib.crc32(data[:pos]) != crc:
        raise MalformedDumpError("CRC mismatch", offset=pos)
    return ParticleDump(x, v.reshape(n, dim), alpha, species)


def write_dump(dump: ParticleDump, path, binary: bool | None = None) -> None:
    """Write CSV, or binary when ``binary`` is set or the suffix is .gmpd/.bin."""
    path = Path(path)
    if binary is None:
        binary = path.suffix in (".gmpd", ".bin")
    if binary:
        path.write_bytes(dump_binary(dump))
    else:
        path.write_text(dump_csv_text(dump))


def read_dump(path) -> ParticleDump:
    data = Path(path).read_bytes()
    try:
        if data[:4] == MAGIC:
            return parse_binary(data)
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDumpError("neither a GMPD file nor UTF-8 CSV",
                                     offset=exc.start) from None
        return parse_csv(text)
    except MalformedDumpError as exc:
        exc.args = (f"{path}: {exc}",)
        raise


def write_phase_space(path, parts: list[Particles]) -> None:
    """CSV with columns x, v, species (first velocity component)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "v", "species"])
        for s, p in enumerate(parts):
            for x, v in zip(p.x, p.v[:, 0]):
                w.writerow([repr(float(x)), repr(float(v)), s])
