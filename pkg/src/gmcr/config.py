"""Plain-text ``key = value`` run configuration.

One setting per line; ``#`` starts a comment.  Every key is listed in
docs/config.md.  Unknown keys and unparsable values are rejected with the
line number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .em import FitConfig
from .pic import SimConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        prefix = f"{source}:" if source else ""
        prefix += f"{line}: " if line is not None else (" " if prefix else "")
        super().__init__(prefix + message)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    t = text.strip().lower()
    # allow the common symbolic domain length
    if t in ("2pi", "2*pi"):
        return 2 * math.pi
    return float(t)


def _times(text: str) -> tuple[float, ...]:
    t = text.strip()
    if not t or t.lower() == "none":
        return ()
    return tuple(float(s) for s in t.replace(",", " ").split())


@dataclass
class RunConfig:
    # simulation
    length: float = 2 * math.pi
    n_x: int = 32
    dt: float = 0.2
    ppc: int = 156
    v_beam: float = math.sqrt(3) / 2
    t_end: float = 20.0
    picard_tol: float = 1e-10
    picard_max: int = 100
    seed: int = 0
    perturbation: float = 1e-2
    mode: int = 1
    jitter: float = 1e-4
    charge: float = -1.0
    mass: float = 1.0
    density: float = 1.0
    # mixture fit and codec
    k_max: int = 8
    tol: float = 1e-6
    max_iters: int = 1000
    annihilate: bool = True
    covariance_floor: float = 1e-10
    min_particles: int = 10
    solver_tol: float = 1e-12
    lemons: bool = True
    stratified: bool = True
    # outputs and schedules
    output_dir: str = "."
    diagnostics: str = "diagnostics.csv"
    checkpoint_at: tuple[float, ...] = ()
    phase_space_at: tuple[float, ...] = ()
    dump_at: tuple[float, ...] = ()
    phase_space_every: int = 0
    threads: int = 1

    def sim(self) -> SimConfig:
        names = {f.name for f in fields(SimConfig)}
        return SimConfig(**{k: getattr(self, k) for k in names})

    def fit(self) -> FitConfig:
        return FitConfig(self.k_max, self.tol, self.max_iters, self.annihilate,
                         self.covariance_floor, self.seed)

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else Path(self.output_dir) / p

    def set(self, key: str, value: str, line: int | None = None, source: str | None = None):
        """Parse and assign one setting."""
        key = key.strip().replace("-", "_")
        if key not in _KINDS:
            raise ConfigError(f"unknown key {key!r}", line, source)
        try:
            parsed = _KINDS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line, source) from None
        setattr(self, key, parsed)

    def validate(self) -> "RunConfig":
        try:
            self.sim()
            self.fit()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("threads", "phase_space_every", "min_particles"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.t_end < 0:
            raise ConfigError("t_end must be non-negative")
        return self


def _kind(f):
    if f.name in ("checkpoint_at", "phase_space_at", "dump_at"):
        return _times
    return {"float": _float, "int": int, "bool": _bool, "str": str}[f.type]


_KINDS = {f.name: _kind(f) for f in fields(RunConfig)}


def parse_config(text: str, source: str | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = line.split("=", 1)
        cfg.set(key, value.strip(), lineno, source)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` (for echoing the effective settings)."""
    out = []
    for name in _KINDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = " ".join(repr(t) for t in v) or "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{name} = {v}")
    return "\n".join(out) + "\n"
