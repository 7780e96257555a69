"""1D-1V periodic electrostatic PIC with an implicit, energy-conserving push.

Charge density lives on nodes (linear shapes), the electric field and the
current on cell centres.  Each step solves the Crank-Nicolson system

    x' = x + dt * vh,   vh = v + (q/2m) * sum_seg dtau_seg * E_half(cell_seg)
    E' = E - dt * (j - <j>),   j_c = sum_p q alpha_p l_pc / (dx dt)

by Picard iteration on E, where the orbit is split at cell faces into
segments of length ``l`` and duration ``dtau = l / vh``.  Each pass solves
every particle's vh for the current E_half.  Segment-wise deposition
satisfies discrete continuity exactly, and pairing the same segments with
``E_half`` in the push makes field plus kinetic energy conserved up to the
Picard tolerance.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, FitEcho, SpeciesCheckpoint
from .codec import DegenerateSampleError, compress_cell, decompress_cell, lemons_correct
from .em import FitConfig
from .gauss import deposit_charge, enforce_gauss
from .grid import Grid
from .particles import Particles

log = logging.getLogger(__name__)


class NonNeutralError(ValueError):
    pass


class StepFailure(RuntimeError):
    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(f"{message}; Picard change history {trace}")


@dataclass
class SimConfig:
    length: float = 2 * math.pi
    n_x: int = 32
    dt: float = 0.2
    ppc: int = 156
    v_beam: float = math.sqrt(3) / 2
    t_end: float = 20.0
    picard_tol: float = 1e-10
    picard_max: int = 100
    seed: int = 0
    # relative density modulation seeding the instability, and its mode number
    perturbation: float = 1e-2
    mode: int = 1
    # uniform position jitter, in units of dx
    jitter: float = 1e-4
    charge: float = -1.0
    mass: float = 1.0
    density: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.ppc < 1:
            raise ValueError("need at least one particle per cell")

    @property
    def grid(self) -> Grid:
        return Grid(self.n_x, self.length)


@dataclass
class Species:
    q: float
    m: float
    particles: Particles


@dataclass
class DiagRecord:
    step: int
    t: float
    field_energy: float
    gauss_rms: float
    continuity_rms: float
    d_energy: float
    kind: str = "step"

    FIELDS = ("step", "t", "E_E", "gauss_rms", "continuity_rms", "dE_total")

    def row(self):
        return (self.step, self.t, self.field_energy, self.gauss_rms,
                self.continuity_rms, self.d_energy)


@dataclass
class PICState:
    grid: Grid
    species: list[Species]
    efield: np.ndarray
    rho_background: np.ndarray
    dt: float
    step: int = 0
    time: float = 0.0
    picard_tol: float = 1e-10
    picard_max: int = 100
    seed: int = 0
    picard_iterations: int = 0
    particle_pushes: int = 0
    push_seconds: float = 0.0
    # checkpoint this state was rebuilt from, until the first step is taken
    source: object = field(default=None, repr=False)

    def total_energy(self) -> float:
        return field_energy(self.efield, self.grid) + kinetic_energy(self.species)

    def rho_species(self) -> list[np.ndarray]:
        return [deposit_charge(s.particles, self.grid, s.q) for s in self.species]

    def rho_total(self) -> np.ndarray:
        return sum(self.rho_species(), self.rho_background.copy())


def field_energy(efield, grid: Grid) -> float:
    return float(0.5 * grid.dx * (efield @ efield))


def kinetic_energy(species) -> float:
    return float(sum(0.5 * s.m * s.particles.second_moment() for s in species))


def field_solve(rho_total, grid: Grid) -> np.ndarray:
    """Cell-centred E with (E_c - E_{c-1})/dx = rho_c and zero mean."""
    rho_total = np.asarray(rho_total, dtype=float)
    net = rho_total.sum() * grid.dx
    scale = np.abs(rho_total).sum() * grid.dx
    # absolute 1e-12 in normalized units, relative once densities are large
    if abs(net) > 1e-12 * max(scale, 1.0):
        raise NonNeutralError(f"net charge {net:.3e} on a periodic domain")
    e = grid.dx * np.cumsum(rho_total)
    return e - e.mean()


def gauss_residual(efield, rho_total, grid: Grid) -> np.ndarray:
    return (efield - np.roll(efield, 1)) / grid.dx - rho_total


def rms(a) -> float:
    a = np.asarray(a)
    return float(np.sqrt(np.mean(a * a)))


def init_two_stream(cfg: SimConfig) -> PICState:
    """Two cold counter-streaming electron beams over an immobile ion background."""
    grid = cfg.grid
    per_beam = cfg.ppc // 2
    if cfg.ppc % 2:
        log.warning("odd particles-per-cell %d: using %d per beam", cfg.ppc, per_beam)
    n_beam = per_beam * grid.n
    rng = np.random.default_rng(cfg.seed)
    k = 2 * math.pi * cfg.mode / grid.length
    lattice = (np.arange(n_beam) + 0.5) * (grid.length / n_beam)
    # seed the growing eigenmode only: displacement xi and velocity d(xi)/dt per beam
    omega_p2 = cfg.density * cfg.charge ** 2 / cfg.mass
    omega = 1j * two_stream_growth_rate(cfg.v_beam, k, math.sqrt(omega_p2))
    xs, vs = [], []
    for sign in (1.0, -1.0):
        doppler = k * sign * cfg.v_beam - omega
        # no unstable mode to seed (e.g. v_b = 0): start unperturbed
        xi_hat = -1.0 / doppler ** 2 if doppler != 0 else 0.0
        phase = np.exp(1j * k * lattice)
        norm = cfg.perturbation / (k * abs(xi_hat)) if cfg.perturbation and xi_hat else 0.0
        x = lattice + norm * np.real(xi_hat * phase)
        x = x + cfg.jitter * grid.dx * rng.uniform(-1.0, 1.0, n_beam)
        xs.append(grid.wrap(x))
        vs.append(sign * cfg.v_beam + norm * np.real(1j * doppler * xi_hat * phase))
    n_total = 2 * n_beam
    alpha = np.full(n_total, cfg.density * grid.length / n_total)
    electrons = Species(cfg.charge, cfg.mass,
                        Particles(np.concatenate(xs), np.concatenate(vs), alpha))
    background = np.full(grid.n, -cfg.charge * alpha.sum() / grid.length)
    state = PICState(grid, [electrons], np.zeros(grid.n), background, cfg.dt,
                     picard_tol=cfg.picard_tol, picard_max=cfg.picard_max, seed=cfg.seed)
    state.efield = field_solve(state.rho_total(), grid)
    return state


@dataclass
class _Orbit:
    """Cell-face segments of one species' straight-line orbits."""

    particle: list
    cell: list
    length: list
    duration: list
    x_end: np.ndarray


def _trace_orbits(x0, vh, dt, grid: Grid) -> _Orbit:
    n = grid.n
    dx = grid.dx
    x_end = x0 + vh * dt
    cell = np.minimum((x0 / dx).astype(np.int64), n - 1)
    idx = np.arange(x0.size)
    xs = x0.copy()
    t_left = np.full(x0.size, dt)
    seg_p, seg_c, seg_l, seg_t = [], [], [], []
    while idx.size:
        v = vh[idx]
        xe = x_end[idx]
        c = cell
        right = (c + 1) * dx
        left = c * dx
        last = np.where(v > 0, xe <= right, np.where(v < 0, xe >= left, True))
        stop = np.where(last, xe, np.where(v > 0, right, left))
        ell = stop - xs
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = np.where(last, t_left, ell / v)
        seg_p.append(idx)
        seg_c.append(c % n)
        seg_l.append(ell)
        seg_t.append(tau)
        more = ~last
        idx = idx[more]
        xs = stop[more]
        t_left = t_left[more] - tau[more]
        cell = c[more] + np.where(v[more] > 0, 1, -1)
    return _Orbit(seg_p, seg_c, seg_l, seg_t, grid.wrap(x_end))


def _current(orbit: _Orbit, q, alpha, dt, grid: Grid) -> np.ndarray:
    j = np.zeros(grid.n)
    for p, c, ell in zip(orbit.particle, orbit.cell, orbit.length):
        j += np.bincount(c, weights=alpha[p] * ell, minlength=grid.n)
    return j * (q / (grid.dx * dt))


def _impulse(orbit: _Orbit, e_half, size) -> np.ndarray:
    out = np.zeros(size)
    for p, c, tau in zip(orbit.particle, orbit.cell, orbit.duration):
        np.add.at(out, p, tau * e_half[c])
    return out


def _half_velocity(x0, v, qm, e_half, dt, grid: Grid, guess, fixed_iters: int = 6):
    """Solve vh = v + (qm/2) * int_0^dt E_half(x0 + vh t) dt per particle.

    Plain fixed-point iteration handles almost every particle.  Slow particles
    that cross a face where E jumps may not contract; those are bisected
    inside the bracket |vh - v| <= (|qm|/2) dt max|E|, where the residual
    changes sign.
    """
    c = 0.5 * qm
    scale = max(np.abs(v).max() if v.size else 0.0, abs(c) * dt * np.abs(e_half).max(), 1e-300)
    tol = 1e-14 * scale
    vh = guess.copy()
    pushes = 0
    todo = np.arange(v.size)
    for _ in range(fixed_iters):
        orbit = _trace_orbits(x0[todo], vh[todo], dt, grid)
        pushes += todo.size
        new = v[todo] + c * _impulse(orbit, e_half, todo.size)
        moved = np.abs(new - vh[todo]) > tol
        vh[todo] = new
        todo = todo[moved]
        if not todo.size:
            return vh, pushes
    half = abs(c) * dt * np.abs(e_half).max() * (1.0 + 1e-12) + tol
    lo, hi = v[todo] - half, v[todo] + half
    while True:
        mid = 0.5 * (lo + hi)
        orbit = _trace_orbits(x0[todo], mid, dt, grid)
        pushes += todo.size
        g = mid - v[todo] - c * _impulse(orbit, e_half, todo.size)
        lo = np.where(g < 0, mid, lo)
        hi = np.where(g < 0, hi, mid)
        if np.all(hi - lo <= tol):
            break
    vh[todo] = 0.5 * (lo + hi)
    return vh, pushes


def step_implicit(state: PICState) -> DiagRecord:
    """Advance one time step in place and return its diagnostics."""
    grid, dt = state.grid, state.dt
    start = time.perf_counter()
    e_old = state.efield
    rho_old = state.rho_species()
    energy_old = state.total_energy()
    parts = [s.particles for s in state.species]
    vh = [p.v[:, 0].copy() for p in parts]
    e_half = e_old.copy()
    e_new = e_old.copy()
    # field of a full charge separation; changes below 10 ulp of it are round-off
    e_scale = grid.length * max(np.abs(state.rho_background).max(), 1e-300)
    atol = 1e-8 * e_scale
    floor = 10 * np.finfo(float).eps * e_scale * math.sqrt(grid.n)
    trace = []
    pushes = 0
    for iteration in range(1, state.picard_max + 1):
        orbits = []
        for k, (s, p) in enumerate(zip(state.species, parts)):
            vh[k], n = _half_velocity(p.x, p.v[:, 0], s.q / s.m, e_half, dt, grid, vh[k])
            pushes += n
            orbits.append(_trace_orbits(p.x, vh[k], dt, grid))
        j = sum(_current(o, s.q, p.alpha, dt, grid)
                for o, s, p in zip(orbits, state.species, parts))
        e_next = e_old - dt * (j - j.mean())
        change = np.linalg.norm(e_next - e_new)
        de = change / max(np.linalg.norm(e_next), atol)
        trace.append(float(de))
        e_new = e_next
        e_half = 0.5 * (e_old + e_next)
        if de <= state.picard_tol or change <= floor:
            break
    else:
        raise StepFailure(f"Picard did not converge in {state.picard_max} iterations",
                          trace)
    for s, o, u in zip(state.species, orbits, vh):
        p = s.particles
        p.x = o.x_end
        p.v = (2.0 * u - p.v[:, 0])[:, None]
    state.efield = e_new
    state.step += 1
    state.time = state.step * dt
    state.picard_iterations += iteration
    state.particle_pushes += pushes
    state.push_seconds += time.perf_counter() - start
    state.source = None
    rho_new = state.rho_species()
    div_j = (j - np.roll(j, 1)) / grid.dx
    continuity = sum(rho_new) - sum(rho_old)
    rho_total = sum(rho_new, state.rho_background.copy())
    return DiagRecord(
        state.step, state.time, field_energy(e_new, grid),
        rms(gauss_residual(e_new, rho_total, grid)),
        rms(continuity / dt + div_j),
        state.total_energy() - energy_old)


def initial_record(state: PICState) -> DiagRecord:
    return DiagRecord(state.step, state.time, field_energy(state.efield, state.grid),
                      rms(gauss_residual(state.efield, state.rho_total(), state.grid)),
                      0.0, 0.0, kind="init")


def push_cost(state: PICState) -> float:
    """Measured seconds per particle push (one Picard pass of one particle)."""
    return state.push_seconds / max(state.particle_pushes, 1)


def two_stream_growth_rate(v_beam: float, k: float, omega_p: float = 1.0) -> float:
    """Largest growth rate of 1 = (wp^2/2) [(w - k vb)^-2 + (w + k vb)^-2]."""
    a2 = (k * v_beam) ** 2
    roots = np.roots([1.0, 0.0, -(2 * a2 + omega_p ** 2), 0.0, a2 * a2 - omega_p ** 2 * a2])
    return float(max(roots.imag.max(), 0.0))


def fit_growth_rate(times, field_energy_values, t_min: float, t_max: float) -> float:
    """Amplitude growth rate from a log-linear fit of field energy on [t_min, t_max]."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(field_energy_values, dtype=float)
    sel = (t >= t_min - 1e-9) & (t <= t_max + 1e-9) & (e > 0)
    slope = np.polyfit(t[sel], np.log(e[sel]), 1)[0]
    return 0.5 * slope


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _cell_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def checkpoint_now(state: PICState, fit: FitConfig | None = None, min_particles: int = 10,
                   solver_tol: float = 1e-12, threads: int = 1):
    """Compress every cell of every species; returns (Checkpoint, fit reports).

    A state rebuilt by :func:`restart_from` that has not been stepped yet
    hands back its source records, so re-checkpointing is lossless.
    """
    fit = fit or FitConfig()
    grid = state.grid
    echo = FitEcho(fit.k_max, fit.max_iters, fit.tol, fit.covariance_floor,
                   solver_tol, min_particles)
    if isinstance(state.source, Checkpoint):
        src = state.source
        return Checkpoint(grid, state.time, state.step, state.dt, src.species, state.efield.copy(),
                          state.rho_background.copy(), seed=state.seed,
                          picard_tol=state.picard_tol, fit=src.fit), []
    species, reports = [], []
    for si, sp in enumerate(state.species):
        p = sp.particles
        order = np.argsort(grid.cell_of(p.x), kind="stable")
        edges = np.searchsorted(grid.cell_of(p.x)[order], np.arange(grid.n + 1))

        def one(c, si=si, p=p, order=order, edges=edges):
            cfg = replace(fit, seed=_cell_seed(state.seed, si, c))
            return compress_cell(p.take(order[edges[c]:edges[c + 1]]), c, cfg, min_particles)

        out = _map(one, range(grid.n), threads)
        records = [r for r, _ in out]
        reports.extend(rep for _, rep in out if rep is not None)
        rho = deposit_charge(p, grid, sp.q)
        species.append(SpeciesCheckpoint(sp.q, sp.m, rho, records))
    ckpt = Checkpoint(grid, state.time, state.step, state.dt, species, state.efield.copy(),
                      state.rho_background.copy(), seed=state.seed,
                      picard_tol=state.picard_tol, fit=echo)
    return ckpt, reports


def _final_lemons(particles: Particles, records, grid: Grid) -> Particles:
    """Restore each cell's checkpointed momentum and energy with the corrected weights."""
    cells = grid.cell_of(particles.x)
    v = particles.v.copy()
    for rec in records:
        idx = np.flatnonzero(cells == rec.cell_index)
        if idx.size < 2:
            continue
        t = rec.targets()
        try:
            v[idx] = lemons_correct(v[idx], particles.alpha[idx], t.momentum, t.energy)
        except DegenerateSampleError as exc:
            log.warning("cell %d: final Lemons pass skipped (%s)", rec.cell_index, exc)
    return Particles(particles.x, v, particles.alpha)


def restart_from(ckpt: Checkpoint, lemons: bool = True, seed: int | None = None,
                 picard_max: int = 100, threads: int = 1, stratified: bool = True) -> PICState:
    """Rebuild a simulation state from a checkpoint.

    Cells are sampled from their mixtures, weights are corrected so the
    deposited charge equals the checkpointed one, and with ``lemons`` a
    last shift-and-scale per cell restores the stored momentum and energy.
    """
    grid = ckpt.grid
    seed = ckpt.seed if seed is None else seed
    species = []
    for si, sc in enumerate(ckpt.species):
        def one(rec, si=si):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, si, rec.cell_index]))
            return decompress_cell(rec, grid.cell_bounds(rec.cell_index), rng, lemons=lemons,
                                  stratified=stratified)

        parts = Particles.concatenate(_map(one, sc.records, threads), dim=ckpt.dim)
        corrected = enforce_gauss(parts, sc.rho_target, grid, sc.q,
                                  solver_tol=ckpt.fit.solver_tol).particles
        if lemons:
            corrected = _final_lemons(corrected, sc.records, grid)
        species.append(Species(sc.q, sc.m, corrected))
    state = PICState(grid, species, ckpt.efield.copy(), ckpt.rho_background.copy(), ckpt.dt,
                     step=ckpt.step, time=ckpt.time, picard_tol=ckpt.picard_tol,
                     picard_max=picard_max, seed=seed, source=ckpt)
    rho = state.rho_total()
    scale = max(np.abs(rho).max(), 1e-300)
    mismatch = rms(gauss_residual(state.efield, rho, grid)) / scale
    if mismatch > 1e-10:
        log.info("stored field inconsistent with restored charge (rel. rms %.2e); re-solving",
                 mismatch)
        state.efield = field_solve(rho, grid)
    return state


def checkpoint_energy(ckpt: Checkpoint) -> float:
    """Field plus kinetic energy implied by the checkpoint's stored moments."""
    kinetic = sum(0.5 * sc.m * rec.targets().energy
                  for sc in ckpt.species for rec in sc.records if rec.count)
    return field_energy(ckpt.efield, ckpt.grid) + kinetic


def restart_record(state: PICState, ckpt: Checkpoint) -> DiagRecord:
    """Diagnostics across the restart itself.

    ``d_energy`` compares the rebuilt state with the checkpointed moments and
    ``continuity_rms`` is the charge change over one step interval.
    """
    rho_ckpt = sum((sc.rho_target for sc in ckpt.species), np.zeros(state.grid.n))
    rho_new = sum(state.rho_species())
    return DiagRecord(state.step, state.time, field_energy(state.efield, state.grid),
                      rms(gauss_residual(state.efield, state.rho_total(), state.grid)),
                      rms((rho_new - rho_ckpt) / state.dt),
                      state.total_energy() - checkpoint_energy(ckpt), kind="restart")


def steps_until(state: PICState, t_end: float) -> int:
    return max(int(round((t_end - state.time) / state.dt)), 0)
