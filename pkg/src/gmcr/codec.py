"""Per-cell compression of particles into mixtures and reconstruction back.

GM-mode cells keep only the mixture; the stored component masses (weight
fraction times cell weight) carry the cell's total weight, and the
mixture's first and second moments are the exact momentum and energy
targets used by the Lemons correction at reconstruction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .em import FitConfig, FitReport, WeightedSampleSet, fit_adaptive
from .mixture import GaussianMixture, sample_mixture
from .particles import Particles

log = logging.getLogger(__name__)

GM = "gm"
RAW = "raw"
MIN_PARTICLES = 10
CONSERVATION_RTOL = 1e-12


class DegenerateSampleError(ValueError):
    """Sample spread is zero where the target needs a nonzero one."""


@dataclass(frozen=True)
class MomentTargets:
    mass: float
    momentum: np.ndarray
    second: np.ndarray  # sum of alpha v v^T

    @property
    def energy(self) -> float:
        return float(np.trace(self.second))

    @classmethod
    def of(cls, v: np.ndarray, alpha: np.ndarray) -> "MomentTargets":
        v = np.asarray(v, dtype=float).reshape(alpha.size, -1)
        return cls(float(alpha.sum()), alpha @ v, np.einsum("p,pi,pj->ij", alpha, v, v))


def moment_errors(ref: MomentTargets, got: MomentTargets, scale: float | None = None):
    """Relative (mass, momentum, energy) discrepancies.

    Momentum is measured against ``scale`` (default sqrt(mass * energy), the
    Cauchy-Schwarz bound on |momentum|) since the net momentum may vanish.
    """
    if scale is None:
        scale = np.sqrt(abs(ref.mass * ref.energy))
    mass = abs(got.mass - ref.mass) / abs(ref.mass) if ref.mass else abs(got.mass)
    mom = float(np.linalg.norm(got.momentum - ref.momentum)) / scale if scale else 0.0
    en = abs(got.energy - ref.energy) / abs(ref.energy) if ref.energy else abs(got.energy)
    return mass, mom, en


@dataclass
class CellRecord:
    mode: str
    cell_index: int
    count: int
    masses: np.ndarray | None = None
    means: np.ndarray | None = None
    covs: np.ndarray | None = None
    particles: Particles | None = None

    @property
    def k(self) -> int:
        return 0 if self.masses is None else self.masses.size

    @property
    def total_weight(self) -> float:
        if self.mode == GM:
            return float(self.masses.sum())
        return float(self.particles.alpha.sum())

    @property
    def mixture(self) -> GaussianMixture:
        if self.mode != GM:
            raise ValueError("RAW records carry no mixture")
        return GaussianMixture(self.masses / self.masses.sum(), self.means, self.covs)

    def targets(self) -> MomentTargets:
        """Exact (mass, momentum, second moment) this cell must reproduce."""
        if self.mode == RAW:
            return MomentTargets.of(self.particles.v, self.particles.alpha)
        mu = self.means
        second = np.einsum("k,kij->ij", self.masses,
                           self.covs + np.einsum("ki,kj->kij", mu, mu))
        return MomentTargets(self.total_weight, self.masses @ mu, second)

    def same_as(self, other: "CellRecord") -> bool:
        if (self.mode, self.cell_index, self.count) != (other.mode, other.cell_index, other.count):
            return False
        if self.mode == GM:
            return all(np.array_equal(a, b) for a, b in
                       [(self.masses, other.masses), (self.means, other.means),
                        (self.covs, other.covs)])
        p, q = self.particles, other.particles
        return all(np.array_equal(a, b) for a, b in [(p.x, q.x), (p.v, q.v), (p.alpha, q.alpha)])


def raw_record(cell_index: int, particles: Particles) -> CellRecord:
    return CellRecord(RAW, cell_index, len(particles), particles=particles.copy())


def compress_cell(particles: Particles, cell_index: int, cfg: FitConfig | None = None,
                  min_particles: int = MIN_PARTICLES):
    """Model one cell's velocities; returns (CellRecord, FitReport or None).

    Cells with ``min_particles`` or fewer particles are stored RAW, as are
    cells whose mixture still misses the moments (a single Gaussian of
    degenerate velocities, clamped by the covariance floor).
    """
    cfg = cfg or FitConfig()
    n = len(particles)
    if n <= max(min_particles, 1):
        return raw_record(cell_index, particles), None
    samples = WeightedSampleSet(particles.v, particles.alpha)
    mixture, report = fit_adaptive(samples, cfg)
    masses = mixture.weights * samples.total_weight
    record = CellRecord(GM, cell_index, n, masses, mixture.means, mixture.covs)
    errs = moment_errors(MomentTargets.of(particles.v, particles.alpha), record.targets())
    if max(errs) > CONSERVATION_RTOL:
        log.warning("cell %d: mixture misses moments by %s, storing RAW", cell_index, errs)
        return raw_record(cell_index, particles), report
    return record, report


def lemons_correct(v, alpha, target_momentum, target_energy=None, *,
                   target_second=None) -> np.ndarray:
    """Affine-map velocities to hit a weighted momentum and energy exactly.

    With ``target_energy`` (sum of alpha |v|^2) the map is a shift plus a
    uniform scaling.  With ``target_second`` (sum of alpha v v^T) the map is
    a shift plus ``L_t L_s^-1`` from Cholesky factors, matching the full
    covariance.  Weights are never touched.
    """
    alpha = np.asarray(alpha, dtype=float)
    v = np.asarray(v, dtype=float).reshape(alpha.size, -1)
    w = alpha.sum()
    mean_s = (alpha @ v) / w
    mean_t = np.asarray(target_momentum, dtype=float).reshape(-1) / w
    diff = v - mean_s
    if target_second is None:
        if target_energy is None:
            raise TypeError("need target_energy or target_second")
        var_t = target_energy / w - mean_t @ mean_t
        var_s = float(alpha @ (diff ** 2).sum(axis=1)) / w
        if var_t < 0:
            raise DegenerateSampleError(f"target energy below drift energy (variance {var_t})")
        if var_s == 0:
            if var_t == 0:
                return np.broadcast_to(mean_t, v.shape).copy()
            raise DegenerateSampleError("zero sample variance with nonzero target")
        return mean_t + np.sqrt(var_t / var_s) * diff
    cov_t = np.asarray(target_second, dtype=float) / w - np.outer(mean_t, mean_t)
    cov_s = np.einsum("p,pi,pj->ij", alpha, diff, diff) / w
    try:
        lt = np.linalg.cholesky(0.5 * (cov_t + cov_t.T))
        ls = np.linalg.cholesky(0.5 * (cov_s + cov_s.T))
    except np.linalg.LinAlgError as exc:
        raise DegenerateSampleError("covariance not positive definite") from exc
    a = lt @ np.linalg.inv(ls)
    return mean_t + diff @ a.T


def uniform_positions(n: int, bounds, rng: np.random.Generator) -> np.ndarray:
    lo, hi = bounds
    x = lo + (hi - lo) * rng.random(n)
    return np.minimum(x, np.nextafter(hi, lo))


def decompress_cell(record: CellRecord, bounds, rng: np.random.Generator,
                    lemons: bool = True, full_covariance: bool = False,
                    stratified: bool = True) -> Particles:
    """Rebuild a cell's particles.

    RAW records come back verbatim.  GM records yield ``count`` particles of
    equal weight with velocities drawn from the mixture (Lemons-corrected
    unless ``lemons`` is False) and positions uniform over ``bounds``.

    ``stratified`` fixes how many draws each component gets.  With purely
    random counts, a well-separated multi-beam cell ends up with a shifted
    sample mean, which the Lemons shift then spreads over every beam.
    """
    if record.mode == RAW:
        return record.particles.copy()
    n = record.count
    mixture = record.mixture
    alpha = np.full(n, record.total_weight / n)
    v = sample_mixture(mixture, n, rng, stratified=stratified)
    if lemons:
        t = record.targets()
        if full_covariance:
            v = lemons_correct(v, alpha, t.momentum, target_second=t.second)
        else:
            v = lemons_correct(v, alpha, t.momentum, t.energy)
    x = uniform_positions(n, bounds, rng)
    return Particles(x, v, alpha)
