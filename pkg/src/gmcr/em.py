"""Weighted, penalized, adaptive EM for Gaussian mixtures.

The fitter runs component-wise EM from ``k_max`` components, annihilating
any component whose responsibility mass drops below half the per-component
parameter count, and walks K down to 1 by forcibly removing the lightest
component after each convergence.  The best penalized score seen over the
descent wins, and the winner gets one plain EM pass so that its mass, mean
and second moment reproduce the weighted sample exactly.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _cem
from .mixture import GaussianMixture, component_log_pdf

log = logging.getLogger(__name__)


class InvalidSampleError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


@dataclass
class WeightedSampleSet:
    velocities: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.velocities, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        a = np.asarray(self.weights, dtype=float).reshape(-1)
        if v.shape[0] != a.size:
            raise InvalidSampleError(
                f"{v.shape[0]} velocities but {a.size} weights")
        if a.size < 1:
            raise InvalidSampleError("empty sample set")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a))):
            raise InvalidSampleError("non-finite velocity or weight")
        if np.any(a <= 0):
            raise InvalidSampleError("particle weights must be positive")
        self.velocities = v
        self.weights = a

    @classmethod
    def uniform(cls, velocities) -> "WeightedSampleSet":
        v = np.asarray(velocities, dtype=float)
        return cls(v, np.ones(v.shape[0]))

    @property
    def count(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.velocities.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def moments(self):
        """Weighted (mass, momentum, second-moment matrix) sums."""
        a, v = self.weights, self.velocities
        return a.sum(), a @ v, np.einsum("p,pi,pj->ij", a, v, v)

    def normalized(self) -> "WeightedSampleSet":
        """Same samples with weights rescaled to sum to the sample count."""
        return WeightedSampleSet(self.velocities, self.weights * (self.count / self.total_weight))


@dataclass
class FitConfig:
    k_max: int = 8
    tol: float = 1e-6
    max_iters: int = 1000
    # False disables spontaneous annihilation (components only leave through the K-descent).
    annihilate: bool = True
    covariance_floor: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class FitReport:
    final_k: int
    score: float
    em_iterations: int
    annihilations: int
    wall_seconds: float
    n_params: int
    params_per_component: int
    sweep_seconds: float = 0.0
    particles: int = 0
    # (K after the sweep, penalized score) for every sweep, in order
    history: list = field(default_factory=list, repr=False)

    @property
    def seconds_per_particle_iteration(self) -> float:
        """Sweep time per particle per EM iteration (setup and final pass excluded)."""
        return self.sweep_seconds / max(1, self.em_iterations * self.particles)


def params_per_component(dim: int) -> int:
    return dim * (dim + 3) // 2


def total_params(k: int, dim: int) -> int:
    return k * params_per_component(dim) + k - 1


def velocity_scale2(s: WeightedSampleSet) -> float:
    """Squared global velocity spread used to scale the covariance floor."""
    w = s.weights / s.total_weight
    mean = w @ s.velocities
    var = float(w @ ((s.velocities - mean) ** 2).sum(axis=1)) / s.dim
    if var > 0:
        return var
    return max(float(mean @ mean) / s.dim, 1.0)


def floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clamp eigenvalues below ``floor``; returns ``cov`` untouched if none are."""
    if cov.shape == (1, 1):
        return cov if cov[0, 0] >= floor else np.array([[floor]])
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return cov
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (out + out.T)


def _pass_needs_floor(s: WeightedSampleSet, m: GaussianMixture, floor: float) -> bool:
    """True if the conservation pass from ``m`` would clamp a covariance."""
    resp = e_step(s, m)
    for k in range(m.k):
        if s.weights @ resp[:, k] > 0:
            cov = _weighted_gaussian(s.velocities, s.weights, resp[:, k])[2]
            if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < floor:
                return True
    return False


def _log_joint(s: WeightedSampleSet, m: GaussianMixture) -> np.ndarray:
    chol = m.cholesky()
    return np.stack([np.log(w) + component_log_pdf(mu, L, s.velocities)
                     for w, mu, L in zip(m.weights, m.means, chol)], axis=1)


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    top = x.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return top + np.log(np.exp(x - top[:, None]).sum(axis=1))


def e_step(s: WeightedSampleSet, m: GaussianMixture) -> np.ndarray:
    """Responsibility table r[p, k], computed in the log domain."""
    if m.dim != s.dim:
        raise InvalidSampleError(f"{s.dim}-D samples against a {m.dim}-D mixture")
    logs = _log_joint(s, m)
    return np.exp(logs - _logsumexp_rows(logs)[:, None])


def _weighted_gaussian(v, a, r):
    """Responsibility-weighted (mass, mean, covariance) of the samples."""
    ar = a * r
    wk = ar.sum()
    mu = (ar @ v) / wk
    diff = v - mu
    cov = np.einsum("p,pi,pj->ij", ar, diff, diff) / wk
    return wk, mu, 0.5 * (cov + cov.T)


def m_step_standard(s: WeightedSampleSet, resp: np.ndarray,
                    covariance_floor: float = 1e-10) -> GaussianMixture:
    """Unpenalized M-step; components with zero responsibility mass are dropped."""
    resp = np.asarray(resp, dtype=float)
    floor = covariance_floor * velocity_scale2(s)
    masses, means, covs = [], [], []
    for k in range(resp.shape[1]):
        if not (s.weights @ resp[:, k]) > 0:
            continue
        wk, mu, cov = _weighted_gaussian(s.velocities, s.weights, resp[:, k])
        masses.append(wk)
        means.append(mu)
        covs.append(floor_covariance(cov, floor))
    masses = np.array(masses)
    return GaussianMixture(masses / masses.sum(), np.array(means), np.array(covs))


def m_step_penalized(s: WeightedSampleSet, resp: np.ndarray, n_par: int,
                     covariance_floor: float = 1e-10) -> GaussianMixture:
    """M-step of the penalized objective: weights truncate at ``n_par / 2``.

    Components whose responsibility mass does not exceed ``n_par / 2`` are
    annihilated.  If every component would be, the result is the single
    Gaussian of the weighted sample.
    """
    resp = np.asarray(resp, dtype=float)
    wk = s.weights @ resp
    keep = np.maximum(0.0, wk - 0.5 * n_par)
    if not keep.any():
        return m_step_standard(s, np.ones((s.count, 1)), covariance_floor)
    floor = covariance_floor * velocity_scale2(s)
    alive = np.flatnonzero(keep > 0)
    means, covs = [], []
    for k in alive:
        _, mu, cov = _weighted_gaussian(s.velocities, s.weights, resp[:, k])
        means.append(mu)
        covs.append(floor_covariance(cov, floor))
    w = keep[alive] / keep[alive].sum()
    return GaussianMixture(w, np.array(means), np.array(covs))


def mml_score(s: WeightedSampleSet, m: GaussianMixture) -> float:
    """Penalized log-likelihood with d = K*T + K - 1 and ln N on the raw count."""
    if np.any(m.weights <= 0):
        raise ValueError("annihilated components must be removed before scoring")
    logs = _log_joint(s, m)
    t = params_per_component(s.dim)
    d = total_params(m.k, s.dim)
    return float(s.weights @ _logsumexp_rows(logs)
                 - 0.5 * d * np.log(s.count)
                 - 0.5 * t * np.log(m.weights).sum())


def conservation_pass(s: WeightedSampleSet, m: GaussianMixture,
                      covariance_floor: float = 1e-10) -> GaussianMixture:
    """One plain EM iteration; restores exact mass/momentum/energy agreement."""
    return m_step_standard(s, e_step(s, m), covariance_floor)


def _initial_means(s: WeightedSampleSet, k: int, rng: np.random.Generator) -> np.ndarray:
    order = np.argsort(s.velocities[:, 0], kind="stable")
    edges = np.linspace(0, s.count, k + 1).astype(int)
    picks = [order[rng.integers(lo, hi)] for lo, hi in zip(edges[:-1], edges[1:])]
    return s.velocities[picks].copy()


class _ComponentwiseEM:
    """Working state for one adaptive fit; components leave via the alive mask."""

    def __init__(self, s: WeightedSampleSet, cfg: FitConfig):
        self.v = np.ascontiguousarray(s.velocities)
        self.a = np.ascontiguousarray(s.weights)
        self.n = s.count
        self.dim = s.dim
        self.t = params_per_component(self.dim)
        self.floor = cfg.covariance_floor * velocity_scale2(s)
        self.annihilate = cfg.annihilate
        rng = np.random.default_rng(cfg.seed)
        k = min(cfg.k_max, self.n)
        global_cov = _weighted_gaussian(self.v, self.a, np.ones(self.n))[2]
        global_cov = floor_covariance(global_cov, self.floor)
        self.means = _initial_means(s, k, rng)
        self.covs = np.repeat(global_cov[None], k, axis=0)
        self.omega = np.full(k, 1.0 / k)
        self.alive = np.ones(k, dtype=bool)
        self.logpdf = np.empty((self.n, k))
        col = np.empty(self.n)
        for j in range(k):
            _cem.log_pdf_column(self.v, self.means[j], self.covs[j], col)
            self.logpdf[:, j] = col

    @property
    def k(self) -> int:
        return int(self.alive.sum())

    def remove_lightest(self):
        j = np.flatnonzero(self.alive)[np.argmin(self.omega[self.alive])]
        self.alive[j] = False
        self.omega[j] = 0.0
        self.omega /= self.omega.sum()

    def sweep(self) -> int:
        """Update every live component once, in index order; returns annihilations."""
        return _cem.sweep(self.v, self.a, float(self.n), self.means, self.covs, self.omega,
                          self.logpdf, self.alive, float(self.t), self.floor, self.annihilate)

    def score(self) -> float:
        w = self.omega[self.alive]
        d = total_params(w.size, self.dim)
        return float(_cem.log_likelihood(self.a, self.omega, self.logpdf, self.alive)
                     - 0.5 * d * np.log(self.n)
                     - 0.5 * self.t * np.log(w).sum())

    def snapshot(self) -> GaussianMixture:
        live = self.alive
        w = self.omega[live]
        return GaussianMixture(w / w.sum(), self.means[live].copy(), self.covs[live].copy())


def fit_adaptive(s: WeightedSampleSet, cfg: FitConfig | None = None):
    """Fit a mixture with automatic choice of K; returns (mixture, FitReport).

    Particle weights are rescaled to sum to the sample count before fitting,
    so the penalty acts on effective particle numbers whatever the physical
    weight unit.  The returned mixture has already been through
    :func:`conservation_pass` with the caller's weights.
    """
    cfg = cfg or FitConfig()
    if s.count < 2:
        raise TooFewSamplesError(f"need at least 2 samples, got {s.count}")
    start = time.perf_counter()
    norm = s.normalized()
    em = _ComponentwiseEM(norm, cfg)
    history = []
    iterations = annihilations = stage_iters = 0
    prev = None
    best_score, best = -np.inf, None
    sweep_seconds = 0.0
    while True:
        tick = time.perf_counter()
        killed = em.sweep()
        sweep_seconds += time.perf_counter() - tick
        annihilations += killed
        iterations += 1
        stage_iters += 1
        score = em.score()
        history.append((em.k, score))
        converged = (not killed and prev is not None
                     and abs(score - prev) <= cfg.tol * abs(score))
        prev = score
        if not (converged or stage_iters >= cfg.max_iters):
            continue
        if score > best_score:
            best_score, best = score, em.snapshot()
        if em.k == 1:
            break
        em.remove_lightest()
        annihilations += 1
        stage_iters = 0
        prev = None
    floor = cfg.covariance_floor * velocity_scale2(s)
    while best.k > 1 and _pass_needs_floor(s, best, floor):
        # a floored covariance breaks the exact energy match; fold the
        # lightest component into the rest before the pass
        keep = np.sort(np.argsort(best.weights)[1:])
        w = best.weights[keep]
        best = GaussianMixture(w / w.sum(), best.means[keep], best.covs[keep])
    mixture = conservation_pass(s, best, cfg.covariance_floor)
    report = FitReport(
        final_k=mixture.k,
        score=mml_score(norm, mixture),
        em_iterations=iterations,
        annihilations=annihilations,
        wall_seconds=time.perf_counter() - start,
        sweep_seconds=sweep_seconds,
        n_params=total_params(mixture.k, s.dim),
        params_per_component=params_per_component(s.dim),
        particles=s.count,
        history=history,
    )
    log.debug("fit: N=%d K=%d iterations=%d", s.count, mixture.k, iterations)
    return mixture, report


def warm_up() -> None:
    """Load or compile the compiled sweep kernels so timings exclude it."""
    v = np.linspace(-1.0, 1.0, 16)
    fit_adaptive(WeightedSampleSet.uniform(v), FitConfig(k_max=2))
