"""Gaussian mixture value types: densities, analytic moments and sampling.

Normal draws always come from ``numpy.random.Generator.standard_normal``
(the generator's native ziggurat sampler), so a seeded generator gives
bit-identical sample sequences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_SUM_ATOL = 1e-12


class InvalidCovarianceError(ValueError):
    """Covariance matrix is not symmetric positive definite."""


class InvalidMixtureError(ValueError):
    """Mixture weights or shapes violate the mixture invariants."""


def _cholesky(cov: np.ndarray) -> np.ndarray:
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
        raise InvalidCovarianceError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError("covariance is not positive definite") from exc


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InvalidCovarianceError(
                f"covariance shape {cov.shape} does not match dimension {mean.size}")
        if self.weight < 0:
            raise InvalidMixtureError(f"negative component weight {self.weight}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def cholesky(self) -> np.ndarray:
        return _cholesky(self.cov)


@dataclass(frozen=True)
class MixtureMoments:
    mass: float
    mean: np.ndarray
    cov: np.ndarray

    @property
    def energy(self) -> float:
        """Second raw moment per unit mass, trace(cov) + |mean|^2."""
        return float(np.trace(self.cov) + self.mean @ self.mean)

    def scaled(self, total_weight: float) -> "MixtureMoments":
        return MixtureMoments(self.mass * total_weight, self.mean, self.cov)


class GaussianMixture:
    """Convex combination of K Gaussians in D dimensions.

    Stored as stacked arrays: ``weights`` (K,), ``means`` (K, D) and
    ``covs`` (K, D, D).
    """

    def __init__(self, weights, means, covs):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.asarray(means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.asarray(covs, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        k = w.size
        if k < 1:
            raise InvalidMixtureError("a mixture needs at least one component")
        if mu.shape[0] != k or cov.shape != (k, mu.shape[1], mu.shape[1]):
            raise InvalidMixtureError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w <= 0):
            raise InvalidMixtureError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_ATOL:
            raise InvalidMixtureError(f"weights sum to {w.sum()!r}, not 1")
        self.weights = w
        self.means = mu
        self.covs = cov
        self._chol = None

    @classmethod
    def from_components(cls, components) -> "GaussianMixture":
        comps = list(components)
        return cls([c.weight for c in comps], [c.mean for c in comps], [c.cov for c in comps])

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(float(w), m, c)
                for w, m, c in zip(self.weights, self.means, self.covs)]

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            self._chol = np.stack([_cholesky(c) for c in self.covs])
        return self._chol

    def __repr__(self):
        return f"GaussianMixture(k={self.k}, dim={self.dim})"


def component_log_pdf(mean: np.ndarray, chol: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Log density of one Gaussian at rows of ``v`` given its Cholesky factor."""
    v = np.atleast_2d(v)
    d = mean.size
    if d == 1:
        sigma = chol[0, 0]
        z = (v[:, 0] - mean[0]) / sigma
        return -0.5 * z * z - np.log(sigma) - 0.5 * np.log(2.0 * np.pi)
    diff = v - mean
    z = np.linalg.solve(chol, diff.T)
    maha = np.einsum("ij,ij->j", z, z)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (maha + logdet + d * np.log(2.0 * np.pi))


def component_pdf(c: GaussianComponent, v) -> float:
    """Density of ``c`` at ``v``, ignoring the component weight."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size != c.dim:
        raise ValueError(f"point of dimension {v.size} for a {c.dim}-D component")
    return float(np.exp(component_log_pdf(c.mean, c.cholesky(), v[None, :])[0]))


def mixture_log_pdf(m: GaussianMixture, v) -> np.ndarray:
    """Log mixture density at each row of ``v`` (shape (n, D))."""
    v = np.asarray(v, dtype=float).reshape(-1, m.dim)
    chol = m.cholesky()
    logs = np.stack([np.log(w) + component_log_pdf(mu, L, v)
                     for w, mu, L in zip(m.weights, m.means, chol)], axis=1)
    top = logs.max(axis=1)
    return top + np.log(np.exp(logs - top[:, None]).sum(axis=1))


def mixture_pdf(m: GaussianMixture, v) -> float | np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.exp(mixture_log_pdf(m, v))
    if v.ndim <= 1 and out.size == 1:
        return float(out[0])
    return out


def mixture_moments(m: GaussianMixture) -> MixtureMoments:
    mean = m.weights @ m.means
    second = np.einsum("k,kij->ij", m.weights,
                       m.covs + np.einsum("ki,kj->kij", m.means, m.means))
    cov = second - np.outer(mean, mean)
    return MixtureMoments(1.0, mean, 0.5 * (cov + cov.T))


def sample_component(c: GaussianComponent, rng: np.random.Generator) -> np.ndarray:
    L = c.cholesky()
    return c.mean + L @ rng.standard_normal(c.dim)


def component_counts(weights, n: int) -> np.ndarray:
    """Split ``n`` draws over components in proportion to ``weights``.

    Largest-remainder rounding; ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=float)
    exact = weights * n
    counts = np.floor(exact).astype(np.int64)
    short = n - int(counts.sum())
    counts[np.argsort(counts - exact, kind="stable")[:short]] += 1
    return counts


def sample_mixture(m: GaussianMixture, n: int, rng: np.random.Generator,
                   stratified: bool = False) -> np.ndarray:
    """Draw ``n`` points; returns an (n, D) array.

    Component labels are drawn first (one uniform per draw), then one
    standard-normal vector per draw mapped through that component's
    Cholesky factor.  With ``stratified`` the label counts are fixed by
    :func:`component_counts` and only their order is random.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if n == 0:
        return np.empty((0, m.dim))
    chol = m.cholesky()
    if stratified:
        labels = rng.permutation(np.repeat(np.arange(m.k), component_counts(m.weights, n)))
    else:
        labels = rng.choice(m.k, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    return m.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
