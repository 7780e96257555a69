"""Charge deposition and mass-matrix charge correction.

After a restart the reconstructed particles deposit a slightly different
charge density than the checkpointed one.  ``enforce_gauss`` rescales each
particle's weight by ``1 + sum_g S_g(x_p) lambda_g`` where ``lambda`` solves
``q M lambda = rho_target - rho``, with ``M_gh = sum_p alpha_p S_g S_h / dx``
the weighted mass matrix.  The deposited density then equals the target to
round-off while positions and velocities are left alone.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .grid import Grid
from .particles import Particles

log = logging.getLogger(__name__)


class InvalidParticleError(ValueError):
    pass


class UncorrectableNodeError(RuntimeError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"no particle support at nodes {self.nodes}")


class GaussEnforcementError(RuntimeError):
    pass


@dataclass(frozen=True)
class DepositionScheme:
    order: int = 1

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError(f"unsupported shape order {self.order}")

    @property
    def support(self) -> int:
        return self.order + 1


CIC = DepositionScheme(1)


def shape_weights(x, grid: Grid, scheme: DepositionScheme = CIC):
    """Node indices and shape values, each of shape (n, support)."""
    x = np.asarray(x, dtype=float)
    if x.size and (x.min() < 0 or x.max() >= grid.length or not np.all(np.isfinite(x))):
        raise InvalidParticleError("particle position outside [0, L)")
    s = x / grid.dx
    if scheme.order == 1:
        c = np.minimum(s.astype(np.int64), grid.n - 1)
        f = s - c
        idx = np.stack([c, (c + 1) % grid.n], axis=1)
        w = np.stack([1.0 - f, f], axis=1)
    else:
        i = np.floor(s + 0.5).astype(np.int64)
        d = s - i
        idx = np.stack([i - 1, i, i + 1], axis=1) % grid.n
        w = np.stack([0.5 * (0.5 - d) ** 2, 0.75 - d * d, 0.5 * (0.5 + d) ** 2], axis=1)
    return idx, w


def deposit_charge(particles: Particles, grid: Grid, q: float = 1.0,
                   scheme: DepositionScheme = CIC) -> np.ndarray:
    """Nodal charge density (q/dx) sum_p alpha_p S(x_p - X_g)."""
    idx, w = shape_weights(particles.x, grid, scheme)
    contrib = particles.alpha[:, None] * w
    rho = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=grid.n)
    return rho * (q / grid.dx)


def mass_matrix(particles: Particles, grid: Grid, scheme: DepositionScheme = CIC):
    """Sparse symmetric M_gh = sum_p alpha_p S_g S_h / dx (CSR)."""
    idx, w = shape_weights(particles.x, grid, scheme)
    s = scheme.support
    rows = np.repeat(idx, s, axis=1).ravel()
    cols = np.tile(idx, (1, s)).ravel()
    vals = (particles.alpha[:, None, None] * w[:, :, None] * w[:, None, :]).ravel() / grid.dx
    return scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(grid.n, grid.n)).tocsr()


def solve_cyclic_tridiagonal(lower, diag, upper, rhs) -> np.ndarray:
    """Solve a periodic tridiagonal system.

    Row i reads ``lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]``
    with indices taken modulo n, so ``lower[0]`` and ``upper[-1]`` are the
    corner entries.  Sherman-Morrison on top of a banded LU solve.
    """
    lower, diag, upper, rhs = (np.asarray(a, dtype=float) for a in (lower, diag, upper, rhs))
    n = diag.size
    if n < 3:
        dense = np.diag(diag)
        for i in range(n):
            dense[i, (i - 1) % n] += lower[i]
            dense[i, (i + 1) % n] += upper[i]
        return np.linalg.solve(dense, rhs)
    alpha, beta = upper[-1], lower[0]
    gamma = -diag[0]
    d = diag.copy()
    d[0] -= gamma
    d[-1] -= alpha * beta / gamma
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = d
    ab[2, :-1] = lower[1:]
    u = np.zeros(n)
    u[0], u[-1] = gamma, alpha
    y, z = scipy.linalg.solve_banded((1, 1), ab, np.stack([rhs, u], axis=1)).T
    factor = (y[0] + beta * y[-1] / gamma) / (1.0 + z[0] + beta * z[-1] / gamma)
    return y - factor * z


def _solve(m, rhs, scheme, solver_tol):
    diag = m.diagonal()
    empty = diag <= 0
    if empty.any():
        # unsupported nodes are fine as long as nothing has to change there
        bad = np.flatnonzero(empty & (rhs != 0))
        if bad.size:
            raise UncorrectableNodeError(bad.tolist())
        keep = np.flatnonzero(~empty)
        lam = np.zeros(rhs.size)
        sub = m[keep][:, keep].tocsc()
        lam[keep] = np.atleast_1d(scipy.sparse.linalg.spsolve(sub, rhs[keep]))
        return lam
    n = rhs.size
    if scheme.order == 1 and n >= 3:
        rows = np.arange(n)
        upper = np.asarray(m[rows, (rows + 1) % n]).ravel()
        lower = np.roll(upper, 1)
        return solve_cyclic_tridiagonal(lower, diag, upper, rhs)
    if n < 4:
        return np.linalg.solve(m.toarray(), rhs)
    lam, info = scipy.sparse.linalg.cg(m, rhs, rtol=solver_tol, atol=0.0, maxiter=10 * n)
    if info != 0:
        raise GaussEnforcementError(f"CG did not converge (info={info})")
    return lam


@dataclass
class GaussResult:
    particles: Particles
    lam: np.ndarray
    residual: float
    negative_weights: int


def charge_residual(rho, rho_target) -> float:
    scale = np.abs(rho_target).max()
    diff = np.abs(np.asarray(rho) - rho_target).max()
    return float(diff / scale) if scale else float(diff)


def enforce_gauss(particles: Particles, rho_target, grid: Grid, q: float = 1.0,
                  scheme: DepositionScheme = CIC, solver_tol: float = 1e-12,
                  max_refinements: int = 3) -> GaussResult:
    """Adjust particle weights so the deposited density matches ``rho_target``.

    Raises :class:`UncorrectableNodeError` when a node whose density must
    change has no particle support, and :class:`GaussEnforcementError`
    when more than 1% of the particles would need a weight change larger
    than their weight.
    """
    rho_target = np.asarray(rho_target, dtype=float)
    if rho_target.shape != (grid.n,):
        raise ValueError(f"target density has shape {rho_target.shape}, grid has {grid.n} nodes")
    idx, w = shape_weights(particles.x, grid, scheme)
    alpha = particles.alpha.copy()
    total = np.zeros(grid.n)
    rho = deposit_charge(particles, grid, q, scheme)
    residual = charge_residual(rho, rho_target)
    rel = np.zeros(alpha.size)
    for it in range(max_refinements + 1):
        if not np.any(rho_target - rho) or (it > 0 and residual <= solver_tol):
            break
        current = Particles(particles.x, particles.v, alpha)
        lam = _solve(mass_matrix(current, grid, scheme), (rho_target - rho) / q,
                     scheme, solver_tol)
        step = (w * lam[idx]).sum(axis=1)
        rel = (1.0 + rel) * (1.0 + step) - 1.0
        alpha = alpha * (1.0 + step)
        total += lam
        rho = deposit_charge(Particles(particles.x, particles.v, alpha), grid, q, scheme)
        residual = charge_residual(rho, rho_target)
    big = np.count_nonzero(np.abs(rel) > 1.0)
    if big > 0.01 * alpha.size:
        raise GaussEnforcementError(
            f"{big} of {alpha.size} particles need weight changes larger than their weight")
    negative = int(np.count_nonzero(alpha < 0))
    if negative:
        warnings.warn(f"{negative} particles have negative weight after charge correction")
    return GaussResult(Particles(particles.x.copy(), particles.v.copy(), alpha),
                       total, residual, negative)
