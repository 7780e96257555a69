"""Compiled inner loops of the component-wise EM sweep.

Components are addressed through an ``alive`` mask so arrays never change
shape inside a fit.  Samples are (n, d) with weights already normalized to
sum to ``n_eff``.
"""
import numba
import numpy as np

LOG_2PI = np.log(2.0 * np.pi)
TINY = np.finfo(np.float64).tiny
OMEGA_MIN = 1e-200
# no nnan/ninf: the kernels rely on -inf for empty rows
_FM = {"afn", "contract", "arcp"}


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def log_pdf_column(v, mean, cov, out):
    n, d = v.shape
    chol = np.linalg.cholesky(cov)
    logdet = 0.0
    for i in range(d):
        logdet += 2.0 * np.log(chol[i, i])
    z = np.empty(d)
    for p in range(n):
        maha = 0.0
        for i in range(d):
            acc = v[p, i] - mean[i]
            for m in range(i):
                acc -= chol[i, m] * z[m]
            z[i] = acc / chol[i, i]
            maha += z[i] * z[i]
        out[p] = -0.5 * (maha + logdet + d * LOG_2PI)


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def floor_cov(cov, floor):
    d = cov.shape[0]
    if d == 1:
        if cov[0, 0] < floor:
            cov[0, 0] = floor
        return
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor:
        return
    for i in range(d):
        if vals[i] < floor:
            vals[i] = floor
    out = (vecs * vals) @ vecs.T
    for i in range(d):
        for j in range(d):
            cov[i, j] = 0.5 * (out[i, j] + out[j, i])


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def _row_lse(logw, logpdf, alive, p):
    top = -np.inf
    for k in range(logw.size):
        if alive[k]:
            x = logw[k] + logpdf[p, k]
            if x > top:
                top = x
    if top == -np.inf:
        return top
    s = 0.0
    for k in range(logw.size):
        if alive[k]:
            s += np.exp(logw[k] + logpdf[p, k] - top)
    return top + np.log(s)


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def _renormalize(omega, alive):
    s = 0.0
    for k in range(omega.size):
        if alive[k]:
            s += omega[k]
    for k in range(omega.size):
        omega[k] = omega[k] / s if alive[k] else 0.0


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def _flushed_exp(x):
    # subnormal terms are negligible in a row sum but very slow to multiply
    return np.exp(x) if x > -700.0 else 0.0


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def _shift_row(logpdf, alive, p, shift, terms):
    """Reset row p of ``terms`` to exp(logpdf - shift) with shift = row max."""
    top = -np.inf
    for k in range(alive.size):
        if alive[k] and logpdf[p, k] > top:
            top = logpdf[p, k]
    shift[p] = top
    for k in range(alive.size):
        terms[p, k] = _flushed_exp(logpdf[p, k] - top) if alive[k] else 0.0


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def _row_sum(omega, alive, terms, p):
    s = 0.0
    for k in range(omega.size):
        if alive[k]:
            s += omega[k] * terms[p, k]
    return s


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def sweep(v, a, n_eff, means, covs, omega, logpdf, alive, t_par, floor, annihilate):
    """One component-wise pass over alive components; returns annihilations.

    Row densities are kept as ``exp(shift_p) * sum_k omega_k terms_pk`` so a
    component update costs one exponential per sample.
    """
    n, d = v.shape
    kk = omega.size
    r = np.empty(n)
    shift = np.empty(n)
    terms = np.zeros((n, kk))
    total = np.empty(n)
    for p in range(n):
        _shift_row(logpdf, alive, p, shift, terms)
        total[p] = _row_sum(omega, alive, terms, p)
    killed = 0
    for j in range(kk):
        if not alive[j]:
            continue
        k_alive = 0
        for k in range(kk):
            if alive[k]:
                k_alive += 1
        wj = 0.0
        for p in range(n):
            r[p] = min(omega[j] * terms[p, j] / total[p], 1.0)
            wj += a[p] * r[p]
        if k_alive == 1:
            omega[j] = 1.0
        else:
            gain = wj - 0.5 * t_par
            rest = n_eff - wj - 0.5 * t_par * (k_alive - 1)
            if annihilate and gain <= 0.0:
                alive[j] = False
                omega[j] = 0.0
                _renormalize(omega, alive)
                killed += 1
                for p in range(n):
                    terms[p, j] = 0.0
                    total[p] = _row_sum(omega, alive, terms, p)
                    if not total[p] > 1e-250:
                        _shift_row(logpdf, alive, p, shift, terms)
                        total[p] = _row_sum(omega, alive, terms, p)
                continue
            if gain <= 0.0 or rest <= 0.0:
                # outside the concave regime: truncated update, then renormalize
                omega[j] = max(max(gain, 0.0) / n_eff, OMEGA_MIN)
            else:
                new = gain / (gain + rest)
                scale = (1.0 - new) / (1.0 - omega[j])
                for k in range(kk):
                    omega[k] *= scale
                omega[j] = new
            _renormalize(omega, alive)
        if wj > 0.0:
            mu = np.zeros(d)
            for p in range(n):
                w = a[p] * r[p]
                for i in range(d):
                    mu[i] += w * v[p, i]
            mu /= wj
            cov = np.zeros((d, d))
            diff = np.empty(d)
            for p in range(n):
                w = a[p] * r[p]
                for i in range(d):
                    diff[i] = v[p, i] - mu[i]
                for i in range(d):
                    for m in range(i + 1):
                        cov[i, m] += w * diff[i] * diff[m]
            for i in range(d):
                for m in range(i + 1):
                    cov[i, m] /= wj
                    cov[m, i] = cov[i, m]
            floor_cov(cov, floor)
            means[j] = mu
            covs[j] = cov
            col = np.empty(n)
            log_pdf_column(v, mu, cov, col)
            logpdf[:, j] = col
        for p in range(n):
            x = logpdf[p, j] - shift[p]
            if x > 600.0:
                _shift_row(logpdf, alive, p, shift, terms)
            else:
                terms[p, j] = _flushed_exp(x)
            total[p] = _row_sum(omega, alive, terms, p)
            if not total[p] > 1e-250:
                _shift_row(logpdf, alive, p, shift, terms)
                total[p] = _row_sum(omega, alive, terms, p)
    return killed


@numba.njit(cache=True, nogil=True, fastmath=_FM)
def log_likelihood(a, omega, logpdf, alive):
    logw = np.log(np.maximum(omega, TINY))
    total = 0.0
    for p in range(a.size):
        total += a[p] * _row_lse(logw, logpdf, alive, p)
    return total
