import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from gmcr.codec import (GM, RAW, CellRecord, DegenerateSampleError, compress_cell,
                        decompress_cell, lemons_correct)
from gmcr.em import FitConfig
from gmcr.particles import Particles


def cell(rng, n, dim=1, bounds=(0.0, 0.2)):
    x = rng.uniform(*bounds, n)
    v = np.concatenate([rng.normal(-1.0, 0.1, (n // 2, dim)),
                        rng.normal(1.0, 0.2, (n - n // 2, dim))])
    return Particles(x, v, rng.uniform(0.5, 1.5, n))


def sums(v, a):
    v = np.asarray(v).reshape(len(a), -1)
    mass = math.fsum(a)
    mom = np.array([math.fsum(a * v[:, i]) for i in range(v.shape[1])])
    energy = math.fsum(a * (v ** 2).sum(axis=1))
    return mass, mom, energy


def assert_same_sums(p: Particles, q: Particles, rtol=1e-12):
    m0, p0, e0 = sums(p.v, p.alpha)
    m1, p1, e1 = sums(q.v, q.alpha)
    assert abs(m1 - m0) <= rtol * m0
    assert np.linalg.norm(p1 - p0) <= rtol * math.sqrt(m0 * e0)
    assert abs(e1 - e0) <= rtol * e0


def test_small_cell_is_raw_and_lossless():
    p = cell(np.random.default_rng(0), 5)
    rec, rep = compress_cell(p, 3, min_particles=10)
    assert rec.mode == RAW and rep is None and rec.count == 5
    out = decompress_cell(rec, (0.0, 0.2), np.random.default_rng(1))
    for a, b in [(p.x, out.x), (p.v, out.v), (p.alpha, out.alpha)]:
        assert a.tobytes() == b.tobytes()


def test_empty_cell_is_raw():
    rec, _ = compress_cell(Particles.empty(), 0)
    assert rec.mode == RAW and rec.count == 0
    assert len(decompress_cell(rec, (0.0, 1.0), np.random.default_rng(0))) == 0


def test_cold_two_beam_cell_is_modelled_exactly():
    rng = np.random.default_rng(2)
    v = np.concatenate([np.full(78, -0.866), np.full(78, 0.866)]) + 1e-3 * rng.normal(size=156)
    p = Particles(rng.uniform(0, 0.2, 156), v, np.full(156, 0.2 / 156))
    rec, rep = compress_cell(p, 0, FitConfig(k_max=8))
    assert rec.mode == GM and rec.k == 2
    t = rec.targets()
    m0, p0, e0 = sums(p.v, p.alpha)
    assert abs(t.mass - m0) <= 1e-12 * m0
    assert np.linalg.norm(t.momentum - p0) <= 1e-12 * math.sqrt(m0 * e0)
    assert abs(t.energy - e0) <= 1e-12 * e0


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_reconstruction_conserves(seed, dim):
    rng = np.random.default_rng(seed)
    p = cell(rng, int(rng.integers(11, 300)), dim)
    rec, _ = compress_cell(p, 0, FitConfig(k_max=4, seed=seed))
    q = decompress_cell(rec, (0.0, 0.2), np.random.default_rng(seed + 1))
    assert len(q) == len(p)
    assert_same_sums(p, q)


def test_full_covariance_mode_matches_second_moment_matrix():
    rng = np.random.default_rng(3)
    p = cell(rng, 200, dim=3)
    rec, _ = compress_cell(p, 0, FitConfig(k_max=4))
    q = decompress_cell(rec, (0.0, 0.2), rng, full_covariance=True)
    a = q.alpha
    second = np.einsum("p,pi,pj->ij", a, q.v, q.v)
    assert np.allclose(second, rec.targets().second, rtol=1e-12, atol=1e-13)


def test_decompressed_weights_are_uniform():
    p = cell(np.random.default_rng(4), 50)
    rec, _ = compress_cell(p, 0)
    q = decompress_cell(rec, (0.0, 0.2), np.random.default_rng(5))
    assert np.all(q.alpha == rec.total_weight / rec.count)


def test_positions_uniform_in_bounds():
    rng = np.random.default_rng(6)
    rec = CellRecord(GM, 0, 10_000, np.array([1.0]), np.array([[0.0]]), np.array([[[1.0]]]))
    lo, hi = 0.4, 0.6
    q = decompress_cell(rec, (lo, hi), rng)
    assert q.x.min() >= lo and q.x.max() < hi
    assert stats.kstest((q.x - lo) / (hi - lo), "uniform").pvalue > 0.01


def test_decompression_is_deterministic():
    p = cell(np.random.default_rng(7), 80)
    rec, _ = compress_cell(p, 0)
    a = decompress_cell(rec, (0.0, 0.2), np.random.default_rng(8))
    b = decompress_cell(rec, (0.0, 0.2), np.random.default_rng(8))
    assert a.x.tobytes() == b.x.tobytes() and a.v.tobytes() == b.v.tobytes()


def test_velocity_marginal_converges_to_mixture():
    rec = CellRecord(GM, 0, 0, np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]),
                     np.array([[[0.09]], [[0.04]]]))

    def cdf(x):
        return 0.5 * stats.norm.cdf(x, -1.0, 0.3) + 0.5 * stats.norm.cdf(x, 1.0, 0.2)

    dist = []
    for n in (400, 6400):
        rec.count = n
        ks = [stats.kstest(decompress_cell(rec, (0, 1), np.random.default_rng(s)).v[:, 0],
                           cdf).statistic for s in range(20)]
        dist.append(np.mean(ks))
    # 16x the particles: about 4x smaller distance
    assert 2.5 < dist[0] / dist[1] < 6.5


def test_lemons_identity_when_on_target():
    rng = np.random.default_rng(9)
    v = rng.normal(size=100)
    a = rng.uniform(0.5, 1.5, 100)
    out = lemons_correct(v, a, a @ v, a @ v ** 2)
    assert np.abs(out[:, 0] - v).max() <= 1e-15 * np.abs(v).max() * 10


def test_lemons_hand_examples():
    a = np.ones(2)
    # target mean 0, variance 4 -> energy sum 2 * 4
    assert lemons_correct([-1.0, 1.0], a, [0.0], 8.0)[:, 0] == pytest.approx([-2.0, 2.0])
    # target mean 1, variance 1 -> energy sum 2 * (1 + 1)
    assert lemons_correct([-1.0, 1.0], a, [2.0], 4.0)[:, 0] == pytest.approx([0.0, 2.0])


def test_lemons_degenerate_sample():
    with pytest.raises(DegenerateSampleError):
        lemons_correct([1.0, 1.0], np.ones(2), [2.0], 5.0)
    out = lemons_correct([1.0, 1.0], np.ones(2), [4.0], 8.0)
    assert np.all(out == 2.0)


def test_lemons_leaves_weights():
    a = np.array([1.0, 2.0, 3.0])
    a_copy = a.copy()
    lemons_correct([0.0, 1.0, 3.0], a, [1.0], 10.0)
    assert np.array_equal(a, a_copy)
