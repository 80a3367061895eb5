import math

import numpy as np
import pytest
from scipy import integrate, stats

from cpexact.laplace import (
    LaplaceBank,
    lap_abs_moment,
    lap_central_moments,
    lap_energy_expectation,
    lap_insert,
    lap_log_partition,
    lap_mode,
    lap_moment,
    lap_observe,
    lap_sample_height,
    make_state,
    prior_state,
    segment_state,
)
from cpexact.model import LaplaceMedian, ModelError

FIVE = ([-7.0, -5.0, 0.0, 1.2, 1.3], [1.0] * 5)


def energy(z, w):
    z = np.asarray(z)
    w = np.asarray(w)
    return lambda x: float(np.sum(w * np.abs(x - z)))


def quad_expect(z, w, f=lambda x: 1.0):
    e = energy(z, w)
    pts = sorted(set(z))
    edges = list(zip([-np.inf] + pts, pts + [np.inf]))
    s = min(e(x) for x in pts)
    val = sum(integrate.quad(lambda x: f(x) * math.exp(-e(x) + s), a, b, epsabs=0, epsrel=1e-13, limit=200)[0]
              for a, b in edges)
    return val, s


def test_single_breakpoint_partition():
    st = prior_state(LaplaceMedian(mu=0.3, tau=2.5))
    assert lap_log_partition(st) == pytest.approx(math.log(5.0))


def test_two_breakpoints_closed_form():
    a = 1.7
    st = make_state([0.0, a])
    assert math.exp(lap_log_partition(st)) == pytest.approx(math.exp(-a) * (1 + a), rel=1e-13)


def test_five_point_partition_vs_quadrature():
    st = make_state(*FIVE)
    val, s = quad_expect(*FIVE)
    assert lap_log_partition(st) == pytest.approx(math.log(val) - s, rel=1e-10)


def test_insert_prior_example():
    st = prior_state(LaplaceMedian(0.0, 1.0, 1.0))
    new, lp = lap_observe(st, 0.0, LaplaceMedian(0.0, 1.0, 1.0))
    assert lp == pytest.approx(math.log(0.25))
    assert math.exp(new.log_z) == pytest.approx(1.0)


def test_predictives_telescope_to_segment_likelihood():
    fam = LaplaceMedian(0.5, 2.0, 0.7)
    y = [0.1, 1.3, -0.4, 0.9]
    st = prior_state(fam)
    total = 0.0
    for v in y:
        st, lp = lap_observe(st, v, fam)
        total += lp

    def joint(x):
        return stats.laplace(fam.mu, fam.tau).pdf(x) * np.prod(stats.laplace(x, fam.sigma).pdf(y))

    pts = sorted([fam.mu] + y)
    edges = list(zip([-np.inf] + pts, pts + [np.inf]))
    ref = sum(integrate.quad(joint, a, b, epsabs=0, epsrel=1e-12)[0] for a, b in edges)
    assert total == pytest.approx(math.log(ref), rel=1e-10)


def test_symmetric_state_has_zero_mean():
    st = make_state([-2.0, 2.0])
    assert abs(lap_moment(st, 1)) < 1e-14
    assert abs(lap_moment(st, 3)) < 1e-13


def test_abs_moment_cases():
    st = make_state([0.0])
    assert lap_abs_moment(st, 0.0) == pytest.approx(1.0)
    assert lap_energy_expectation(st) == pytest.approx(1.0)
    st2 = make_state([-1.0, 1.0], [0.5, 2.0])
    c = 60.0
    assert lap_abs_moment(st2, c) == pytest.approx(c - lap_moment(st2, 1), rel=1e-12)


def test_stabilizer_shift_invariance():
    st = make_state(*FIVE)
    base = lap_log_partition(st)
    for shift in (-30.0, 5.0, 200.0):
        assert lap_log_partition(st, shift) == pytest.approx(base, abs=1e-12)


def test_central_moments_agree_with_raw():
    rng = np.random.default_rng(8)
    for _ in range(20):
        k = int(rng.integers(1, 12))
        st = make_state(rng.normal(0, 2, k), 1 / rng.uniform(0.2, 3, k))
        m1, m2, m3 = (lap_moment(st, m) for m in (1, 2, 3))
        mean, var, c3 = lap_central_moments(st)
        assert mean == pytest.approx(m1, abs=1e-12 * max(1, abs(m1)))
        assert var == pytest.approx(m2 - m1 * m1, rel=1e-8)
        ref, s = quad_expect(st.z.tolist(), st.w.tolist(), lambda x: (x - m1) ** 3)
        z0, _ = quad_expect(st.z.tolist(), st.w.tolist())
        assert c3 == pytest.approx(ref / z0, abs=1e-8 * var**1.5)


def test_mode_is_weighted_median_grid_search():
    rng = np.random.default_rng(9)
    for _ in range(20):
        k = int(rng.integers(1, 10))
        z = rng.normal(0, 3, k)
        w = 1 / rng.uniform(0.2, 3, k)
        st = make_state(z, w)
        e = energy(z, w)
        grid = np.linspace(z.min() - 1, z.max() + 1, 20001)
        best = min(e(x) for x in grid)
        assert e(lap_mode(st)) <= best + 1e-9


def test_sampler_matches_distribution():
    rng = np.random.default_rng(10)
    st = make_state([0.0])
    d = lap_sample_height(st, rng, 100_000)
    assert abs(d.mean()) < 3 * math.sqrt(2 / d.size)
    st5 = make_state(*FIVE)
    d5 = lap_sample_height(st5, rng, 100_000)
    mean, var, _ = lap_central_moments(st5)
    z0, s = quad_expect(*FIVE)
    grid = np.linspace(-12, 6, 400)
    cdf = np.array([quad_expect(*FIVE, lambda x, g=g: float(x <= g))[0] for g in grid]) / z0
    emp = np.searchsorted(np.sort(d5), grid, side="right") / d5.size
    assert np.max(np.abs(emp - cdf)) < 0.01
    # sample sd within 3 standard errors of the exact sd
    m4 = quad_expect(*FIVE, lambda x: (x - mean) ** 4)[0] / z0
    se_var = math.sqrt((m4 - var**2) / d5.size)
    assert abs(d5.var() - var) < 3 * se_var


def test_bank_matches_direct_states():
    fam = LaplaceMedian(0.0, 3.0, 1.5)
    bank = LaplaceBank(fam, capacity=2, width=2)
    rng = np.random.default_rng(11)
    y = rng.laplace(0, 1.5, 30)
    slots = np.array([bank.spawn() for _ in range(3)])
    for t, v in enumerate(y):
        lps = bank.observe(slots, v)
        assert np.all(lps == lps[0])
        ref = segment_state(fam, y[: t + 1])
        prev = segment_state(fam, y[:t])
        assert lps[0] == pytest.approx(ref.log_z - prev.log_z - math.log(2 * fam.sigma), rel=1e-12, abs=1e-12)
    st = bank.state(int(slots[1]))
    assert np.allclose(st.z, np.sort(np.concatenate(([0.0], y))))


def test_invalid_states():
    with pytest.raises(ModelError):
        make_state([])
    with pytest.raises(ModelError):
        make_state([0.0], [0.0])
    with pytest.raises(ModelError):
        lap_insert(make_state([0.0]), float("inf"), 1.0)
    with pytest.raises(ModelError):
        lap_moment(make_state([0.0]), 4)
