import math

import numpy as np
import pytest
from scipy import integrate, stats

from cpexact.conjugate import (
    ConjugateKernel,
    MomentError,
    conj_moment,
    conj_update,
    posterior_alpha_beta,
    posterior_mean_var,
    prior_params,
)
from cpexact.model import GaussianMean, GaussianVar, LaplaceMedian, ModelError


def run_updates(fam, y):
    st = prior_params(fam)
    total = 0.0
    for v in y:
        st, lp = conj_update(st, v, fam)
        total += lp
    return st, total


def test_mean_predictives_telescope_to_marginal_likelihood():
    rng = np.random.default_rng(1)
    fam = GaussianMean(sigma=1.3, mu0=0.4, tau0=2.1)
    y = rng.normal(1.0, 1.3, 7)
    _, total = run_updates(fam, y)
    cov = fam.sigma**2 * np.eye(7) + fam.tau0**2 * np.ones((7, 7))
    ref = stats.multivariate_normal(np.full(7, fam.mu0), cov).logpdf(y)
    assert total == pytest.approx(ref, rel=1e-12)


def test_mean_posterior_matches_closed_form():
    fam = GaussianMean(sigma=2.0, mu0=1.0, tau0=3.0)
    y = np.array([0.5, 2.5, -1.0])
    st, _ = run_updates(fam, y)
    m, v = posterior_mean_var(st, fam)
    prec = 1 / 9 + 3 / 4
    assert v == pytest.approx(1 / prec)
    assert m == pytest.approx((1 / 9 + y.sum() / 4) / prec)
    assert conj_moment(st, fam, 2) == pytest.approx(m * m + v)
    assert conj_moment(st, fam, 3) == pytest.approx(m**3 + 3 * m * v)


def test_variance_predictive_integrates_the_prior():
    fam = GaussianVar(mu=0.5, alpha=2.5, beta=1.5)
    st = prior_params(fam)
    y = 1.7
    _, lp = conj_update(st, y, fam)
    ig = stats.invgamma(fam.alpha, scale=fam.beta)
    ref, _ = integrate.quad(lambda v: stats.norm(fam.mu, math.sqrt(v)).pdf(y) * ig.pdf(v), 0, np.inf, epsrel=1e-12)
    assert lp == pytest.approx(math.log(ref), rel=1e-9)


def test_variance_posterior_and_moments():
    fam = GaussianVar(mu=0.0, alpha=3.0, beta=2.0)
    y = np.array([1.0, -2.0, 0.5, 0.3])
    st, _ = run_updates(fam, y)
    a, b = posterior_alpha_beta(st, fam)
    assert a == pytest.approx(5.0)
    assert b == pytest.approx(2.0 + 0.5 * np.sum(y**2))
    ig = stats.invgamma(a, scale=b)
    for m in (1, 2, 3):
        assert conj_moment(st, fam, m) == pytest.approx(ig.moment(m), rel=1e-10)


def test_missing_moment_is_an_error():
    fam = GaussianVar(mu=0.0, alpha=1.5, beta=1.0)
    with pytest.raises(MomentError):
        conj_moment(prior_params(fam), fam, 2)
    with pytest.raises(MomentError):
        conj_moment(prior_params(fam), fam, 4)


def test_non_conjugate_and_bad_input():
    with pytest.raises(ModelError):
        prior_params(LaplaceMedian())
    fam = GaussianMean()
    with pytest.raises(ModelError):
        conj_update(prior_params(fam), float("nan"), fam)


@pytest.mark.parametrize("fam", [GaussianMean(1.2, -0.3, 2.0), GaussianVar(0.2, 3.5, 1.1)])
def test_vectorized_kernel_agrees_with_sequential_updates(fam):
    rng = np.random.default_rng(3)
    y = rng.normal(0, 1.5, 12)
    kern = ConjugateKernel(fam, y)
    for a, b in [(1, 1), (2, 7), (5, 12), (12, 12)]:
        st, _ = run_updates(fam, y[a - 1 : b])
        ref = [conj_moment(st, fam, m) for m in (1, 2, 3)]
        got = [float(v[0]) for v in kern.moments(np.array([a]), np.array([b]))]
        assert np.allclose(got, ref, rtol=1e-12)
        _, lp = conj_update(st, 0.7, fam)
        assert float(kern.log_predictive(np.array([a]), np.array([b]), 0.7)[0]) == pytest.approx(lp, rel=1e-12)
    # empty segment is the prior
    st0 = prior_params(fam)
    _, lp0 = conj_update(st0, 0.7, fam)
    assert float(kern.log_predictive(np.array([3]), np.array([2]), 0.7)[0]) == pytest.approx(lp0, rel=1e-12)


def test_squared_residual_expectation():
    fam = GaussianMean(1.0, 0.0, 2.0)
    y = np.array([0.3, 1.1, -0.4, 2.0])
    kern = ConjugateKernel(fam, y)
    m, v = kern.params(np.array([2]), np.array([4]))
    ref = np.sum((y[1:4] - m[0]) ** 2) + 3 * v[0]
    assert float(kern.sq_residual(np.array([2]), np.array([4]))[0]) == pytest.approx(ref, rel=1e-12)


def test_kernel_sampling_moments():
    rng = np.random.default_rng(5)
    fam = GaussianMean(1.0, 0.0, 2.0)
    y = np.array([1.0, 1.5, 0.5])
    kern = ConjugateKernel(fam, y)
    draws = np.array([kern.sample(1, 3, rng) for _ in range(20000)])
    m, v = kern.params(np.array([1]), np.array([3]))
    assert abs(draws.mean() - m[0]) < 4 * math.sqrt(v[0] / draws.size)
