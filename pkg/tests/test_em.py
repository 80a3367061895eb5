import json
import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

import cpexact.em as em
from oracle import Enumeration, FamilyEnumeration, laplace_seg_loglik, segments
from cpexact.em import (
    EMError,
    em_run,
    em_step_gaussian_mean,
    em_step_gaussian_var,
    em_step_geometric,
    em_step_negbin,
    em_step_per_timepoint,
    em_step_sigma,
    em_step_tau,
    negbin_root,
    negbin_tail_mean,
    robust_median,
)
from cpexact.forward import filter as run_exact
from cpexact.model import (
    GaussianMean,
    GaussianVar,
    LaplaceMedian,
    LengthPrior,
    ModelConfig,
    ModelError,
    TimeSeries,
)
from cpexact.pointwise import changepoint_marginals
from cpexact.posterior import backward_weights
from cpexact.simulate import gen_piecewise, preset_spec

Y = np.array([0.3, -0.2, 0.4, 3.1, 2.7, 3.4, 0.1])


def bt_for(model, y=Y):
    bt = backward_weights(run_exact(TimeSeries(y), model))
    return bt, changepoint_marginals(bt)


def argmax(f, lo, hi):
    res = optimize.minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-14, "maxiter": 2000})
    return res.x


def test_geometric_step_maximizes_expected_prior():
    en = Enumeration(Y, {"kind": "geometric", "q": 0.2}, 1.0, 0.0, 3.0)
    _, qt = bt_for(ModelConfig(LengthPrior.geometric(0.2), GaussianMean(1.0, 0.0, 3.0)))

    def Q(q):
        return sum(p * (len(c) * math.log(q) + (len(Y) - len(c)) * math.log1p(-q)) for c, p in zip(en.cfgs, en.post))

    assert em_step_geometric(qt) == pytest.approx(argmax(Q, 1e-9, 1 - 1e-9), rel=1e-7)


def _nb_tail_mean(q, r, L):
    nb = stats.nbinom(r, q)
    m = np.arange(L)
    return (nb.mean() - float(np.sum(m * nb.pmf(m)))) / nb.sf(L - 1)


@pytest.mark.parametrize("r,q_old", [(1, 0.2), (2, 0.3), (3, 0.15)])
def test_negbin_step_maximizes_expected_complete_prior(r, q_old):
    """Censored tails are completed with their conditional expected length under the old q."""
    n = Y.size
    en = Enumeration(Y, {"kind": "negbin", "q": q_old, "r": r}, 1.0, 0.0, 3.0)
    bt, qt = bt_for(ModelConfig(LengthPrior.negbin(q_old, r), GaussianMean(1.0, 0.0, 3.0)))
    qp_old = q_old / (r * (1 - q_old))

    def Q(q):
        qp = q / (r * (1 - q))
        tot = 0.0
        for c, p in zip(en.cfgs, en.post):
            s = math.log(qp) if c and c[0] == 1 else 0.0
            for start, a, b in segments(c, n):
                extra = b - a
                if start == 0:
                    if b < n:
                        s += b * math.log1p(-qp) + math.log(qp)
                    else:
                        s += (n + (1 - qp_old) / qp_old) * math.log1p(-qp) + math.log(qp)
                elif b < n:
                    s += r * math.log(q) + extra * math.log1p(-q)
                else:
                    s += r * math.log(q) + _nb_tail_mean(q_old, r, extra) * math.log1p(-q)
            tot += p * s
        return tot

    ref = argmax(Q, 1e-9, r / (r + 1) - 1e-12)
    assert em_step_negbin(bt, qt, r, q_old) == pytest.approx(ref, rel=1e-6)


def test_per_timepoint_step():
    surv = [0.9, 0.8, 0.7, 0.6, 0.9, 0.8, 0.95]
    en = Enumeration(Y, {"kind": "pertime", "survival": surv}, 1.0, 0.0, 3.0)
    _, qt = bt_for(ModelConfig(LengthPrior.pertime(surv), GaussianMean(1.0, 0.0, 3.0)))
    assert np.allclose(em_step_per_timepoint(qt), 1 - en.marginals(), rtol=1e-10)


def _laplace_segment_expectations(y, fam):
    """E|X - mu| and E[sum |y_l - X|] under the segment posterior, by quadrature."""
    y = np.asarray(y)

    def logf(x):
        return -abs(x - fam.mu) / fam.tau - np.sum(np.abs(y - x)) / fam.sigma

    pts = sorted(set([fam.mu] + y.tolist()))
    top = max(logf(p) for p in pts)
    edges = list(zip([-np.inf] + pts, pts + [np.inf]))

    def integ(g):
        return sum(integrate.quad(lambda x: g(x) * math.exp(logf(x) - top), a, b, epsabs=0, epsrel=1e-13,
                                  limit=200)[0] for a, b in edges)

    z = integ(lambda x: 1.0)
    return integ(lambda x: abs(x - fam.mu)) / z, integ(lambda x: float(np.sum(np.abs(y - x)))) / z


def test_laplace_scale_steps_match_enumeration():
    y = np.array([0.2, -0.5, 0.4, 4.0, 3.6, 4.3])
    n = y.size
    fam = LaplaceMedian(0.3, 2.0, 0.8)
    prior = {"kind": "geometric", "q": 0.25}
    en = FamilyEnumeration(y, prior, lambda s: laplace_seg_loglik(s, fam.mu, fam.tau, fam.sigma))
    bt, qt = bt_for(ModelConfig(LengthPrior.geometric(0.25), fam), y)
    cache = {}
    prior_dev = obs_dev = nseg = 0.0
    for c, p in zip(en.cfgs, en.post):
        for _, a, b in segments(c, n):
            if b < a:
                continue
            if (a, b) not in cache:
                cache[a, b] = _laplace_segment_expectations(y[a - 1 : b], fam)
            e_prior, e_obs = cache[a, b]
            prior_dev += p * e_prior
            obs_dev += p * e_obs
            nseg += p

    def q_tau(t):
        return -nseg * math.log(2 * t) - prior_dev / t

    def q_sigma(s):
        return -n * math.log(2 * s) - obs_dev / s

    assert em_step_tau(bt, qt) == pytest.approx(argmax(q_tau, 1e-3, 100), rel=1e-7)
    assert em_step_sigma(bt, qt) == pytest.approx(argmax(q_sigma, 1e-3, 100), rel=1e-7)


def test_single_point_sigma_is_posterior_abs_deviation():
    fam = LaplaceMedian(0.0, 1.5, 0.7)
    bt, qt = bt_for(ModelConfig(LengthPrior.geometric(0.3), fam), np.array([1.2]))
    _, e_obs = _laplace_segment_expectations([1.2], fam)
    assert em_step_sigma(bt, qt) == pytest.approx(e_obs, rel=1e-9)


def test_gaussian_mean_steps_match_enumeration():
    fam = GaussianMean(1.2, 0.5, 2.0)
    en = Enumeration(Y, {"kind": "geometric", "q": 0.2}, fam.sigma, fam.mu0, fam.tau0)
    bt, qt = bt_for(ModelConfig(LengthPrior.geometric(0.2), fam))
    res = s1 = s2 = nseg = 0.0
    for c, p in zip(en.cfgs, en.post):
        for _, a, b in segments(c, Y.size):
            seg = Y[a - 1 : b]
            k = seg.size
            v = 1 / (1 / fam.tau0**2 + k / fam.sigma**2)
            m = v * (fam.mu0 / fam.tau0**2 + seg.sum() / fam.sigma**2)
            res += p * (np.sum((seg - m) ** 2) + k * v)
            s1 += p * m
            s2 += p * (m * m + v)
            nseg += p
    out = em_step_gaussian_mean(bt, qt)
    assert out["sigma"] == pytest.approx(math.sqrt(res / Y.size), rel=1e-10)
    assert out["mu0"] == pytest.approx(s1 / nseg, rel=1e-10)
    assert out["tau0"] == pytest.approx(math.sqrt(s2 / nseg - (s1 / nseg) ** 2), rel=1e-10)


def test_gaussian_var_mean_step():
    y = np.array([0.1, -0.3, 0.2, 2.5, -3.0, 1.9])
    fam = GaussianVar(0.2, 3.0, 1.0)
    from oracle import gaussvar_seg_loglik

    en = FamilyEnumeration(y, {"kind": "geometric", "q": 0.3}, lambda s: gaussvar_seg_loglik(s, fam.mu, fam.alpha, fam.beta))
    bt, qt = bt_for(ModelConfig(LengthPrior.geometric(0.3), fam), y)
    num = den = 0.0
    for c, p in zip(en.cfgs, en.post):
        for _, a, b in segments(c, y.size):
            seg = y[a - 1 : b]
            inv = (fam.alpha + seg.size / 2) / (fam.beta + 0.5 * np.sum((seg - fam.mu) ** 2))
            num += p * inv * seg.sum()
            den += p * inv * seg.size
    assert em_step_gaussian_var(bt, qt) == pytest.approx(num / den, rel=1e-7)


def test_negbin_tail_mean_matches_scipy():
    for q, r, L in [(0.1, 1, 5), (0.3, 3, 0), (0.02, 2, 40), (0.5, 5, 3)]:
        assert negbin_tail_mean(q, r, L)[0] == pytest.approx(_nb_tail_mean(q, r, L), rel=1e-10)


def test_negbin_root_interval_and_errors():
    for r in (1, 2, 4):
        q = negbin_root(3.0, 40.0, 2.0, r)
        assert 0 < q < r / (r + 1)
    with pytest.raises(EMError):
        negbin_root(0.0, 1.0, 1.0, 1)
    with pytest.raises(EMError):
        negbin_root(1.0, 1.0, 0.0, 1)


def test_fixed_point_start_converges_immediately():
    model = ModelConfig(LengthPrior.geometric(0.2), GaussianMean(1.0, 0.0, 3.0))
    tr = em_run(Y, model, ["q"], tol=1e-13, max_iter=500)
    assert tr.converged
    again = em_run(Y, tr.model, ["q"], tol=1e-6)
    assert again.converged and len(again.iterates) == 2


@pytest.mark.parametrize("model,targets", [
    (ModelConfig(LengthPrior.negbin(0.05, 2), LaplaceMedian(0.0, 4.0, 2.0)), ["q", "tau", "sigma"]),
    (ModelConfig(LengthPrior.geometric(0.05), GaussianMean(2.0, 1.0, 3.0)), ["q", "sigma", "tau"]),
    (ModelConfig(LengthPrior.geometric(0.05), GaussianVar(0.5, 3.0, 2.0)), ["q", "mu"]),
])
def test_loglik_monotone(model, targets):
    data, _ = gen_piecewise(preset_spec("emstudy", n=120, k=3), np.random.default_rng(51))
    tr = em_run(data, model, targets, tol=1e-9, max_iter=30)
    ll = np.array(tr.loglik)
    assert np.all(np.diff(ll) >= -1e-8 * np.maximum(1.0, np.abs(ll[1:])))
    d = tr.to_dict()
    json.dumps(d)
    assert len(d["expected_count"]) == len(d["iterates"])


def test_oscillation_returns_best_iterate(monkeypatch):
    vals = iter([0.1, 0.3] * 50)
    monkeypatch.setattr(em, "em_step", lambda model, bt, qt, targets: {"q": next(vals)})
    model = ModelConfig(LengthPrior.geometric(0.2), GaussianMean(1.0, 0.0, 3.0))
    tr = em_run(Y, model, ["q"], tol=1e-9, osc_window=4)
    assert tr.oscillation_detected and not tr.converged
    assert tr.best_index == int(np.argmax(tr.loglik))
    assert tr.model.length_prior.q == tr.iterates[tr.best_index]["q"]


def test_target_validation():
    model = ModelConfig(LengthPrior.geometric(0.2), LaplaceMedian())
    with pytest.raises(ModelError):
        em_run(Y, model, [])
    with pytest.raises(ModelError):
        em_run(Y, model, ["banana"])
    with pytest.raises(ModelError):
        em_run(Y, model, ["mu"])
    with pytest.raises(ModelError):
        em_run(Y, ModelConfig(LengthPrior.geometric(0.2), GaussianVar()), ["sigma"])


def test_robust_median():
    assert robust_median([3.0, -1.0, 100.0]) == 3.0
