"""Brute-force reference computations over every changepoint configuration.

Written independently of the package: segment likelihoods come from scipy's
multivariate normal or numerical quadrature, the length prior from scipy's
negative binomial.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import stats
from scipy.integrate import quad
from scipy.special import logsumexp


def configs(n):
    for k in range(n + 1):
        for c in itertools.combinations(range(1, n + 1), k):
            yield c


def segments(cfg, n):
    """(start, first, last): start 0 marks the head segment without a changepoint."""
    b = list(cfg)
    out = []
    if not b or b[0] > 1:
        out.append((0, 1, (b[0] - 1) if b else n))
    for k, t in enumerate(b):
        out.append((t, t, b[k + 1] - 1 if k + 1 < len(b) else n))
    return out


def log_prior(cfg, n, prior):
    """log P(C_{1:n} = cfg), changepoints restricted to 1..n and the last segment censored at n."""
    kind = prior["kind"]
    if kind == "geometric":
        q = prior["q"]
        k = len(cfg)
        return k * math.log(q) + (n - k) * math.log1p(-q)
    if kind == "pertime":
        s = prior["survival"]
        tot = 0.0
        for i in range(1, n + 1):
            tot += math.log1p(-s[i - 1]) if i in cfg else math.log(s[i - 1])
        return tot
    q, r = prior["q"], prior["r"]
    qp = q / (r * (1.0 - q))
    nb = stats.nbinom(r, q)
    # empty head segment: the first changepoint comes at 1
    tot = math.log(qp) if cfg and cfg[0] == 1 else 0.0
    for start, a, b in segments(cfg, n):
        extra = b - a  # timepoints after the first one
        if start == 0:
            if b < n:
                tot += b * math.log1p(-qp) + math.log(qp)
            else:
                tot += n * math.log1p(-qp)
        elif b < n:
            tot += nb.logpmf(extra)
        else:
            tot += nb.logsf(extra - 1)
    return tot


def gauss_seg_loglik(y, sigma, mu0, tau0):
    k = y.size
    cov = sigma**2 * np.eye(k) + tau0**2 * np.ones((k, k))
    return stats.multivariate_normal(np.full(k, mu0), cov).logpdf(y)


def gauss_seg_mean(y, sigma, mu0, tau0):
    prec = 1 / tau0**2 + y.size / sigma**2
    return (mu0 / tau0**2 + y.sum() / sigma**2) / prec


class Enumeration:
    """Exact posterior law over configurations for a Gaussian change-in-mean model."""

    def __init__(self, y, prior, sigma, mu0, tau0):
        self.y = np.asarray(y, dtype=float)
        self.n = n = self.y.size
        self.prior = prior
        self.fam = (sigma, mu0, tau0)
        self._segcache = {}
        self.cfgs = list(configs(n))
        self.logjoint = np.array([self._logjoint(c, n) for c in self.cfgs])
        self.logml = float(logsumexp(self.logjoint))
        self.logpost = self.logjoint - self.logml
        self.post = np.exp(self.logpost)

    def _seg(self, a, b):
        key = (a, b)
        if key not in self._segcache:
            self._segcache[key] = gauss_seg_loglik(self.y[a - 1 : b], *self.fam)
        return self._segcache[key]

    def _logjoint(self, cfg, n):
        return log_prior(cfg, n, self.prior) + sum(self._seg(a, b) for _, a, b in segments(cfg, n))

    def prefix_logml(self, i):
        return float(logsumexp([self._logjoint(c, i) for c in configs(i)]))

    def filter_weights(self, i):
        """c[j, i] = P(C_i = j | y_1..y_i) as a dict j -> prob."""
        lj = {}
        for c in configs(i):
            j = c[-1] if c else 0
            lj.setdefault(j, []).append(self._logjoint(c, i))
        vals = {j: logsumexp(v) for j, v in lj.items()}
        tot = logsumexp(list(vals.values()))
        return {j: math.exp(v - tot) for j, v in vals.items()}

    def marginals(self):
        q = np.zeros(self.n)
        for c, p in zip(self.cfgs, self.post):
            for t in c:
                q[t - 1] += p
        return q

    def backward_weights(self, i):
        """P(C_i = j | C_{i+1} = i+1, y) as dict j -> prob (i < n); P(C_n = j | y) for i = n."""
        acc = {}
        for c, p in zip(self.cfgs, self.post):
            if i < self.n and (i + 1) not in c:
                continue
            before = [t for t in c if t <= i]
            j = before[-1] if before else 0
            acc[j] = acc.get(j, 0.0) + p
        tot = sum(acc.values())
        return {j: v / tot for j, v in acc.items()}

    def entropy(self):
        p = self.post[self.post > 0]
        return float(-(p * np.log(p)).sum())

    def map_value(self):
        return float(self.logpost.max())

    def height_means(self):
        out = np.zeros(self.n)
        for c, p in zip(self.cfgs, self.post):
            for _, a, b in segments(c, self.n):
                out[a - 1 : b] += p * gauss_seg_mean(self.y[a - 1 : b], *self.fam)
        return out

    def prob(self, cfg):
        return float(self.post[self.cfgs.index(tuple(cfg))])


def laplace_seg_loglik(y, mu, tau, sigma):
    """log of the integral of the Laplace prior times the Laplace likelihoods, by quadrature."""
    y = np.asarray(y, dtype=float)

    def logf(x):
        return -abs(x - mu) / tau - np.sum(np.abs(y - x)) / sigma

    pts = sorted(set([mu] + y.tolist()))
    top = max(logf(p) for p in pts)
    edges = list(zip([-np.inf] + pts, pts + [np.inf]))
    val = sum(quad(lambda x: math.exp(logf(x) - top), a, b, epsabs=0, epsrel=1e-13, limit=200)[0] for a, b in edges)
    return math.log(val) + top - math.log(2 * tau) - y.size * math.log(2 * sigma)


def gaussvar_seg_loglik(y, mu, alpha, beta):
    """Marginal likelihood of a known-mean Gaussian segment with an inverse-gamma variance, by quadrature."""
    y = np.asarray(y, dtype=float)
    ig = stats.invgamma(alpha, scale=beta)
    ss = float(np.sum((y - mu) ** 2))
    k = y.size

    def logf(v):
        return ig.logpdf(v) - 0.5 * k * math.log(2 * math.pi * v) - 0.5 * ss / v

    mode = (beta + 0.5 * ss) / (alpha + 0.5 * k + 1)
    top = logf(mode)
    val = quad(lambda v: math.exp(logf(v) - top), 0, mode, epsabs=0, epsrel=1e-13, limit=200)[0]
    val += quad(lambda v: math.exp(logf(v) - top), mode, np.inf, epsabs=0, epsrel=1e-13, limit=200)[0]
    return math.log(val) + top


class FamilyEnumeration(Enumeration):
    """Enumeration with an arbitrary segment log-likelihood ``seg(y_segment)``."""

    def __init__(self, y, prior, seg):
        self._segfn = seg
        super().__init__(y, prior, 1.0, 0.0, 1.0)

    def _seg(self, a, b):
        key = (a, b)
        if key not in self._segcache:
            self._segcache[key] = self._segfn(self.y[a - 1 : b])
        return self._segcache[key]
