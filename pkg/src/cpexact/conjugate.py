"""Conjugate segment kernels for Gaussian change-in-mean and change-in-variance.

Both kernels are exponential families written as ``(nu, chi)`` pseudo-count and
natural-statistic accumulators; every observation adds one to ``nu`` and
``T(y)`` to ``chi``.

Change in mean (noise scale ``s``, height prior ``N(mu0, tau0^2)``)::

    T(y) = y / s,   nu = s^2 / v,   chi = m * s / v

where ``(m, v)`` are the posterior mean and variance of the height.  The
posterior predictive of the next observation is ``N(m, v + s^2)``.

Change in variance (known mean ``mu``, variance prior ``InvGamma(a, b)``)::

    T(y) = (y - mu)^2 / 2,   nu = 2 (a + 1),   chi = b

and the predictive is a Student-t with ``2a`` degrees of freedom::

    log p(y) = lgamma(a + 1/2) - lgamma(a) - log(2 pi b) / 2
               - (a + 1/2) log(1 + (y - mu)^2 / (2 b))
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .model import GaussianMean, GaussianVar, ModelError

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ConjugateParams:
    nu: float
    chi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chi", np.atleast_1d(np.asarray(self.chi, dtype=float)))


class MomentError(ModelError):
    """Requested posterior moment does not exist."""


# ---------------------------------------------------------------------------
# change in mean


def _mean_state(p: ConjugateParams, fam: GaussianMean):
    v = fam.sigma**2 / p.nu
    m = p.chi[0] * v / fam.sigma
    return m, v


def _mean_params(m: float, v: float, fam: GaussianMean) -> ConjugateParams:
    return ConjugateParams(fam.sigma**2 / v, [m * fam.sigma / v])


# ---------------------------------------------------------------------------
# change in variance


def _var_state(p: ConjugateParams, fam: GaussianVar):
    return p.nu / 2.0 - 1.0, p.chi[0]


def _var_params(a: float, b: float) -> ConjugateParams:
    return ConjugateParams(2.0 * (a + 1.0), [b])


def prior_params(family) -> ConjugateParams:
    if isinstance(family, GaussianMean):
        return _mean_params(family.mu0, family.tau0**2, family)
    if isinstance(family, GaussianVar):
        return _var_params(family.alpha, family.beta)
    raise ModelError(f"{type(family).__name__} is not a conjugate family")


def gaussian_log_pdf(y, mean, var):
    return -0.5 * (_LOG2PI + np.log(var)) - 0.5 * (y - mean) ** 2 / var


def student_log_pdf(y, mu, a, b):
    return (
        gammaln(a + 0.5)
        - gammaln(a)
        - 0.5 * np.log(2.0 * math.pi * b)
        - (a + 0.5) * np.log1p((y - mu) ** 2 / (2.0 * b))
    )


def conj_update(state: ConjugateParams, y: float, family) -> tuple[ConjugateParams, float]:
    """Absorb one observation; return the new state and ``log p(y | state)``."""
    if not np.isfinite(y):
        raise ModelError(f"non-finite observation {y}")
    if isinstance(family, GaussianMean):
        m, v = _mean_state(state, family)
        s2 = family.sigma**2
        lp = float(gaussian_log_pdf(y, m, v + s2))
        return ConjugateParams(state.nu + 1.0, state.chi + y / family.sigma), lp
    if isinstance(family, GaussianVar):
        a, b = _var_state(state, family)
        lp = float(student_log_pdf(y, family.mu, a, b))
        return ConjugateParams(state.nu + 1.0, state.chi + 0.5 * (y - family.mu) ** 2), lp
    raise ModelError(f"{type(family).__name__} is not a conjugate family")


def _normal_raw_moment(m, v, k):
    if k == 1:
        return m
    if k == 2:
        return m * m + v
    if k == 3:
        return m**3 + 3.0 * m * v
    raise MomentError(f"moment order {k} not supported")


def _invgamma_raw_moment(a, b, k):
    a = np.asarray(a, dtype=float)
    if np.any(a <= k):
        raise MomentError(f"inverse gamma moment {k} needs alpha > {k}")
    out = np.asarray(b, dtype=float) ** k
    for i in range(1, k + 1):
        out = out / (a - i)
    return out


def conj_moment(state: ConjugateParams, family, m: int) -> float:
    """``E[X^m]`` for the posterior height law represented by ``state``."""
    if m not in (1, 2, 3):
        raise MomentError(f"moment order must be 1, 2 or 3, got {m}")
    if isinstance(family, GaussianMean):
        mean, v = _mean_state(state, family)
        return float(_normal_raw_moment(mean, v, m))
    if isinstance(family, GaussianVar):
        a, b = _var_state(state, family)
        return float(_invgamma_raw_moment(a, b, m))
    raise ModelError(f"{type(family).__name__} is not a conjugate family")


def posterior_mean_var(state: ConjugateParams, family: GaussianMean):
    return _mean_state(state, family)


def posterior_alpha_beta(state: ConjugateParams, family: GaussianVar):
    return _var_state(state, family)


# ---------------------------------------------------------------------------
# vectorized segment kernels, driven by prefix sums of the data


class ConjugateKernel:
    """Posterior quantities of many segments at once.

    Segments are given as 1-based inclusive index ranges ``[a, b]`` into the
    data; an empty segment (``b = a - 1``) is the prior.
    """

    def __init__(self, family, y: np.ndarray):
        self.family = family
        y = np.asarray(y, dtype=float)
        self.y = y
        self.n = y.size
        if isinstance(family, GaussianMean):
            self.kind = "mean"
            self._shift = family.mu0
            z = y - family.mu0
            self._p1 = np.concatenate(([0.0], np.cumsum(z)))
        elif isinstance(family, GaussianVar):
            self.kind = "var"
            self._p2 = np.concatenate(([0.0], np.cumsum((y - family.mu) ** 2)))
        else:
            raise ModelError(f"{type(family).__name__} is not a conjugate family")

    # posterior parameters -------------------------------------------------
    def params(self, a, b):
        a = np.asarray(a)
        b = np.asarray(b)
        k = (b - a + 1).astype(float)
        f = self.family
        if self.kind == "mean":
            s1 = self._p1[b] - self._p1[a - 1]
            prec = 1.0 / f.tau0**2 + k / f.sigma**2
            v = 1.0 / prec
            m = f.mu0 + v * (s1 / f.sigma**2)
            return m, v
        ss = self._p2[b] - self._p2[a - 1]
        return f.alpha + 0.5 * k, f.beta + 0.5 * ss

    def log_predictive(self, a, b, ynext: float):
        """``log p(ynext | y[a..b])`` for every segment."""
        p1, p2 = self.params(a, b)
        if self.kind == "mean":
            return gaussian_log_pdf(ynext, p1, p2 + self.family.sigma**2)
        return student_log_pdf(ynext, self.family.mu, p1, p2)

    def moments(self, a, b, orders=(1, 2, 3)):
        p1, p2 = self.params(a, b)
        if self.kind == "mean":
            return [_normal_raw_moment(p1, p2, k) for k in orders]
        return [_invgamma_raw_moment(p1, p2, k) for k in orders]

    def sample(self, a: int, b: int, rng: np.random.Generator) -> float:
        p1, p2 = self.params(np.array([a]), np.array([b]))
        if self.kind == "mean":
            return float(rng.normal(p1[0], math.sqrt(p2[0])))
        return float(p2[0] / rng.gamma(p1[0]))

    def state(self, a: int, b: int) -> ConjugateParams:
        p1, p2 = self.params(np.array([a]), np.array([b]))
        if self.kind == "mean":
            return _mean_params(float(p1[0]), float(p2[0]), self.family)
        return _var_params(float(p1[0]), float(p2[0]))

    # EM helpers -----------------------------------------------------------
    def sq_residual(self, a, b):
        """``E[sum_{l=a}^{b} (y_l - X)^2]`` under each segment's posterior (change in mean)."""
        m, v = self.params(a, b)
        k = (np.asarray(b) - np.asarray(a) + 1).astype(float)
        z1 = self._p1[b] - self._p1[a - 1]
        # sum (y - m)^2 via centred prefix sums: sum z^2 - 2 (m - mu0) sum z + k (m - mu0)^2
        if not hasattr(self, "_q1"):
            z = self.y - self._shift
            self._q1 = np.concatenate(([0.0], np.cumsum(z * z)))
        z2 = self._q1[b] - self._q1[a - 1]
        dm = m - self._shift
        return z2 - 2.0 * dm * z1 + k * dm * dm + k * v

    def weighted_inverse_var(self, a, b):
        """``(E[1/X] * k, E[1/X] * sum y)`` per segment (change in variance)."""
        al, be = self.params(a, b)
        inv = al / be
        k = (np.asarray(b) - np.asarray(a) + 1).astype(float)
        if not hasattr(self, "_py"):
            self._py = np.concatenate(([0.0], np.cumsum(self.y)))
        sy = self._py[b] - self._py[a - 1]
        return inv * k, inv * sy
