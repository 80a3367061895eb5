"""EM estimation of length-prior and observation parameters.

Each step maps the retrospective quantities of one filter/backward pass to
the maximizer of an expected complete-data log-likelihood.  The surrogate
objectives are exposed alongside the steps so the maximization can be
checked directly.

Segment weights ``w[j, l]`` (see ``pointwise.segment_weights``) give the
posterior probability that ``[j, l]`` is a complete segment; the number of
segments is ``sum(q) + (1 - q_1)`` (every changepoint plus the head segment
when there is no changepoint at 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numba import njit

from .conjugate import ConjugateKernel
from .forward import run_filter
from .model import (
    GaussianMean,
    GaussianVar,
    LaplaceMedian,
    LengthPrior,
    ModelConfig,
    ModelError,
    TimeSeries,
    residual_success_prob,
)
from .pointwise import changepoint_marginals, laplace_entry_stats, segment_weights
from .posterior import BackwardTable, backward_weights

EPS = 1e-12


class EMError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# length priors


def em_step_geometric(q_tilde: Sequence[float]) -> float:
    q = float(np.mean(np.asarray(q_tilde, dtype=float)))
    return min(max(q, EPS), 1.0 - EPS)


def surrogate_geometric(q: float, q_tilde: Sequence[float]) -> float:
    s = float(np.sum(q_tilde))
    n = len(q_tilde)
    return s * math.log(q) + (n - s) * math.log1p(-q)


def em_step_per_timepoint(q_tilde: Sequence[float]) -> np.ndarray:
    """Survival probability per timepoint: one minus the changepoint marginal."""
    return np.clip(1.0 - np.asarray(q_tilde, dtype=float), 0.0, 1.0)


def surrogate_per_timepoint(survival: Sequence[float], q_tilde: Sequence[float]) -> float:
    s = np.asarray(survival, dtype=float)
    qt = np.asarray(q_tilde, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(qt > 0, qt * np.log1p(-s), 0.0)
        b = np.where(qt < 1, (1.0 - qt) * np.log(s), 0.0)
    return float(np.sum(a + b))


@njit(cache=True)
def _tail_mean(q, r, cutoff):
    """E[M | M >= cutoff] for M ~ NB(r, q) counting failures, by direct summation."""
    s0 = 1.0
    s1 = float(cutoff)
    term = 1.0
    l = cutoff
    while True:
        term *= (l + r) / (l + 1.0) * (1.0 - q)
        l += 1
        s0 += term
        s1 += term * l
        if term * l < 1e-14 * s1 and (l + r) * (1.0 - q) < (l + 1.0):
            break
        if l > cutoff + 100000000:
            break
    return s1 / s0


def negbin_tail_mean(q: float, r: int, cutoff) -> np.ndarray:
    c = np.atleast_1d(np.asarray(cutoff, dtype=np.int64))
    return np.array([_tail_mean(float(q), int(r), int(v)) for v in c])


def negbin_coefficients(bt: BackwardTable, q_tilde: np.ndarray, r: int, q_old: float) -> np.ndarray:
    """Accumulate the coefficients (c1, c2, c3) of ``ln q``, ``ln(1-q)`` and ``ln(1 - q/(r(1-q)))``."""
    g = bt.grid
    n = g.n
    sw = segment_weights(bt, q_tilde)
    ii = g.i
    j = g.j
    c = np.zeros(3)
    # head segments ending before n, including the empty head (changepoint at 1)
    head = (j == 0) & (ii < n)
    wh = np.where(ii[head] == 0, q_tilde[0], sw[head])
    c += [wh.sum(), -wh.sum(), float(np.sum(wh * ii[head]))]
    # no changepoint at all: geometric tail beyond n
    w0n = g.lookup(0, n)
    if not math.isnan(w0n) and w0n > 0:
        qp = residual_success_prob(q_old, r)
        c += [w0n, -w0n, w0n * (n + (1.0 - qp) / qp)]
    # intermediate segments
    mid = (j >= 1) & (ii < n)
    wm = sw[mid]
    c += [r * wm.sum(), float(np.sum(wm * (ii[mid] - j[mid]))), 0.0]
    # final segments, censored at n
    fin = (j >= 1) & (ii == n)
    wf = sw[fin]
    if wf.size:
        tm = negbin_tail_mean(q_old, r, n - j[fin])
        c += [r * wf.sum(), float(np.sum(wf * tm)), 0.0]
    return c


def negbin_root(c1: float, c2: float, c3: float, r: int) -> float:
    """Unique stationary point in (0, r/(r+1)) of ``c1 ln q + c2 ln(1-q) + c3 ln(1 - q/(r(1-q)))``."""
    if not (c1 > 0 and c3 > 0):
        raise EMError(f"negative binomial step needs c1 > 0 and c3 > 0, got c1={c1}, c3={c3}")
    a = (r + 1.0) * (c1 + c2)
    b = r * (c1 + c2) + c1 * (r + 1.0) + c3
    cc = c1 * r
    disc = b * b - 4.0 * a * cc
    q = 2.0 * cc / (b + math.sqrt(max(disc, 0.0)))
    if not (0.0 < q < r / (r + 1.0)):
        raise EMError(f"negative binomial root {q} outside (0, {r / (r + 1.0)})")
    return q


def surrogate_negbin(q: float, c, r: int) -> float:
    c1, c2, c3 = c
    return c1 * math.log(q) + c2 * math.log1p(-q) + c3 * math.log1p(-q / (r * (1.0 - q)))


def em_step_negbin(bt: BackwardTable, q_tilde: np.ndarray, r: int, q_old: float) -> float:
    c = negbin_coefficients(bt, np.asarray(q_tilde, dtype=float), r, q_old)
    return negbin_root(c[0], c[1], c[2], r)


# ---------------------------------------------------------------------------
# observation families


def segment_count(q_tilde: np.ndarray) -> float:
    q_tilde = np.asarray(q_tilde, dtype=float)
    return float(q_tilde.sum() + (1.0 - q_tilde[0]))


def _lap_sums(bt: BackwardTable, q_tilde: np.ndarray, stats: Optional[np.ndarray] = None):
    fam = bt.fwd.model.observation
    if not isinstance(fam, LaplaceMedian):
        raise ModelError("this step needs the Laplace median family")
    st = laplace_entry_stats(bt, full=False) if stats is None else stats
    sw = segment_weights(bt, q_tilde)
    abs_dev = st[:, 4]
    obs = fam.sigma * (st[:, 5] - abs_dev / fam.tau)
    return float(sw @ abs_dev), float(sw @ obs)


def laplace_sufficient(bt: BackwardTable, q_tilde: np.ndarray, stats: Optional[np.ndarray] = None):
    """``(M0, M1)``: expected total prior deviation and total observation deviation."""
    return _lap_sums(bt, np.asarray(q_tilde, dtype=float), stats)


def em_step_tau(bt: BackwardTable, q_tilde: np.ndarray, stats: Optional[np.ndarray] = None) -> float:
    m0, _ = _lap_sums(bt, np.asarray(q_tilde, dtype=float), stats)
    return m0 / segment_count(q_tilde)


def em_step_sigma(bt: BackwardTable, q_tilde: np.ndarray, stats: Optional[np.ndarray] = None) -> float:
    _, m1 = _lap_sums(bt, np.asarray(q_tilde, dtype=float), stats)
    return m1 / bt.n


def surrogate_scale(scale: float, total_dev: float, count: float) -> float:
    """Expected log density of ``count`` Laplace terms with summed deviation ``total_dev``."""
    return -count * math.log(2.0 * scale) - total_dev / scale


def gaussian_mean_sufficient(bt: BackwardTable, q_tilde: np.ndarray):
    """``(sum of expected squared residuals, E sum X, E sum X^2)`` over segments."""
    fam = bt.fwd.model.observation
    if not isinstance(fam, GaussianMean):
        raise ModelError("this step needs the Gaussian change-in-mean family")
    g = bt.grid
    sw = segment_weights(bt, q_tilde)
    sel = g.i >= 1
    kern = ConjugateKernel(fam, bt.fwd.data.values)
    a = np.maximum(g.j[sel], 1)
    b = g.i[sel]
    m1, m2 = kern.moments(a, b, (1, 2))
    res = kern.sq_residual(a, b)
    w = sw[sel]
    return float(w @ res), float(w @ m1), float(w @ m2)


def em_step_gaussian_mean(bt: BackwardTable, q_tilde: np.ndarray, targets=("sigma", "tau")) -> Dict[str, float]:
    res, s1, s2 = gaussian_mean_sufficient(bt, q_tilde)
    out = {}
    if "sigma" in targets:
        out["sigma"] = math.sqrt(res / bt.n)
    if "tau" in targets:
        ns = segment_count(q_tilde)
        mu0 = s1 / ns
        out["mu0"] = mu0
        out["tau0"] = math.sqrt(max(s2 / ns - mu0 * mu0, EPS))
    return out


def em_step_gaussian_var(bt: BackwardTable, q_tilde: np.ndarray) -> float:
    """Known-mean update for the change-in-variance family: precision-weighted data mean."""
    fam = bt.fwd.model.observation
    if not isinstance(fam, GaussianVar):
        raise ModelError("this step needs the Gaussian change-in-variance family")
    g = bt.grid
    sw = segment_weights(bt, q_tilde)
    sel = g.i >= 1
    kern = ConjugateKernel(fam, bt.fwd.data.values)
    wk, wy = kern.weighted_inverse_var(np.maximum(g.j[sel], 1), g.i[sel])
    return float(sw[sel] @ wy) / float(sw[sel] @ wk)


def robust_median(y) -> float:
    """Median of the data, used to fix the Laplace prior location."""
    return float(np.median(np.asarray(y, dtype=float)))


# ---------------------------------------------------------------------------
# driver


@dataclass
class EMTrace:
    iterates: List[Dict[str, object]] = field(default_factory=list)
    loglik: List[float] = field(default_factory=list)
    expected_count: List[float] = field(default_factory=list)
    converged: bool = False
    oscillation_detected: bool = False
    model: Optional[ModelConfig] = None
    best_index: int = 0

    def to_dict(self) -> Dict[str, object]:
        def plain(v):
            return [float(x) for x in v] if isinstance(v, (list, tuple, np.ndarray)) else float(v)

        return {
            "iterates": [{k: plain(v) for k, v in it.items()} for it in self.iterates],
            "loglik": [float(v) for v in self.loglik],
            "expected_count": [float(v) for v in self.expected_count],
            "converged": self.converged,
            "oscillation_detected": self.oscillation_detected,
            "best_index": self.best_index,
            "model": self.model.to_dict() if self.model is not None else None,
        }


_TARGETS = {"q", "tau", "sigma", "mu"}


def _params_of(model: ModelConfig, targets) -> Dict[str, object]:
    out: Dict[str, object] = {}
    lp = model.length_prior
    fam = model.observation
    if "q" in targets:
        out["q"] = np.array(lp.survival) if lp.kind == "pertime" else lp.q
    if isinstance(fam, LaplaceMedian):
        if "tau" in targets:
            out["tau"] = fam.tau
        if "sigma" in targets:
            out["sigma"] = fam.sigma
    elif isinstance(fam, GaussianMean):
        if "tau" in targets:
            out["mu0"] = fam.mu0
            out["tau0"] = fam.tau0
        if "sigma" in targets:
            out["sigma"] = fam.sigma
    elif isinstance(fam, GaussianVar):
        if "mu" in targets:
            out["mu"] = fam.mu
    return out


def _apply(model: ModelConfig, p: Dict[str, object]) -> ModelConfig:
    lp = model.length_prior
    if "q" in p:
        if lp.kind == "pertime":
            lp = LengthPrior.pertime(np.asarray(p["q"], dtype=float))
        else:
            lp = LengthPrior(lp.kind, q=float(p["q"]), r=lp.r)
    fam = model.observation
    upd = {k: float(v) for k, v in p.items() if k != "q"}
    if upd:
        fam = type(fam)(**{**fam.params(), **upd})
    return model.replace(length_prior=lp, observation=fam)


def _rel_change(a: Dict[str, object], b: Dict[str, object]) -> float:
    worst = 0.0
    for k in a:
        x = np.atleast_1d(np.asarray(a[k], dtype=float))
        y = np.atleast_1d(np.asarray(b[k], dtype=float))
        d = np.abs(x - y) / np.maximum(np.abs(x), 1e-300)
        worst = max(worst, float(d.max()))
    return worst


def em_step(model: ModelConfig, bt: BackwardTable, q_tilde: np.ndarray, targets) -> Dict[str, object]:
    """One M-step for the requested targets."""
    new: Dict[str, object] = {}
    lp = model.length_prior
    fam = model.observation
    if "q" in targets:
        if lp.kind == "geometric":
            new["q"] = em_step_geometric(q_tilde)
        elif lp.kind == "negbin":
            new["q"] = em_step_negbin(bt, q_tilde, lp.r, lp.q)
        else:
            new["q"] = em_step_per_timepoint(q_tilde)
    if isinstance(fam, LaplaceMedian):
        if "tau" in targets or "sigma" in targets:
            m0, m1 = _lap_sums(bt, q_tilde)
            if "tau" in targets:
                new["tau"] = m0 / segment_count(q_tilde)
            if "sigma" in targets:
                new["sigma"] = m1 / bt.n
        if "mu" in targets:
            raise ModelError("the Laplace prior location is not estimated by EM; use robust_median")
    elif isinstance(fam, GaussianMean):
        if "mu" in targets:
            raise ModelError("change-in-mean family: use targets q, tau (prior mean and scale) and sigma")
        if "tau" in targets or "sigma" in targets:
            new.update(em_step_gaussian_mean(bt, q_tilde, targets))
    elif isinstance(fam, GaussianVar):
        if "tau" in targets or "sigma" in targets:
            raise ModelError("change-in-variance family supports targets q and mu")
        if "mu" in targets:
            new["mu"] = em_step_gaussian_var(bt, q_tilde)
    return new


def em_run(data, model: ModelConfig, targets, tol: float = 1e-6, max_iter: int = 200,
           osc_window: int = 8, callback=None) -> EMTrace:
    """Alternate filter, backward pass and M-steps until the parameters settle.

    Converged when the largest relative parameter change drops below ``tol``;
    if an iterate comes back (within ``tol``) to one of the last
    ``osc_window`` earlier iterates instead, iteration stops and the iterate
    with the best marginal log-likelihood is returned.
    """
    targets = set(targets)
    if not targets:
        raise ModelError("no EM targets given")
    bad = targets - _TARGETS
    if bad:
        raise ModelError(f"unknown EM targets {sorted(bad)}")
    data = data if isinstance(data, TimeSeries) else TimeSeries(data)
    trace = EMTrace()
    cur = model
    params = _params_of(cur, targets)
    for it in range(max_iter + 1):
        try:
            fwd = run_filter(data, cur)
            bt = backward_weights(fwd)
        except ArithmeticError as exc:
            raise EMError(f"iterate {it}: {exc}") from exc
        qt = changepoint_marginals(bt)
        trace.iterates.append(params)
        trace.loglik.append(fwd.log_marginal_likelihood())
        trace.expected_count.append(float(qt.sum()))
        if callback is not None:
            callback(it, params, trace.loglik[-1])
        if trace.converged or trace.oscillation_detected or it == max_iter:
            break
        new = em_step(cur, bt, qt, targets)
        new = {k: new[k] for k in params}
        if _rel_change(params, new) < tol:
            trace.converged = True
        elif any(_rel_change(old, new) < tol for old in trace.iterates[-osc_window:-1]):
            trace.oscillation_detected = True
        cur = _apply(cur, new)
        params = new
    best = int(np.argmax(trace.loglik))
    if trace.oscillation_detected:
        trace.best_index = best
        trace.model = _apply(model, trace.iterates[best])
    else:
        trace.best_index = len(trace.iterates) - 1
        trace.model = cur
    return trace
