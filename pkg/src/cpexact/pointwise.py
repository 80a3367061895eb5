"""Pointwise posterior summaries: changepoint marginals and height trajectories.

A segment ``[j, l]`` occurs with probability ``w[j, l] = bw[j, l] * q[l + 1]``
(``q[n + 1] = 1``).  The height posterior at ``i`` is the mixture of the
segment posteriors over all segments covering ``i``; moving from ``i + 1`` to
``i`` removes the segments starting at ``i + 1`` and adds those ending at ``i``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from . import _laplace_core as core
from .conjugate import ConjugateKernel
from .model import LaplaceMedian
from .posterior import BackwardTable


@dataclass
class MarginalReport:
    q_tilde: np.ndarray
    expected_count: float
    mean: np.ndarray
    sd: np.ndarray
    skew: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray

    def rows(self):
        for i in range(self.q_tilde.size):
            yield (i + 1, self.q_tilde[i], self.mean[i], self.sd[i], self.skew[i], self.band_lo[i], self.band_hi[i])


@njit(cache=True)
def _marginals(n, starts, rowptr, perm, i_of, ws):
    q = np.zeros(n + 2)  # q[i] for i in 0..n+1; q[n + 1] = 1
    q[n + 1] = 1.0
    for r in range(starts.size - 1, -1, -1):
        j = starts[r]
        acc = 0.0
        for p in range(rowptr[r], rowptr[r + 1]):
            e = perm[p]
            l = i_of[e]
            if j == 0 and l == 0:
                continue
            acc += ws[e] * q[l + 1]
        q[j] = acc
    return q


def _marginal_table(bt: BackwardTable) -> np.ndarray:
    g = bt.grid
    starts, rowptr, perm, _ = g.rows()
    return _marginals(g.n, starts, rowptr, perm, g.i, g.w)


def changepoint_marginals(bt: BackwardTable) -> np.ndarray:
    """``P(C_i = i | y)`` for ``i = 1..n``."""
    q = _marginal_table(bt)
    return np.clip(q[1 : bt.n + 1], 0.0, 1.0)


def segment_weights(bt: BackwardTable, q_tilde: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior probability of each stored (start, end) being a complete segment.

    The head entry (0, 0) is not a segment and gets weight 0.
    """
    g = bt.grid
    n = g.n
    qt = changepoint_marginals(bt) if q_tilde is None else np.asarray(q_tilde, dtype=float)
    nxt = np.append(qt, 1.0)  # nxt[l] = q[l + 1] for l = 0..n (q[n + 1] = 1)
    ii = g.i
    out = g.w * nxt[np.minimum(ii, n)]
    out[ii == 0] = 0.0
    return out


def segment_functionals(bt: BackwardTable, orders=(1, 2, 3)) -> np.ndarray:
    """Raw posterior height moments for every stored (start, end); shape (entries, len(orders))."""
    fwd = bt.fwd
    g = bt.grid
    fam = fwd.model.observation
    y = fwd.data.values
    if isinstance(fam, LaplaceMedian):
        stats = laplace_entry_stats(bt)
        return stats[:, list(orders)]
    kern = ConjugateKernel(fam, y)
    a = np.maximum(g.j, 1)
    return np.column_stack(kern.moments(a, g.i, orders))


def laplace_entry_stats(bt: BackwardTable, full: bool = True) -> np.ndarray:
    """Per-entry Laplace summaries (log Z, raw moments 1..3, E|X - mu|, E[energy], mode).

    ``full=False`` skips the moments and the mode (NaN) for a faster pass.
    """
    fwd = bt.fwd
    g = bt.grid
    fam = fwd.model.observation
    starts, rowptr, perm, lasts = g.rows()
    y1 = np.concatenate(([0.0], fwd.data.values))
    out = np.empty((g.size, 7))
    core.row_functionals(y1, fam.mu, 1.0 / fam.tau, 1.0 / fam.sigma, starts, lasts, perm, out, full)
    return out


@njit(cache=True)
def _sweep(n, indptr, js, i_of, starts, rowptr, perm, sw, H, resync, reads):
    m = H.shape[1]
    out = np.zeros((n + 1, m))
    acc = np.zeros(m)
    # row index by start j
    row_of = -np.ones(n + 1, dtype=np.int64)
    for r in range(starts.size):
        row_of[starts[r]] = r
    for i in range(n, 0, -1):
        direct = (i == n) or (resync > 0 and (n - i) % resync == 0)
        if direct:
            acc[:] = 0.0
            for e in range(indptr[0], indptr[n + 1]):
                if js[e] <= i and i_of[e] >= i:
                    for k in range(m):
                        acc[k] += sw[e] * H[e, k]
            if i == n:
                for e in range(indptr[n], indptr[n + 1]):
                    reads[e] += 1
        else:
            # remove segments starting at i + 1
            r = row_of[i + 1]
            if r >= 0:
                for p in range(rowptr[r], rowptr[r + 1]):
                    e = perm[p]
                    reads[e] += 1
                    for k in range(m):
                        acc[k] -= sw[e] * H[e, k]
            # add segments ending at i
            for e in range(indptr[i], indptr[i + 1]):
                reads[e] += 1
                for k in range(m):
                    acc[k] += sw[e] * H[e, k]
        for k in range(m):
            out[i, k] = acc[k]
    return out[1:]


def height_moment_trajectory(bt: BackwardTable, q_tilde: Optional[np.ndarray] = None, orders=(1, 2, 3),
                             resync: int = 512, H: Optional[np.ndarray] = None, counts: bool = False):
    """``E[X_i^m | y]`` for every ``i`` and each order, shape (n, len(orders)).

    Uses the incremental add/remove sweep, recomputing the sum from scratch
    every ``resync`` steps (0 disables).  With ``counts=True`` also returns the
    number of incremental reads of each stored entry.
    """
    g = bt.grid
    sw = segment_weights(bt, q_tilde)
    H = segment_functionals(bt, orders) if H is None else np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    starts, rowptr, perm, _ = g.rows()
    reads = np.zeros(g.size, dtype=np.int64)
    traj = _sweep(g.n, g.indptr, g.j, g.i, starts, rowptr, perm, sw, np.ascontiguousarray(H), int(resync), reads)
    return (traj, reads) if counts else traj


def height_moment_direct(bt: BackwardTable, q_tilde: Optional[np.ndarray] = None, orders=(1, 2, 3),
                         H: Optional[np.ndarray] = None) -> np.ndarray:
    """Same quantity evaluated from scratch at each ``i`` (quadratic; reference path)."""
    g = bt.grid
    sw = segment_weights(bt, q_tilde)
    H = segment_functionals(bt, orders) if H is None else np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    ii = g.i
    out = np.empty((g.n, H.shape[1]))
    for i in range(1, g.n + 1):
        sel = (g.j <= i) & (ii >= i) & (ii >= 1)
        out[i - 1] = sw[sel] @ H[sel]
    return out


def summary_bands(traj: np.ndarray):
    """(mean, sd, skew, lo, hi) from raw moments 1..3 per timepoint.

    The band is ``[m - 2 (sd - sk [sk < 0]), m + 2 (sd + sk [sk >= 0])]``.
    """
    traj = np.atleast_2d(np.asarray(traj, dtype=float))
    m1, m2, m3 = traj[:, 0], traj[:, 1], traj[:, 2]
    var = m2 - m1 * m1
    neg = var < 0
    if np.any(neg):
        warnings.warn(f"negative variance from rounding clamped at {int(neg.sum())} timepoints", RuntimeWarning)
        var = np.where(neg, 0.0, var)
    sd = np.sqrt(var)
    c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1**3
    with np.errstate(divide="ignore", invalid="ignore"):
        sk = np.where(sd > 0, c3 / sd**3, 0.0)
    lo = m1 - 2.0 * (sd - np.where(sk < 0, sk, 0.0))
    hi = m1 + 2.0 * (sd + np.where(sk >= 0, sk, 0.0))
    return m1, sd, sk, lo, hi


def marginal_report(bt: BackwardTable, resync: int = 512) -> MarginalReport:
    q = changepoint_marginals(bt)
    traj = height_moment_trajectory(bt, q, (1, 2, 3), resync)
    m, sd, sk, lo, hi = summary_bands(traj)
    return MarginalReport(q, float(q.sum()), m, sd, sk, lo, hi)
