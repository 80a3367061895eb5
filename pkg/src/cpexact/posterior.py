"""Backward (retrospective) inference on a filtered grid.

``bw[j, i] = P(C_i = j | C_{i+1} = i+1, y_1..y_n)`` for ``i < n`` and
``bw[j, n] = c[j, n]``.  Everything below (configuration likelihoods, MAP,
exact sampling, entropy) is a single pass over these weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numba import njit

from .conjugate import ConjugateKernel
from .forward import ForwardResult, ParticleGrid
from .laplace import lap_sample_height, segment_state
from .model import HazardTable, LaplaceMedian, ModelError


@dataclass
class BackwardTable:
    grid: ParticleGrid
    fwd: ForwardResult
    impossible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.grid.n


@dataclass(frozen=True)
class ChangepointConfig:
    taus: tuple

    def __init__(self, taus: Sequence[int] = (), n: Optional[int] = None):
        t = tuple(int(v) for v in taus)
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ModelError("changepoints must be strictly increasing")
        if t and (t[0] < 1 or (n is not None and t[-1] > n)):
            raise ModelError("changepoints out of range")
        object.__setattr__(self, "taus", t)

    def __len__(self):
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def segments(self, n: int):
        """``(start, end)`` pairs; a head segment without changepoint starts at 0."""
        bounds = list(self.taus)
        out = []
        if not bounds or bounds[0] > 1:
            out.append((0, (bounds[0] - 1) if bounds else n))
        for k, t in enumerate(bounds):
            end = bounds[k + 1] - 1 if k + 1 < len(bounds) else n
            out.append((t, end))
        return out


def backward_weights(fwd: ForwardResult, hazard: Optional[HazardTable] = None) -> BackwardTable:
    hz = hazard if hazard is not None else fwd.hazard
    g = fwd.grid
    n = g.n
    ii = g.i
    inner = ii < n
    tilde = g.w.copy()
    surv = hz.survival_pairs(g.j[inner], ii[inner] + 1)
    tilde[inner] = g.w[inner] * (1.0 - surv)
    # column sums over i < n
    sums = np.add.reduceat(tilde, g.indptr[:-1])[:n]
    if np.any(sums < 0.0) or not np.all(np.isfinite(sums)):
        raise ArithmeticError("invalid backward normalizer")
    # a zero sum means a changepoint at i + 1 is impossible; the column is then
    # never used with positive weight, so the filter weights stand in for it
    dead = np.flatnonzero(sums == 0.0)
    for i in dead:
        s_ = slice(g.indptr[i], g.indptr[i + 1])
        tilde[s_] = g.w[s_]
    sums[dead] = 1.0
    tilde[inner] /= np.repeat(sums, np.diff(g.indptr)[:n])
    return BackwardTable(ParticleGrid(n, g.indptr, g.j, tilde), fwd, dead)


def config_log_likelihood(bt: BackwardTable, cfg, with_flag: bool = False):
    """log P(C = cfg | y).  Returns ``-inf`` (and flag False) when an entry was pruned."""
    cfg = cfg if isinstance(cfg, ChangepointConfig) else ChangepointConfig(cfg, bt.n)
    total = 0.0
    ok = True
    for j, end in cfg.segments(bt.n):
        v = bt.grid.lookup(j, end) if end >= 0 else math.nan
        if math.isnan(v):
            ok = False
            total = -math.inf
            break
        total += math.log(v) if v > 0 else -math.inf
    return (total, ok) if with_flag else total


def config_is_supported(bt: BackwardTable, cfg) -> bool:
    return config_log_likelihood(bt, cfg, with_flag=True)[1]


@njit(cache=True)
def _map_dp(n, indptr, js, ws):
    F = np.zeros(n + 2)  # F[i + 1] = best log prob of c_1..c_i given a changepoint at i+1
    K = np.zeros(n + 2, dtype=np.int64)
    arg = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        best = -np.inf
        bk = 0
        bj = -1
        for e in range(indptr[i], indptr[i + 1]):
            j = js[e]
            w = ws[e]
            if w <= 0.0:
                continue
            val = F[j] + math.log(w)  # F[j] is F(j - 1)
            cnt = K[j] + (1 if j >= 1 else 0)
            tol = 1e-12 * max(1.0, abs(val), abs(best)) if best > -np.inf else 0.0
            if bj < 0 or val > best + tol:
                best, bk, bj = val, cnt, j
            elif abs(val - best) <= tol and (cnt < bk or (cnt == bk and j > bj)):
                best, bk, bj = val, cnt, j
        F[i + 1] = best
        K[i + 1] = bk
        arg[i] = bj
    return F[n + 1], arg


def map_segmentation(bt: BackwardTable, with_value: bool = False):
    """Most probable changepoint configuration (ties: fewer changepoints, then later ones)."""
    g = bt.grid
    val, arg = _map_dp(g.n, g.indptr, g.j, g.w)
    taus = []
    i = g.n
    while i > 0:
        j = int(arg[i])
        if j <= 0:
            break
        taus.append(j)
        i = j - 1
    cfg = ChangepointConfig(sorted(taus), g.n)
    return (cfg, float(val)) if with_value else cfg


@njit(cache=True)
def _sample_block(n, indptr, js, suffix, u, out, offs):
    draws = offs.size - 1
    pos = 0
    for d in range(draws):
        offs[d] = pos
        i = n
        k = 0
        while i > 0:
            uu = u[d, k]
            k += 1
            lo = indptr[i]
            hi = indptr[i + 1]
            # walking j = i, i-1, ..., the running sum equals suffix[e]; take the first e with suffix >= u
            e = hi - 1
            a = lo
            b = hi - 1
            if suffix[lo] < uu:
                e = lo
            else:
                while a < b:
                    mid = (a + b + 1) // 2
                    if suffix[mid] >= uu:
                        a = mid
                    else:
                        b = mid - 1
                e = a
            j = js[e]
            if j == 0:
                break
            out[pos] = j
            pos += 1
            i = j - 1
    offs[draws] = pos
    return pos


def sample_changepoints(bt: BackwardTable, rng: np.random.Generator, draws: Optional[int] = None):
    """Exact posterior draw(s) of the changepoint set.

    Returns a :class:`ChangepointConfig` for ``draws=None``, else a list of them.
    """
    single = draws is None
    m = 1 if single else int(draws)
    if m < 1:
        raise ModelError("number of draws must be positive")
    g = bt.grid
    n = g.n
    # per-column suffix sums in ascending-j storage == running sums over descending j
    rev = g.w[::-1]
    cs = np.cumsum(rev)
    col_end = np.repeat(g.indptr[1:], np.diff(g.indptr))  # exclusive end of each entry's column
    # suffix[e] = sum of w[e:col_end]; computed via the reversed global cumsum
    total_rev = cs[::-1]  # total_rev[e] = sum(w[e:])
    tail = np.append(total_rev, 0.0)
    suffix = total_rev - tail[col_end]
    out_list: List[ChangepointConfig] = []
    block = max(1, min(m, int(2e7 // (n + 1))))
    done = 0
    while done < m:
        b = min(block, m - done)
        u = rng.random((b, n + 1))
        out = np.empty(b * n + 1, dtype=np.int64)
        offs = np.empty(b + 1, dtype=np.int64)
        _sample_block(n, g.indptr, g.j, suffix, u, out, offs)
        for d in range(b):
            taus = out[offs[d] : offs[d + 1]][::-1]
            out_list.append(ChangepointConfig(taus.tolist()))
        done += b
    return out_list[0] if single else out_list


def sample_heights(cfg, fwd: ForwardResult, rng: np.random.Generator) -> np.ndarray:
    """One height per segment of ``cfg`` drawn from its posterior, broadcast over the segment."""
    cfg = cfg if isinstance(cfg, ChangepointConfig) else ChangepointConfig(cfg, fwd.n)
    y = fwd.data.values
    fam = fwd.model.observation
    out = np.empty(fwd.n)
    kern = None if isinstance(fam, LaplaceMedian) else ConjugateKernel(fam, y)
    for j, end in cfg.segments(fwd.n):
        a = max(j, 1)
        if end < a:
            continue
        if kern is None:
            h = lap_sample_height(segment_state(fam, y[a - 1 : end]), rng)
        else:
            h = kern.sample(a, end, rng)
        out[a - 1 : end] = h
    return out


@njit(cache=True)
def _entropy(n, indptr, js, ws):
    e = np.zeros(n + 2)  # e[i + 1] = e_i, e[0] = e_{-1}
    for i in range(1, n + 1):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            w = ws[k]
            if w > 0.0:
                acc += w * (e[js[k]] + math.log(w))
        e[i + 1] = acc
    return -e[n + 1]


def entropy(bt: BackwardTable) -> float:
    g = bt.grid
    return float(_entropy(g.n, g.indptr, g.j, g.w))
