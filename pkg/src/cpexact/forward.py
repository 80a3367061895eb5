"""Forward filtering of run-length posteriors, with optional on-the-fly pruning.

For each timepoint ``i`` the filter keeps the weights ``c[j, i] = P(C_i = j |
y_1..y_i)`` of all live segment starts ``j`` and the normalizer ``Z_i =
p(y_i | y_1..y_{i-1})``.  Weights are kept in the linear domain; the log
predictives are shifted by their per-step maximum before exponentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .conjugate import ConjugateKernel
from .laplace import LaplaceBank, segment_state
from .model import HazardTable, LaplaceMedian, ModelConfig, ModelError, Pruning, TimeSeries, build_hazard


class FilterError(ArithmeticError):
    """Non-finite predictive or normalizer during filtering."""


@dataclass
class ParticleGrid:
    """Sparse triangular table of weights stored by column (fixed ``i``).

    Column ``i`` (0..n) occupies ``indptr[i]:indptr[i+1]`` of ``j`` and
    ``w``, with ``j`` ascending.  Column 0 is the single entry ``c[0, 0] = 1``.
    The row view (fixed ``j``, ascending ``i``) is built lazily.
    """

    n: int
    indptr: np.ndarray
    j: np.ndarray
    w: np.ndarray
    _rows: Optional[tuple] = field(default=None, repr=False)

    @property
    def i(self) -> np.ndarray:
        """Column index of every stored entry."""
        return np.repeat(np.arange(self.n + 1), np.diff(self.indptr))

    def column(self, i: int):
        s = slice(self.indptr[i], self.indptr[i + 1])
        return self.j[s], self.w[s]

    def rows(self):
        """``(starts, rowptr, perm, lasts)``: entries of row ``starts[r]`` are
        ``perm[rowptr[r]:rowptr[r+1]]`` in ascending ``i``; ``lasts[r]`` is the
        last live ``i`` of that row."""
        if self._rows is None:
            perm = np.argsort(self.j, kind="stable")
            js = self.j[perm]
            starts, first, counts = np.unique(js, return_index=True, return_counts=True)
            rowptr = np.concatenate((first, [js.size])).astype(np.int64)
            ii = self.i[perm]
            lasts = ii[rowptr[1:] - 1]
            self._rows = (starts.astype(np.int64), rowptr, perm.astype(np.int64), lasts.astype(np.int64))
        return self._rows

    def lookup(self, j: int, i: int) -> float:
        """Weight at (j, i), or NaN if the particle does not exist."""
        cj, cw = self.column(i)
        k = np.searchsorted(cj, j)
        if k < cj.size and cj[k] == j:
            return float(cw[k])
        return math.nan

    def dense(self) -> np.ndarray:
        """Dense (n+1) x (n+1) matrix indexed [j, i], NaN where absent; for small n."""
        out = np.full((self.n + 1, self.n + 1), np.nan)
        out[self.j, self.i] = self.w
        return out

    @property
    def size(self) -> int:
        return int(self.j.size)


@dataclass
class ForwardResult:
    data: TimeSeries
    model: ModelConfig
    hazard: HazardTable
    grid: ParticleGrid
    log_z: np.ndarray
    particle_counts: np.ndarray
    clamped_steps: int = 0

    @property
    def n(self) -> int:
        return self.data.n

    def log_marginal_likelihood(self) -> float:
        return float(np.sum(self.log_z))

    def kernel_state(self, j: int, i: int):
        """Posterior height state for the segment starting at ``j`` observed up to ``i``."""
        if math.isnan(self.grid.lookup(j, i)):
            raise KeyError(f"particle ({j}, {i}) is not live")
        a = max(j, 1)
        fam = self.model.observation
        if isinstance(fam, LaplaceMedian):
            return segment_state(fam, self.data.values[a - 1 : i])
        return ConjugateKernel(fam, self.data.values).state(a, i)


def log_marginal_likelihood(result: ForwardResult) -> float:
    return result.log_marginal_likelihood()


@njit(cache=True)
def _prune_mask(d, age, T, tprime):
    """Pruning decision for particles given in evaluation order."""
    keep = np.empty(d.size, dtype=np.bool_)
    z = 0.0
    for k in range(d.size):
        if age[k] < T or d[k] >= z * tprime:
            keep[k] = True
            z += d[k]
        else:
            keep[k] = False
    return keep


class _ConjugatePredictor:
    def __init__(self, family, y):
        self.kernel = ConjugateKernel(family, y)

    def spawn(self):
        return 0

    def release(self, slots):
        pass

    def predict(self, live_j, slots, i, yi):
        a = np.maximum(live_j, 1)
        return self.kernel.log_predictive(a, np.full(a.shape, i - 1), yi)


class _LaplacePredictor:
    def __init__(self, family):
        self.bank = LaplaceBank(family)

    def spawn(self):
        return self.bank.spawn()

    def release(self, slots):
        self.bank.release(slots)

    def predict(self, live_j, slots, i, yi):
        return self.bank.observe(slots, yi)


def _predictor(model: ModelConfig, y: np.ndarray):
    fam = model.observation
    if isinstance(fam, LaplaceMedian):
        return _LaplacePredictor(fam)
    return _ConjugatePredictor(fam, y)


def _run(data: TimeSeries, model: ModelConfig, hazard: Optional[HazardTable], T: Optional[int],
         tprime: float, order: str, reassign: bool = False) -> ForwardResult:
    y = data.values
    n = data.n
    hz = hazard if hazard is not None else build_hazard(model.length_prior, n)
    pred = _predictor(model, y)
    prune = T is not None
    if order not in ("descending", "ascending"):
        raise ModelError(f"unknown pruning order {order!r}")

    live_j = np.zeros(1, dtype=np.int64)
    live_c = np.ones(1)
    slots = np.array([pred.spawn()], dtype=np.int64)

    cols_j = [live_j.copy()]
    cols_w = [live_c.copy()]
    log_z = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    clamped = 0

    for i in range(1, n + 1):
        yi = y[i - 1]
        new_slot = pred.spawn()
        lr_old = pred.predict(live_j, slots, i, yi)
        lr_new = pred.predict(np.array([i]), np.array([new_slot], dtype=np.int64), i, yi)[0]
        if not (np.all(np.isfinite(lr_old)) and math.isfinite(lr_new)):
            bad = np.flatnonzero(~np.isfinite(lr_old))
            jj = int(live_j[bad[0]]) if bad.size else i
            raise FilterError(f"non-finite predictive at particle ({jj}, {i})")
        shift = max(float(lr_old.max()), lr_new)
        q = hz.survival(live_j, i)
        prior_mass = live_c * q
        d = prior_mass * np.exp(lr_old - shift)
        stay = float(prior_mass.sum())

        if prune:
            if order == "descending":
                idx = np.arange(d.size - 1, -1, -1)
            else:
                idx = np.arange(d.size)
            keep_o = _prune_mask(d[idx], (i - live_j)[idx], T, tprime)
            keep = np.empty(d.size, dtype=np.bool_)
            keep[idx] = keep_o
            if not keep.all():
                pred.release(slots[~keep])
                live_j, slots, d, prior_mass = live_j[keep], slots[keep], d[keep], prior_mass[keep]
                if reassign:
                    stay = float(prior_mass.sum())

        fresh = 1.0 - stay
        if fresh < 0.0:
            fresh = 0.0
            clamped += 1
        d_new = fresh * math.exp(lr_new - shift)
        z = float(d.sum()) + d_new
        if not (z > 0.0 and math.isfinite(z)):
            raise FilterError(f"normalizer vanished at timepoint {i}")
        log_z[i - 1] = math.log(z) + shift

        live_j = np.append(live_j, i)
        live_c = np.append(d, d_new) / z
        slots = np.append(slots, new_slot)
        counts[i - 1] = live_j.size
        cols_j.append(live_j)
        cols_w.append(live_c)

    lens = np.fromiter((c.size for c in cols_j), dtype=np.int64, count=n + 1)
    indptr = np.concatenate(([0], np.cumsum(lens)))
    grid = ParticleGrid(n, indptr, np.concatenate(cols_j), np.concatenate(cols_w))
    if prune:
        model = model.replace(prune=Pruning(T, tprime))
    return ForwardResult(data, model, hz, grid, log_z, counts, clamped)


def filter(data, model: ModelConfig, hazard: Optional[HazardTable] = None) -> ForwardResult:
    """Exact forward filter over all segment starts."""
    data = data if isinstance(data, TimeSeries) else TimeSeries(data)
    return _run(data, model.replace(prune=None), hazard, None, 0.0, "descending")


def filter_pruned(data, model: ModelConfig, T: int, Tprime: float, hazard: Optional[HazardTable] = None,
                  order: str = "descending", reassign: bool = False) -> ForwardResult:
    """Forward filter discarding particles of age >= T whose mass falls below
    ``Tprime`` times the normalizer accumulated so far at this step.

    ``order`` fixes the evaluation order of the live particles within a step
    (the accumulated normalizer, and hence the result, depends on it).

    The prior mass of a new changepoint is one minus the survival mass of all
    particles alive before the step, so pruning only removes likelihood mass.
    With ``reassign=True`` the survival mass counts survivors only and the
    prior mass of pruned particles moves to the new changepoint instead.
    """
    data = data if isinstance(data, TimeSeries) else TimeSeries(data)
    if T < 1 or Tprime < 0:
        raise ModelError("pruning needs T >= 1 and T' >= 0")
    return _run(data, model, hazard, int(T), float(Tprime), order, reassign)


def run_filter(data, model: ModelConfig, hazard: Optional[HazardTable] = None) -> ForwardResult:
    """Dispatch on ``model.prune``."""
    if model.prune is None:
        return filter(data, model, hazard)
    return filter_pruned(data, model, model.prune.T, model.prune.Tprime, hazard)
