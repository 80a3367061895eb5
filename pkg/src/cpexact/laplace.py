"""Laplace change-in-median segment kernel.

The posterior of a segment median with a Laplace(mu, tau) prior and
Laplace(x, sigma) observations has density proportional to
``exp(-E(x))`` with the convex piecewise-linear energy

    E(x) = |x - mu| / tau + sum_l |y_l - x| / sigma.

A state stores the breakpoints of ``E`` as a sorted array of locations with
their inverse scales; all integrals are closed form per linear piece (see
``_laplace_core``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _laplace_core as core
from .model import LaplaceMedian, ModelError


@dataclass(frozen=True)
class LaplaceSegState:
    """Breakpoints (sorted locations ``z`` with inverse scales ``w``) plus cached log Z."""

    z: np.ndarray
    w: np.ndarray
    log_z: float

    @property
    def size(self) -> int:
        return int(self.z.size)

    @property
    def stabilizer(self) -> float:
        """Maximum of the negative energy, attained at the weighted median."""
        e = np.empty(self.size)
        core._energies(self.z, self.w, self.size, e)
        return -float(e.min())


def make_state(z, w=None) -> LaplaceSegState:
    z = np.asarray(z, dtype=float).ravel()
    w = np.ones_like(z) if w is None else np.broadcast_to(np.asarray(w, dtype=float), z.shape).copy()
    if z.size == 0:
        raise ModelError("a state needs at least one breakpoint")
    if not (np.all(np.isfinite(z)) and np.all(w > 0) and np.all(np.isfinite(w))):
        raise ModelError("breakpoints must be finite with positive inverse scales")
    order = np.argsort(z, kind="stable")
    z = np.ascontiguousarray(z[order])
    w = np.ascontiguousarray(w[order])
    return LaplaceSegState(z, w, float(core.log_partition(z, w, z.size, np.empty(z.size))))


def prior_state(family: LaplaceMedian) -> LaplaceSegState:
    return make_state([family.mu], [1.0 / family.tau])


def lap_insert(state: LaplaceSegState, y: float, inv_scale: float) -> tuple[LaplaceSegState, float]:
    """Add the breakpoint ``(y, inv_scale)``.

    Returns the new state and ``log Z_new - log Z_old``.  For an observation
    with scale ``sigma`` the log predictive is this value minus ``log(2 sigma)``.
    """
    if not np.isfinite(y):
        raise ModelError(f"non-finite observation {y}")
    k = state.size
    z = np.empty(k + 1)
    w = np.empty(k + 1)
    z[:k] = state.z
    w[:k] = state.w
    core.insert(z, w, k, float(y), float(inv_scale))
    lz = float(core.log_partition(z, w, k + 1, np.empty(k + 1)))
    return LaplaceSegState(z, w, lz), lz - state.log_z


def lap_observe(state: LaplaceSegState, y: float, family: LaplaceMedian) -> tuple[LaplaceSegState, float]:
    """Absorb an observation of ``family``; returns (state, log predictive)."""
    new, dlz = lap_insert(state, y, 1.0 / family.sigma)
    return new, dlz - math.log(2.0 * family.sigma)


def lap_log_partition(state: LaplaceSegState, shift: float = 0.0) -> float:
    """``log int exp(-E(x)) dx``; ``shift`` offsets the stabilizer (result is invariant)."""
    return float(core.log_partition(state.z, state.w, state.size, np.empty(state.size), shift))


def _stats(state: LaplaceSegState, center: float = 0.0) -> np.ndarray:
    out = np.empty(7)
    core.stats(state.z, state.w, state.size, np.empty(state.size), float(center), out)
    return out


def lap_moment(state: LaplaceSegState, m: int) -> float:
    """Raw moment ``E[X^m]`` for ``m`` in 1..3."""
    if m not in (1, 2, 3):
        raise ModelError(f"moment order must be 1, 2 or 3, got {m}")
    return float(_stats(state)[m])


def lap_central_moments(state: LaplaceSegState) -> tuple[float, float, float]:
    """Mean, variance and third central moment, computed around the mean directly."""
    out = np.empty(3)
    core.central_moments(state.z, state.w, state.size, np.empty(state.size), out)
    return float(out[0]), float(out[1]), float(out[2])


def lap_abs_moment(state: LaplaceSegState, center: float) -> float:
    """``E|X - center|``."""
    return float(_stats(state, center)[4])


def lap_energy_expectation(state: LaplaceSegState) -> float:
    """``E[E(X)]``: expected energy under the normalized density."""
    return float(_stats(state)[5])


def lap_mode(state: LaplaceSegState) -> float:
    """A maximizer of the density (midpoint if the maximum is a plateau)."""
    return float(_stats(state)[6])


def lap_sample_height(state: LaplaceSegState, rng: np.random.Generator, size: Optional[int] = None):
    ebuf = np.empty(state.size)
    if size is None:
        u = rng.random(2)
        return float(core.sample(state.z, state.w, state.size, ebuf, u[0], u[1]))
    u = rng.random((size, 2))
    return np.array([core.sample(state.z, state.w, state.size, ebuf, a, b) for a, b in u])


def segment_state(family: LaplaceMedian, y: np.ndarray) -> LaplaceSegState:
    """State after absorbing all of ``y`` into the prior."""
    y = np.asarray(y, dtype=float)
    z = np.concatenate(([family.mu], y))
    w = np.concatenate(([1.0 / family.tau], np.full(y.size, 1.0 / family.sigma)))
    return make_state(z, w)


class LaplaceBank:
    """Slot-based storage of many Laplace states for the forward filter.

    Each slot holds a sorted breakpoint row in a shared 2-D buffer; rows grow
    by doubling the buffer width when a segment outgrows it.
    """

    def __init__(self, family: LaplaceMedian, capacity: int = 64, width: int = 64):
        self.family = family
        self.wy = 1.0 / family.sigma
        self.log2s = math.log(2.0 * family.sigma)
        self.zbuf = np.empty((capacity, width))
        self.wbuf = np.empty((capacity, width))
        self.lens = np.zeros(capacity, dtype=np.int64)
        self.logz = np.zeros(capacity)
        self.free = list(range(capacity - 1, -1, -1))
        self.ebuf = np.empty(width)
        self._log_prior = math.log(2.0 * family.tau)

    def _grow_rows(self):
        cap, width = self.zbuf.shape
        self.zbuf = np.vstack([self.zbuf, np.empty((cap, width))])
        self.wbuf = np.vstack([self.wbuf, np.empty((cap, width))])
        self.lens = np.concatenate([self.lens, np.zeros(cap, dtype=np.int64)])
        self.logz = np.concatenate([self.logz, np.zeros(cap)])
        self.free.extend(range(2 * cap - 1, cap - 1, -1))

    def _grow_width(self, need: int):
        cap, width = self.zbuf.shape
        new = max(need, 2 * width)
        z = np.empty((cap, new))
        w = np.empty((cap, new))
        z[:, :width] = self.zbuf
        w[:, :width] = self.wbuf
        self.zbuf, self.wbuf = z, w
        self.ebuf = np.empty(new)

    def spawn(self) -> int:
        if not self.free:
            self._grow_rows()
        s = self.free.pop()
        self.zbuf[s, 0] = self.family.mu
        self.wbuf[s, 0] = 1.0 / self.family.tau
        self.lens[s] = 1
        self.logz[s] = self._log_prior
        return s

    def release(self, slots):
        self.free.extend(int(s) for s in slots)

    def observe(self, slots: np.ndarray, y: float) -> np.ndarray:
        """Insert ``y`` into each slot and return the log predictives."""
        slots = np.asarray(slots, dtype=np.int64)
        if slots.size and self.lens[slots].max() + 1 > self.zbuf.shape[1]:
            self._grow_width(int(self.lens[slots].max()) + 1)
        out = np.empty(slots.size)
        core.bank_step(self.zbuf, self.wbuf, self.lens, self.logz, slots, float(y), self.wy, self.ebuf, out)
        return out - self.log2s

    def state(self, slot: int) -> LaplaceSegState:
        k = int(self.lens[slot])
        return LaplaceSegState(self.zbuf[slot, :k].copy(), self.wbuf[slot, :k].copy(), float(self.logz[slot]))
