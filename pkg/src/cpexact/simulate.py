"""Synthetic piecewise-constant series with known changepoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .model import ModelError, TimeSeries


def uniform_k_changepoints(n: int, k: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """A uniformly random ``k``-subset of ``1..n`` by one sequential pass."""
    if not (0 < k <= n):
        raise ModelError(f"need 0 < k <= n, got k={k}, n={n}")
    out = []
    u = rng.random(n)
    for i in range(1, n + 1):
        placed = len(out)
        if placed == k:
            break
        if u[i - 1] < (k - placed) / (n - i + 1):
            out.append(i)
    return tuple(out)


def _draw(law: dict, size, rng: np.random.Generator, center=0.0):
    kind = law["kind"]
    loc = center + law.get("loc", 0.0)
    scale = float(law.get("scale", 1.0))
    if scale < 0:
        raise ModelError("scale must be >= 0")
    if scale == 0:
        return np.broadcast_to(np.asarray(loc, dtype=float), size).copy()
    if kind == "laplace":
        return rng.laplace(loc, scale, size)
    if kind == "normal":
        return rng.normal(loc, scale, size)
    raise ModelError(f"unknown law {kind!r}")


@dataclass
class PiecewiseSpec:
    """``k`` uniform changepoints, explicit ``taus`` or geometric placement with ``q``.

    Laws are dicts ``{"kind": "normal"|"laplace", "loc": ..., "scale": ...}``;
    noise is centered at the segment height.
    """

    n: int
    heights: dict
    noise: dict
    k: Optional[int] = None
    taus: Optional[Sequence[int]] = None
    q: Optional[float] = None
    allow_first: bool = False


@dataclass
class Truth:
    taus: Tuple[int, ...]
    heights: np.ndarray
    signal: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"changepoints": list(self.taus), "heights": [float(h) for h in self.heights]}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _place(spec: PiecewiseSpec, rng) -> Tuple[int, ...]:
    n = spec.n
    lo = 1 if spec.allow_first else 2
    if spec.taus is not None:
        t = tuple(sorted(int(v) for v in spec.taus))
        if any(v < lo or v > n for v in t) or len(set(t)) != len(t):
            raise ModelError("explicit changepoints out of range or repeated")
        return t
    if spec.k is not None:
        m = n - lo + 1
        if spec.k == 0:
            return ()
        return tuple(v + lo - 1 for v in uniform_k_changepoints(m, spec.k, rng))
    if spec.q is not None:
        if not (0 < spec.q < 1):
            raise ModelError("q must lie in (0, 1)")
        hits = rng.random(n) < spec.q
        return tuple(int(i) + 1 for i in np.flatnonzero(hits) if i + 1 >= lo)
    raise ModelError("give k, taus or q")


def gen_piecewise(spec: PiecewiseSpec, rng: np.random.Generator):
    if spec.n < 1:
        raise ModelError("n must be positive")
    taus = _place(spec, rng)
    bounds = [1] + [t for t in taus if t > 1] + [spec.n + 1]
    if taus and taus[0] == 1:
        bounds = [1] + list(taus[1:]) + [spec.n + 1]
    nseg = len(bounds) - 1
    h = _draw(spec.heights, nseg, rng)
    signal = np.repeat(h, np.diff(bounds))
    y = _draw(spec.noise, spec.n, rng, center=signal)
    return TimeSeries(y), Truth(taus, h, signal)


PRESETS = {
    "emstudy": dict(n=4050, k=12, heights={"kind": "laplace", "loc": 0.0, "scale": 10.0},
                    noise={"kind": "laplace", "scale": 1.0}),
    "intro": dict(n=500, q=3 / 550, heights={"kind": "normal", "loc": 0.0, "scale": 5.0},
                  noise={"kind": "normal", "scale": 1.0}),
}


def preset_spec(name: str, **overrides) -> PiecewiseSpec:
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PiecewiseSpec(**{**PRESETS[name], **overrides})
