"""Changepoint model definition: segment-length priors, survival tables and configs.

A changepoint model is described by three pieces:

* a prior on segment lengths, turned into survival probabilities
  ``P(C_i = j | C_{i-1} = j)`` by :func:`build_hazard`,
* an observation family (segment-height prior plus observation noise),
* optional on-the-fly pruning thresholds for the forward filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln, logsumexp


class ModelError(ValueError):
    """Raised for invalid model parameters or configurations."""


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 1:
            raise ModelError("time series must contain at least one value")
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0]) + 1
            raise ModelError(f"non-finite observation at position {bad}")
        object.__setattr__(self, "values", v)
        if self.timestamps is not None:
            t = np.asarray(self.timestamps, dtype=float).ravel()
            if t.shape != v.shape:
                raise ModelError("timestamps must match the number of values")
            object.__setattr__(self, "timestamps", t)

    @property
    def n(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.n


# ---------------------------------------------------------------------------
# length priors and survival tables


@dataclass(frozen=True)
class LengthPrior:
    """Prior on segment lengths.

    ``kind`` is ``"geometric"`` (success probability ``q``), ``"negbin"``
    (``q`` and integer ``r``; the count of extra timepoints after the first
    one is NB(r, q)) or ``"pertime"`` (an explicit survival probability per
    timepoint, shared by every segment).
    """

    kind: str = "geometric"
    q: float = 0.01
    r: int = 1
    survival: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind == "pertime":
            if self.survival is None or len(self.survival) == 0:
                raise ModelError("pertime prior needs a survival sequence")
            s = tuple(float(v) for v in self.survival)
            if any(not (0.0 <= v <= 1.0) for v in s):
                raise ModelError("per-timepoint survival values must lie in [0, 1]")
            object.__setattr__(self, "survival", s)
            return
        if kind not in ("geometric", "negbin"):
            raise ModelError(f"unknown length prior {self.kind!r}")
        if not (0.0 < self.q < 1.0):
            raise ModelError(f"q must lie in (0, 1), got {self.q}")
        if kind == "negbin":
            if int(self.r) != self.r or self.r < 1:
                raise ModelError(f"r must be a positive integer, got {self.r}")
            object.__setattr__(self, "r", int(self.r))
            if self.q > self.r / (self.r + 1.0):
                raise ModelError(f"negative binomial prior needs q <= r/(r+1), got q={self.q}, r={self.r}")

    @classmethod
    def geometric(cls, q: float) -> "LengthPrior":
        return cls("geometric", q=q)

    @classmethod
    def negbin(cls, q: float, r: int) -> "LengthPrior":
        return cls("negbin", q=q, r=r)

    @classmethod
    def pertime(cls, survival: Sequence[float]) -> "LengthPrior":
        return cls("pertime", survival=tuple(survival))


def residual_success_prob(q: float, r: int) -> float:
    """Success probability of the geometric law used for the first segment."""
    if not (0.0 < q < 1.0):
        raise ModelError(f"q must lie in (0, 1), got {q}")
    if r < 1:
        raise ModelError(f"r must be positive, got {r}")
    if q > r / (r + 1.0):
        raise ModelError(f"q={q} exceeds r/(r+1)={r / (r + 1.0)}")
    return min(1.0, q / (r * (1.0 - q)))


def negbin_log_tail(q: float, r: int, lmax: int) -> np.ndarray:
    """``log P(M >= l)`` for ``l = 0..lmax`` with ``M ~ NB(r, q)`` counting failures.

    Uses the identity ``P(M >= l) = P(Bin(l + r - 1, q) < r)`` which is a short
    finite sum for integer ``r`` and stays accurate deep into the tail.
    """
    ell = np.arange(lmax + 1, dtype=float)
    trials = ell[:, None] + (r - 1)
    k = np.arange(r, dtype=float)[None, :]
    logc = gammaln(trials + 1) - gammaln(k + 1) - gammaln(trials - k + 1)
    terms = logc + k * math.log(q) + (trials - k) * math.log1p(-q)
    out = logsumexp(terms, axis=1)
    out[0] = 0.0
    return np.minimum(out, 0.0)


@dataclass(frozen=True)
class HazardTable:
    """Survival probabilities ``P(C_i = j | C_{i-1} = j)``.

    For ``j >= 1`` the value depends on the gap ``d = i - j`` only (``gap``
    array, index ``d``); the first segment (``j = 0``) uses ``first``.  A
    per-timepoint table overrides both with a value per ``i``.
    """

    n: int
    gap: np.ndarray
    first: float
    per_time: Optional[np.ndarray] = None

    def gap_survival(self, d: int) -> float:
        if self.per_time is not None:
            raise ModelError("per-timepoint tables are not stationary in the gap")
        if d < 1:
            raise ModelError("gap must be >= 1")
        return float(self.gap[min(d, self.gap.size - 1)])

    def first_row(self, i: int) -> float:
        if self.per_time is not None:
            return float(self.per_time[i])
        return float(self.first)

    def survival(self, j: np.ndarray, i: int) -> np.ndarray:
        """Survival from ``i-1`` to ``i`` for the segments starting at ``j``."""
        j = np.asarray(j)
        if self.per_time is not None:
            return np.full(j.shape, self.per_time[i], dtype=float)
        d = np.minimum(i - j, self.gap.size - 1)
        return np.where(j == 0, self.first, self.gap[d])

    def survival_pairs(self, j: np.ndarray, i: np.ndarray) -> np.ndarray:
        """Elementwise survival ``q_{j,i}`` for index arrays ``j`` and ``i``."""
        j = np.asarray(j)
        i = np.asarray(i)
        if self.per_time is not None:
            return self.per_time[np.minimum(i, self.n + 1)].astype(float)
        d = np.clip(i - j, 0, self.gap.size - 1)
        return np.where(j == 0, self.first, self.gap[d])

    @classmethod
    def per_timepoint(cls, survival: Sequence[float]) -> "HazardTable":
        s = np.asarray(survival, dtype=float)
        n = s.size
        # index 0 unused, index n+1 is the survival beyond the horizon
        table = np.ones(n + 2)
        table[1 : n + 1] = s
        table[n + 1] = s[-1]
        return cls(n=n, gap=np.ones(1), first=float(s[0]), per_time=table)


def build_hazard(prior: LengthPrior, n: int) -> HazardTable:
    if n < 1:
        raise ModelError("horizon must be positive")
    if prior.kind == "geometric":
        gap = np.full(n + 2, 1.0 - prior.q)
        gap[0] = 1.0
        return HazardTable(n=n, gap=gap, first=1.0 - prior.q)
    if prior.kind == "negbin":
        qp = residual_success_prob(prior.q, prior.r)
        logs = negbin_log_tail(prior.q, prior.r, n + 1)
        gap = np.ones(n + 2)
        # S(d) / S(d-1), where S(l) = P(M >= l)
        gap[1:] = np.exp(logs[1:] - logs[:-1])
        return HazardTable(n=n, gap=np.clip(gap, 0.0, 1.0), first=1.0 - qp)
    if prior.kind == "pertime":
        s = np.asarray(prior.survival, dtype=float)
        if s.size < n:
            raise ModelError(f"per-timepoint prior covers {s.size} timepoints, need {n}")
        return HazardTable.per_timepoint(s[:n])
    raise ModelError(f"unknown length prior {prior.kind!r}")


# ---------------------------------------------------------------------------
# observation families


@dataclass(frozen=True)
class GaussianMean:
    """Gaussian noise with known scale ``sigma``; heights ~ N(mu0, tau0^2)."""

    sigma: float = 1.0
    mu0: float = 0.0
    tau0: float = 1.0
    name = "gaussian_mean"

    def __post_init__(self):
        _positive(sigma=self.sigma, tau0=self.tau0)
        _finite(mu0=self.mu0)

    def params(self) -> Dict[str, float]:
        return {"sigma": self.sigma, "mu0": self.mu0, "tau0": self.tau0}


@dataclass(frozen=True)
class GaussianVar:
    """Gaussian noise around known ``mu``; segment variances ~ InvGamma(alpha, beta)."""

    mu: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    name = "gaussian_var"

    def __post_init__(self):
        _positive(alpha=self.alpha, beta=self.beta)
        _finite(mu=self.mu)

    def params(self) -> Dict[str, float]:
        return {"mu": self.mu, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class LaplaceMedian:
    """Laplace noise with scale ``sigma``; medians ~ Laplace(mu, tau)."""

    mu: float = 0.0
    tau: float = 1.0
    sigma: float = 1.0
    name = "laplace_median"

    def __post_init__(self):
        _positive(tau=self.tau, sigma=self.sigma)
        _finite(mu=self.mu)

    def params(self) -> Dict[str, float]:
        return {"mu": self.mu, "tau": self.tau, "sigma": self.sigma}


Family = Union[GaussianMean, GaussianVar, LaplaceMedian]

FAMILIES = {
    "gaussian_mean": GaussianMean,
    "gaussian_var": GaussianVar,
    "laplace_median": LaplaceMedian,
}


def _positive(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise ModelError(f"{k} must be finite and > 0, got {v}")


def _finite(**kw):
    for k, v in kw.items():
        if not np.isfinite(v):
            raise ModelError(f"{k} must be finite, got {v}")


@dataclass(frozen=True)
class Pruning:
    T: int
    Tprime: float

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ModelError(f"T must be a positive integer, got {self.T}")
        if not (self.Tprime >= 0 and np.isfinite(self.Tprime)):
            raise ModelError(f"T' must be finite and >= 0, got {self.Tprime}")
        object.__setattr__(self, "T", int(self.T))


@dataclass(frozen=True)
class ModelConfig:
    length_prior: LengthPrior
    observation: Family
    prune: Optional[Pruning] = None

    def replace(self, **kw) -> "ModelConfig":
        d = {"length_prior": self.length_prior, "observation": self.observation, "prune": self.prune}
        d.update(kw)
        return ModelConfig(**d)

    def to_dict(self) -> Dict[str, Any]:
        lp: Dict[str, Any] = {"kind": self.length_prior.kind}
        if self.length_prior.kind == "pertime":
            lp["survival"] = list(self.length_prior.survival)
        else:
            lp["q"] = self.length_prior.q
            if self.length_prior.kind == "negbin":
                lp["r"] = self.length_prior.r
        out: Dict[str, Any] = {
            "length_prior": lp,
            "observation": {"family": self.observation.name, "params": self.observation.params()},
        }
        if self.prune is not None:
            out["prune"] = {"T": self.prune.T, "Tprime": self.prune.Tprime}
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        try:
            lp = d["length_prior"]
            kind = lp["kind"]
            if kind == "pertime":
                prior = LengthPrior.pertime(lp["survival"])
            else:
                prior = LengthPrior(kind, q=float(lp["q"]), r=int(lp.get("r", 1)))
            obs = d["observation"]
            fam = FAMILIES.get(obs["family"])
            if fam is None:
                raise ModelError(f"unknown observation family {obs['family']!r}")
            family = fam(**{k: float(v) for k, v in obs.get("params", {}).items()})
            prune = None
            if d.get("prune") is not None:
                prune = Pruning(int(d["prune"]["T"]), float(d["prune"]["Tprime"]))
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed model config: {exc}") from exc
        return cls(prior, family, prune)

    def to_json(self, path: Union[str, Path, None] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source: Union[str, Path]) -> "ModelConfig":
        p = Path(source)
        text = p.read_text() if p.exists() else str(source)
        return cls.from_dict(json.loads(text))


def load_preset(name: str) -> ModelConfig:
    """Load a bundled model configuration, e.g. ``"welllog"``."""
    from importlib import resources

    ref = resources.files("cpexact").joinpath("presets", f"{name}.json")
    if not ref.is_file():
        raise ModelError(f"no preset named {name!r}")
    return ModelConfig.from_dict(json.loads(ref.read_text()))
