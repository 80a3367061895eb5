"""Simultaneous credible regions from posterior changepoint samples.

A region ``A`` covers a sample ``s`` when ``s`` is a subset of ``A``.  The
smallest region covering at least a ``1 - alpha`` fraction of the samples is
searched greedily (nested ladder), by brute force (small ``n``) or through an
exported integer program.
"""

from __future__ import annotations

import csv
import itertools
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import ModelError

DEFAULT_ALPHAS = tuple(k / 30 for k in range(1, 30))


def required_count(m: int, alpha: float) -> int:
    """Number of samples a region must cover: ``ceil(m (1 - alpha))``."""
    if not (0.0 <= alpha <= 1.0):
        raise ModelError(f"alpha must lie in [0, 1], got {alpha}")
    return max(0, math.ceil(m * (1.0 - alpha) - 1e-9))


@dataclass(frozen=True)
class SampleSet:
    samples: Tuple[FrozenSet[int], ...]
    n: int

    def __init__(self, samples: Iterable[Iterable[int]], n: Optional[int] = None):
        ss = tuple(frozenset(int(v) for v in s) for s in samples)
        top = max((max(s) for s in ss if s), default=0)
        n = top if n is None else int(n)
        if not ss:
            raise ModelError("empty sample set")
        if any(v < 1 or v > n for s in ss for v in s):
            raise ModelError(f"sample elements must lie in 1..{n}")
        object.__setattr__(self, "samples", ss)
        object.__setattr__(self, "n", max(n, 0))

    @property
    def m(self) -> int:
        return len(self.samples)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# n={self.n}\n")
            w = csv.writer(fh, lineterminator="\n")
            for s in self.samples:
                w.writerow(sorted(s))

    @classmethod
    def from_csv(cls, path, n: Optional[int] = None) -> "SampleSet":
        rows = []
        with open(path, newline="") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if line.startswith("#"):
                    mt = re.match(r"#\s*n\s*=\s*(\d+)", line)
                    if mt and n is None:
                        n = int(mt.group(1))
                    continue
                try:
                    rows.append([int(v) for v in line.split(",") if v.strip()])
                except ValueError as exc:
                    raise ModelError(f"line {lineno}: {exc}") from None
        return cls(rows, n)


def coverage_fraction(region: Iterable[int], s: SampleSet) -> float:
    a = frozenset(region)
    return sum(1 for x in s.samples if x <= a) / s.m


@dataclass
class RegionLadder:
    steps: List[Tuple[float, FrozenSet[int]]]
    m: int

    def region_for_alpha(self, alpha: float) -> FrozenSet[int]:
        """Smallest ladder region whose coverage is at least ``1 - alpha``."""
        need = required_count(self.m, alpha)
        best = self.steps[0][1]
        for cov, reg in self.steps:
            if round(cov * self.m) >= need:
                best = reg
            else:
                break
        return best

    def on_grid(self, alphas: Sequence[float] = DEFAULT_ALPHAS):
        return [(a, self.region_for_alpha(a)) for a in alphas]


def greedy_ladder(s: SampleSet, verify: bool = False, counter: Optional[list] = None) -> RegionLadder:
    """Remove timepoints one at a time, always the one in fewest still-covered samples.

    Ties go to the lowest index.  Consecutive steps with equal coverage are
    collapsed to the smallest region, so coverage strictly decreases and the
    last step is the empty region.
    """
    n, m = s.n, s.m
    members: Dict[int, List[int]] = {i: [] for i in range(1, n + 1)}
    for k, x in enumerate(s.samples):
        for i in x:
            members[i].append(k)
    counts = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        counts[i] = len(members[i])
    alive = np.ones(m, dtype=bool)
    live = m
    region = set(range(1, n + 1))
    raw = [(live, frozenset(region))]
    ops = 0
    big = np.iinfo(np.int64).max
    masked = counts.copy()
    masked[0] = big
    while region:
        i = int(np.argmin(masked))  # first minimum: lowest index
        ops += n
        region.discard(i)
        masked[i] = big
        for k in members[i]:
            if alive[k]:
                alive[k] = False
                live -= 1
                for t in s.samples[k]:
                    ops += 1
                    counts[t] -= 1
                    if t in region:
                        masked[t] -= 1
        raw.append((live, frozenset(region)))
        if verify:
            direct = sum(1 for x in s.samples if x <= region)
            if direct != live:
                raise AssertionError(f"coverage bookkeeping mismatch: {direct} != {live}")
    if counter is not None:
        counter.append(ops)
    steps = []
    for cnt, reg in raw:
        if steps and steps[-1][0] == cnt:
            steps[-1] = (cnt, reg)
        else:
            steps.append((cnt, reg))
    return RegionLadder([(c / m, r) for c, r in steps], m)


def _masks(s: SampleSet) -> Counter:
    return Counter(sum(1 << (i - 1) for i in x) for x in s.samples)


def brute_force_sbp(s: SampleSet, alpha: float, max_n: int = 22) -> FrozenSet[int]:
    """Minimum-size region with coverage at least ``1 - alpha``; lexicographically first among ties."""
    if s.n > max_n:
        raise ModelError(f"brute force limited to n <= {max_n}, got {s.n}")
    need = required_count(s.m, alpha)
    if need == 0:
        return frozenset()
    masks = list(_masks(s).items())
    mv = np.array([k for k, _ in masks], dtype=np.int64)
    cv = np.array([c for _, c in masks], dtype=np.int64)
    for size in range(s.n + 1):
        for combo in itertools.combinations(range(1, s.n + 1), size):
            a = sum(1 << (i - 1) for i in combo)
            if cv[(mv & ~a) == 0].sum() >= need:
                return frozenset(combo)
    raise AssertionError("the full range always covers every sample")


def sbp_argmin_sets(s: SampleSet, alpha: float, max_n: int = 22) -> List[FrozenSet[int]]:
    """All minimum-size regions meeting the coverage requirement."""
    if s.n > max_n:
        raise ModelError(f"brute force limited to n <= {max_n}, got {s.n}")
    need = required_count(s.m, alpha)
    masks = list(_masks(s).items())
    mv = np.array([k for k, _ in masks], dtype=np.int64)
    cv = np.array([c for _, c in masks], dtype=np.int64)
    for size in range(s.n + 1):
        found = []
        for combo in itertools.combinations(range(1, s.n + 1), size):
            a = sum(1 << (i - 1) for i in combo)
            if cv[(mv & ~a) == 0].sum() >= need:
                found.append(frozenset(combo))
        if found:
            return found
    return []


# ---------------------------------------------------------------------------
# integer program in CPLEX LP text format


def export_ilp(s: SampleSet, alpha: float, path) -> None:
    """Write the covering program: binaries ``U_i`` (timepoint kept) and ``F_j`` (sample covered)."""
    need = required_count(s.m, alpha)
    lines = ["\\ smallest region covering enough samples", "Minimize", " obj: " + _lin({f"U{i}": 1 for i in range(1, s.n + 1)})]
    lines.append("Subject To")
    lines.append(" cover: " + _lin({f"F{j}": 1 for j in range(1, s.m + 1)}) + f" >= {need}")
    for i in range(1, s.n + 1):
        d = [j for j, x in enumerate(s.samples, 1) if i in x]
        if not d:
            continue
        coef = {f"U{i}": len(d)}
        coef.update({f"F{j}": -1 for j in d})
        lines.append(f" keep{i}: " + _lin(coef) + " >= 0")
    lines.append("Binaries")
    names = [f"U{i}" for i in range(1, s.n + 1)] + [f"F{j}" for j in range(1, s.m + 1)]
    for k in range(0, len(names), 10):
        lines.append(" " + " ".join(names[k : k + 10]))
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")


def _lin(coef: Dict[str, float]) -> str:
    if not coef:
        return "0 U1"
    parts = []
    for k, (name, c) in enumerate(coef.items()):
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        term = name if mag == 1 else f"{mag:g} {name}"
        parts.append((f"- {term}" if sign == "-" else term) if k == 0 else f"{sign} {term}")
    return " ".join(parts)


@dataclass
class LinearProgram:
    objective: Dict[str, float]
    constraints: List[Tuple[str, Dict[str, float], str, float]]
    binaries: List[str]


_TERM = re.compile(r"([+-]?)\s*(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][A-Za-z0-9_]*)")


def _parse_expr(text: str) -> Dict[str, float]:
    out: Dict[str, float] = {}
    pos = 0
    text = text.strip()
    while pos < len(text):
        mt = _TERM.match(text, pos)
        if not mt or mt.end() == pos:
            raise ModelError(f"cannot parse linear expression near {text[pos:pos + 20]!r}")
        sign = -1.0 if mt.group(1) == "-" else 1.0
        c = float(mt.group(2)) if mt.group(2) else 1.0
        out[mt.group(3)] = out.get(mt.group(3), 0.0) + sign * c
        pos = mt.end()
        while pos < len(text) and text[pos] == " ":
            pos += 1
    return out


def parse_lp(path) -> LinearProgram:
    """Read back an LP file written by :func:`export_ilp`."""
    section = None
    obj: Dict[str, float] = {}
    cons = []
    bins: List[str] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("minimize", "subject to", "binaries", "end"):
            section = low
            continue
        if section == "minimize":
            obj = _parse_expr(line.split(":", 1)[1])
        elif section == "subject to":
            name, body = line.split(":", 1)
            mt = re.match(r"(.*?)(>=|<=|=)\s*([-+0-9.eE]+)\s*$", body)
            if not mt:
                raise ModelError(f"cannot parse constraint {line!r}")
            cons.append((name.strip(), _parse_expr(mt.group(1)), mt.group(2), float(mt.group(3))))
        elif section == "binaries":
            bins.extend(line.split())
    return LinearProgram(obj, cons, bins)


def solve_lp_file(path) -> FrozenSet[int]:
    """Solve an exported program with the HiGHS MILP solver; returns the kept timepoints."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    lp = parse_lp(path)
    names = lp.binaries
    idx = {v: k for k, v in enumerate(names)}
    c = np.array([lp.objective.get(v, 0.0) for v in names])
    rows, lo, hi = [], [], []
    for _, coef, sense, rhs in lp.constraints:
        row = np.zeros(len(names))
        for v, a in coef.items():
            row[idx[v]] = a
        rows.append(row)
        lo.append(rhs if sense in (">=", "=") else -np.inf)
        hi.append(rhs if sense in ("<=", "=") else np.inf)
    res = milp(c, constraints=LinearConstraint(np.array(rows), lo, hi), integrality=np.ones(len(names)),
               bounds=Bounds(0, 1))
    if not res.success:
        raise ArithmeticError(f"MILP solver failed: {res.message}")
    return frozenset(int(v[1:]) for v, x in zip(names, res.x) if v.startswith("U") and x > 0.5)


# ---------------------------------------------------------------------------
# baselines and importance


def bonferroni_region(marginals: Sequence[float], alpha: float) -> FrozenSet[int]:
    p = np.asarray(marginals, dtype=float)
    return frozenset(int(i) + 1 for i in np.flatnonzero(p > alpha / p.size))


def pointwise_lower_set(marginals: Sequence[float], alpha: float) -> FrozenSet[int]:
    p = np.asarray(marginals, dtype=float)
    return frozenset(int(i) + 1 for i in np.flatnonzero(p > alpha))


def joined_hdr(s: SampleSet, logprobs: Sequence[float], alpha: float) -> FrozenSet[int]:
    """Union of the ``ceil(m (1 - alpha))`` most probable samples (empty at ``alpha = 1``)."""
    lp = np.asarray(logprobs, dtype=float)
    if lp.size != s.m:
        raise ModelError(f"{lp.size} log probabilities for {s.m} samples")
    k = required_count(s.m, alpha)
    order = np.argsort(-lp, kind="stable")[:k]
    out: set = set()
    for idx in order:
        out |= s.samples[idx]
    return frozenset(out)


def importance(ladder: RegionLadder, window: Iterable[int]) -> float:
    """One minus the largest ladder coverage whose region avoids ``window``."""
    w = frozenset(window)
    if not w:
        raise ModelError("empty window")
    best = 0.0
    for cov, reg in ladder.steps:
        if not (reg & w):
            best = max(best, cov)
    return 1.0 - best
