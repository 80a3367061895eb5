"""Compiled kernels for densities proportional to exp(-sum_l w_l |x - z_l|).

The energy ``E(x) = sum_l w_l |x - z_l|`` is convex and piecewise linear with
breakpoints ``z`` (sorted).  Every integral is evaluated piece by piece after
subtracting ``Emin``; each piece is anchored at its low-energy end ``a`` and
parameterized as ``x = a + s t`` with ``E = E(a) + lam t`` for ``0 <= t <= L``,
so all exponentials are ``exp(-nonnegative)``.  Energies are propagated out
from the minimum only until they exceed ``Emin + _CUT``; pieces beyond that
carry less than ``exp(-_CUT)`` relative mass and are skipped.

Piece ``p`` is the interval ``(z[p-1], z[p])``; piece 0 is the left tail and
piece ``k`` the right tail.
"""

import math

import numpy as np
from numba import njit

_CUT = 100.0


@njit(cache=True)
def _g0(lam, L):
    """int_0^L exp(-lam t) dt."""
    if L == 0.0:
        return 0.0
    if lam == 0.0:
        return L
    if math.isinf(L):
        return 1.0 / lam
    return -math.expm1(-lam * L) / lam


@njit(cache=True)
def _tails(x):
    """R_p(x) = sum_{i > p} x^i / i! for p = 0..3, for 0 < x < 2."""
    if x < 0.5:
        term = x**4 / 24.0
        r3 = term
        i = 4
        while term > 1e-17 * r3:
            i += 1
            term *= x / i
            r3 += term
        r2 = r3 + x**3 / 6.0
        r1 = r2 + x * x / 2.0
        return r1 + x, r1, r2, r3
    r0 = math.expm1(x)
    r1 = r0 - x
    r2 = r1 - x * x / 2.0
    return r0, r1, r2, r2 - x**3 / 6.0


@njit(cache=True)
def _g4(lam, L):
    """int_0^L t^p exp(-lam t) dt for p = 0..3.

    Equals ``p! / lam^(p+1) * P(Gamma(p+1) <= lam L)``; the regularized
    incomplete gamma is evaluated as ``exp(-x) R_p(x)`` for small ``x``.
    """
    if L == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    if lam == 0.0:
        return L, L * L / 2.0, L**3 / 3.0, L**4 / 4.0
    il = 1.0 / lam
    if math.isinf(L):
        return il, il * il, 2.0 * il**3, 6.0 * il**4
    x = lam * L
    ex = math.exp(-x)
    if x < 2.0:
        r0, r1, r2, r3 = _tails(x)
        return ex * r0 * il, ex * r1 * il * il, 2.0 * ex * r2 * il**3, 6.0 * ex * r3 * il**4
    p1 = 1.0 + x
    p2 = p1 + x * x / 2.0
    p3 = p2 + x**3 / 6.0
    return (-math.expm1(-x) * il, il * il * (1.0 - ex * p1), 2.0 * il**3 * (1.0 - ex * p2),
            6.0 * il**4 * (1.0 - ex * p3))


@njit(cache=True)
def _g2(lam, L):
    """int_0^L t^p exp(-lam t) dt for p = 0, 1."""
    if L == 0.0:
        return 0.0, 0.0
    if lam == 0.0:
        return L, L * L / 2.0
    il = 1.0 / lam
    if math.isinf(L):
        return il, il * il
    x = lam * L
    if x < 0.5:
        term = x * x / 2.0
        r1 = term
        i = 2
        while term > 1e-17 * r1:
            i += 1
            term *= x / i
            r1 += term
        ex = math.exp(-x)
        return -math.expm1(-x) * il, ex * r1 * il * il
    return -math.expm1(-x) * il, il * il * (1.0 - math.exp(-x) * (1.0 + x))


@njit(cache=True)
def _gfun(p, lam, L):
    """int_0^L t^p exp(-lam t) dt for p in 0..3."""
    g = _g4(lam, L)
    return g[p]


@njit(cache=True)
def _mode_index(z, w, k):
    """Index of the breakpoint at which the energy is minimal (weighted median)."""
    total = 0.0
    for l in range(k):
        total += w[l]
    left = 0.0
    for l in range(k):
        # slope right of z_l is 2 * (left + w_l) - total
        if 2.0 * (left + w[l]) - total >= 0.0:
            return l
        left += w[l]
    return k - 1


@njit(cache=True)
def _band(z, w, k, e):
    """Energies around the minimum.

    Returns ``(m, plo, phi, total, left)``: the minimizing breakpoint, the
    range of pieces that carry mass, the total weight and the weight strictly
    left of breakpoint ``plo``.  ``e`` is filled for breakpoints ``plo-1..phi``.
    """
    total = 0.0
    for l in range(k):
        total += w[l]
    m = 0
    left_m = 0.0
    for l in range(k):
        if 2.0 * (left_m + w[l]) - total >= 0.0:
            break
        left_m += w[l]
        m += 1
    if m >= k:
        m = k - 1
        left_m = total - w[k - 1]
    em = 0.0
    for l in range(k):
        em += w[l] * abs(z[m] - z[l])
    e[m] = em
    lw = left_m
    phi = k
    for p in range(m + 1, k):
        lw += w[p - 1]
        e[p] = e[p - 1] + (2.0 * lw - total) * (z[p] - z[p - 1])
        if e[p] - em > _CUT:
            phi = p
            break
    lw = left_m
    plo = 0
    left = 0.0
    for p in range(m - 1, -1, -1):
        # piece (z_p, z_{p+1}) has slope 2 * sum_{l<=p} w_l - total (negative here)
        e[p] = e[p + 1] + (total - 2.0 * lw) * (z[p + 1] - z[p])
        lw -= w[p]
        if e[p] - em > _CUT:
            plo = p + 1
            left = lw + w[p]
            break
    return m, plo, phi, total, left


@njit(cache=True)
def _energies(z, w, k, out):
    """Energy at every breakpoint, propagated outward from the mode."""
    m = _mode_index(z, w, k)
    e = 0.0
    for l in range(k):
        e += w[l] * abs(z[m] - z[l])
    out[m] = e
    total = 0.0
    for l in range(k):
        total += w[l]
    left = 0.0
    for l in range(m):
        left += w[l]
    lw = left
    for p in range(m + 1, k):
        lw += w[p - 1]
        out[p] = out[p - 1] + (2.0 * lw - total) * (z[p] - z[p - 1])
    lw = left
    for p in range(m - 1, -1, -1):
        out[p] = out[p + 1] + (total - 2.0 * lw) * (z[p + 1] - z[p])
        lw -= w[p]
    return m


@njit(cache=True)
def _piece(z, k, e, emin, slope, p):
    """Piece ``p`` as (anchor, direction, lam, length, E(anchor) - emin)."""
    if p == 0:
        return z[0], -1.0, -slope, np.inf, e[0] - emin
    if p == k:
        return z[k - 1], 1.0, slope, np.inf, e[k - 1] - emin
    L = z[p] - z[p - 1]
    if slope >= 0.0:
        return z[p - 1], 1.0, slope, L, e[p - 1] - emin
    return z[p], -1.0, -slope, L, e[p] - emin


@njit(cache=True)
def log_partition(z, w, k, ebuf, shift=0.0):
    """log int exp(-E(x)) dx; ``shift`` moves the stabilizer away from the minimum."""
    m, plo, phi, total, left = _band(z, w, k, ebuf)
    emin = ebuf[m] + shift
    acc = 0.0
    for p in range(plo, phi + 1):
        if p > plo:
            left += w[p - 1]
        a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
        acc += math.exp(-elo) * _g0(lam, L)
    return -emin + math.log(acc)


@njit(cache=True)
def stats(z, w, k, ebuf, mu, out, full=True):
    """Fill ``out`` with summaries of the normalized density.

    out[0] log partition, out[1..3] raw moments E[X^m], out[4] E|X - mu|,
    out[5] E[E(X)], out[6] mode location.  With ``full=False`` only out[0],
    out[4] and out[5] are filled.
    """
    m, plo, phi, total, left = _band(z, w, k, ebuf)
    emin = ebuf[m]
    c = z[m]
    j0 = 0.0
    j1 = 0.0
    j2 = 0.0
    j3 = 0.0
    jab = 0.0
    jen = 0.0
    for p in range(plo, phi + 1):
        if p > plo:
            left += w[p - 1]
        a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
        f = math.exp(-elo)
        if full:
            g0, g1, g2, g3 = _g4(lam, L)
            d = a - c
            j1 += f * (d * g0 + s * g1)
            j2 += f * (d * d * g0 + 2.0 * d * s * g1 + g2)
            j3 += f * (d * d * d * g0 + 3.0 * d * d * s * g1 + 3.0 * d * g2 + s * g3)
        else:
            g0, g1 = _g2(lam, L)
        j0 += f * g0
        jen += f * ((emin + elo) * g0 + lam * g1)
        # |x - mu|, splitting the piece at mu when it lies inside
        lo = a if s > 0 else a - L
        hi = a + L if s > 0 else a
        if mu <= lo or mu >= hi:
            sg = 1.0 if mu <= lo else -1.0
            jab += f * sg * ((a - mu) * g0 + s * g1)
        else:
            # sub-piece from the anchor to mu
            t1 = abs(mu - a)
            sg = 1.0 if a >= mu else -1.0
            h = _g2(lam, t1)
            jab += f * sg * ((a - mu) * h[0] + s * h[1])
            # sub-piece from mu onwards, re-anchored at mu
            f2 = math.exp(-(elo + lam * t1))
            jab += f2 * _g2(lam, L - t1)[1]
    out[0] = -emin + math.log(j0)
    out[4] = jab / j0
    out[5] = jen / j0
    if not full:
        out[1] = out[2] = out[3] = out[6] = np.nan
        return out
    mean_c = j1 / j0
    m2_c = j2 / j0
    m3_c = j3 / j0
    out[1] = c + mean_c
    out[2] = c * c + 2.0 * c * mean_c + m2_c
    out[3] = c * c * c + 3.0 * c * c * mean_c + 3.0 * c * m2_c + m3_c
    # mode: midpoint of the plateau if the slope vanishes right of z_m
    lw = 0.0
    for l in range(m + 1):
        lw += w[l]
    if m + 1 < k and abs(2.0 * lw - total) <= 1e-12 * total:
        out[6] = 0.5 * (z[m] + z[m + 1])
    else:
        out[6] = c
    return out


@njit(cache=True)
def central_moments(z, w, k, ebuf, out):
    """out[0] = mean, out[1] = E[(X-mean)^2], out[2] = E[(X-mean)^3]."""
    m, plo, phi, total, left0 = _band(z, w, k, ebuf)
    emin = ebuf[m]
    c = z[m]
    j0 = 0.0
    j1 = 0.0
    left = left0
    for p in range(plo, phi + 1):
        if p > plo:
            left += w[p - 1]
        a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
        f = math.exp(-elo)
        g = _g4(lam, L)
        j0 += f * g[0]
        j1 += f * ((a - c) * g[0] + s * g[1])
    mean = c + j1 / j0
    # second pass centred at the mean
    j2 = 0.0
    j3 = 0.0
    left = left0
    for p in range(plo, phi + 1):
        if p > plo:
            left += w[p - 1]
        a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
        f = math.exp(-elo)
        g0, g1, g2, g3 = _g4(lam, L)
        d = a - mean
        j2 += f * (d * d * g0 + 2.0 * d * s * g1 + g2)
        j3 += f * (d * d * d * g0 + 3.0 * d * d * s * g1 + 3.0 * d * g2 + s * g3)
    out[0] = mean
    out[1] = j2 / j0
    out[2] = j3 / j0
    return out


@njit(cache=True)
def sample(z, w, k, ebuf, u1, u2):
    """Inverse-CDF draw: choose a piece by mass with ``u1``, invert within it with ``u2``."""
    m, plo, phi, total, left0 = _band(z, w, k, ebuf)
    emin = ebuf[m]
    mass = np.zeros(k + 1)
    acc = 0.0
    left = left0
    for p in range(plo, phi + 1):
        if p > plo:
            left += w[p - 1]
        a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
        mass[p] = math.exp(-elo) * _g0(lam, L)
        acc += mass[p]
    target = u1 * acc
    p = plo
    run = mass[plo]
    left = left0
    while p < phi and (run < target or mass[p] == 0.0):
        p += 1
        left += w[p - 1]
        run += mass[p]
    while mass[p] == 0.0:
        # rounding pushed us past the last piece with mass
        left -= w[p - 1]
        p -= 1
    a, s, lam, L, elo = _piece(z, k, ebuf, emin, 2.0 * left - total, p)
    if lam == 0.0:
        t = u2 * L
    elif math.isinf(L):
        t = -math.log1p(-u2) / lam
    else:
        t = -math.log1p(u2 * math.expm1(-lam * L)) / lam
    return a + s * t


@njit(cache=True)
def insert(zrow, wrow, k, y, wy):
    """Insert (y, wy) into the sorted prefix zrow[:k]; returns new length."""
    lo = 0
    hi = k
    while lo < hi:
        mid = (lo + hi) // 2
        if zrow[mid] <= y:
            lo = mid + 1
        else:
            hi = mid
    for l in range(k, lo, -1):
        zrow[l] = zrow[l - 1]
        wrow[l] = wrow[l - 1]
    zrow[lo] = y
    wrow[lo] = wy
    return k + 1


@njit(cache=True)
def bank_step(zbuf, wbuf, lens, logz, slots, y, wy, ebuf, out):
    """Insert ``y`` into every slot; write log Z_new - log Z_old into ``out``."""
    for s in range(slots.size):
        sl = slots[s]
        k = insert(zbuf[sl], wbuf[sl], lens[sl], y, wy)
        lens[sl] = k
        lz = log_partition(zbuf[sl], wbuf[sl], k, ebuf)
        out[s] = lz - logz[sl]
        logz[sl] = lz
    return out


@njit(cache=True)
def row_functionals(y, mu, wmu, wy, starts, lasts, pos_of, out, full=True):
    """Per-particle summaries re-running the kernel along each row.

    Row ``r`` is the segment start ``starts[r]`` whose live ends run from
    ``max(start, 1)`` (or 0 for the head segment) to ``lasts[r]``; ``pos_of``
    gives the storage position of each (start, end) in row order.  ``out`` has
    one row of 7 summaries (see ``stats``) per storage position.
    """
    maxlen = 0
    for r in range(starts.size):
        ln = lasts[r] - max(starts[r], 1) + 2
        if ln > maxlen:
            maxlen = ln
    z = np.empty(maxlen + 1)
    w = np.empty(maxlen + 1)
    ebuf = np.empty(maxlen + 1)
    tmp = np.empty(7)
    cursor = 0
    for r in range(starts.size):
        j = starts[r]
        z[0] = mu
        w[0] = wmu
        k = 1
        first = j
        if j == 0:
            # head entry (0, 0) holds the prior alone
            stats(z, w, k, ebuf, mu, tmp, full)
            for q in range(7):
                out[pos_of[cursor], q] = tmp[q]
            cursor += 1
            first = 1
        for i in range(first, lasts[r] + 1):
            k = insert(z, w, k, y[i], wy)
            stats(z, w, k, ebuf, mu, tmp, full)
            for q in range(7):
                out[pos_of[cursor], q] = tmp[q]
            cursor += 1
    return out
