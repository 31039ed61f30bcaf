"""Wigner 3j and 6j symbols via the Racah closed forms.

Evaluation is exact below a size cutoff: factorial ratios are carried as
`fractions.Fraction` so the only rounding is the final square root and
float conversion (about 1 ulp).  Very large arguments fall back to a
log-gamma evaluation; nothing in this package gets anywhere near that
regime, the fallback just keeps huge inputs from blowing up Fraction
arithmetic.

Conventions: standard 3j symbol (Wigner-Eckart with (-1)^(j-m) prefactor)
and the standard 6j.  Selection-rule violations return exactly 0.0;
arguments that are not multiples of 1/2 raise ValueError.
"""

from fractions import Fraction
from functools import lru_cache
from math import factorial, lgamma, sqrt, exp

EXACT_CUTOFF_TWICE_J = 80  # above this, switch to the log-gamma path


def _twice(x, name):
    """Convert an angular momentum (or projection) to an exact twice-integer."""
    t = 2.0 * float(x)
    r = round(t)
    if abs(t - r) > 1e-9:
        raise ValueError(f"{name} = {x} is not a multiple of 1/2")
    return int(r)


def _triangle_ok(ta, tb, tc):
    # all in twice-integer units; parity: ta+tb+tc must be even
    if (ta + tb + tc) % 2 != 0:
        return False
    return abs(ta - tb) <= tc <= ta + tb


def _fact(n):
    # n given in true (not doubled) units; caller guarantees integrality
    if n < 0:
        raise ValueError("negative factorial argument")
    return factorial(n)


def _delta_sq(ta, tb, tc):
    """Triangle coefficient Delta(a,b,c)^2 as an exact Fraction."""
    return Fraction(
        _fact((ta + tb - tc) // 2)
        * _fact((ta - tb + tc) // 2)
        * _fact((-ta + tb + tc) // 2),
        _fact((ta + tb + tc) // 2 + 1),
    )


@lru_cache(maxsize=None)
def _wigner_3j_t(tj1, tj2, tj3, tm1, tm2, tm3):
    if tm1 + tm2 + tm3 != 0:
        return 0.0
    if not _triangle_ok(tj1, tj2, tj3):
        return 0.0
    for tj, tm in ((tj1, tm1), (tj2, tm2), (tj3, tm3)):
        if abs(tm) > tj or (tj + tm) % 2 != 0:
            return 0.0

    if max(tj1, tj2, tj3) > EXACT_CUTOFF_TWICE_J:
        return _wigner_3j_float(tj1, tj2, tj3, tm1, tm2, tm3)

    # Racah sum limits, in true units
    tmin = max(0, (tj2 - tj3 - tm1) // 2, (tj1 - tj3 + tm2) // 2)
    tmax = min(
        (tj1 + tj2 - tj3) // 2,
        (tj1 - tm1) // 2,
        (tj2 + tm2) // 2,
    )
    if tmax < tmin:
        return 0.0

    ssum = Fraction(0)
    for t in range(tmin, tmax + 1):
        den = (
            _fact(t)
            * _fact((tj3 - tj2 + tm1) // 2 + t)
            * _fact((tj3 - tj1 - tm2) // 2 + t)
            * _fact((tj1 + tj2 - tj3) // 2 - t)
            * _fact((tj1 - tm1) // 2 - t)
            * _fact((tj2 + tm2) // 2 - t)
        )
        ssum += Fraction(-1 if t % 2 else 1, den)
    if ssum == 0:
        return 0.0

    pref = _delta_sq(tj1, tj2, tj3) * Fraction(
        _fact((tj1 + tm1) // 2)
        * _fact((tj1 - tm1) // 2)
        * _fact((tj2 + tm2) // 2)
        * _fact((tj2 - tm2) // 2)
        * _fact((tj3 + tm3) // 2)
        * _fact((tj3 - tm3) // 2)
    )
    sign = -1 if ((tj1 - tj2 - tm3) // 2) % 2 else 1
    return sign * (1 if ssum > 0 else -1) * float(abs(ssum)) * sqrt(float(pref))


@lru_cache(maxsize=None)
def _wigner_6j_t(ta, tb, tc, td, te, tf):
    triads = ((ta, tb, tc), (ta, te, tf), (td, tb, tf), (td, te, tc))
    for tri in triads:
        if not _triangle_ok(*tri):
            return 0.0

    if max(ta, tb, tc, td, te, tf) > EXACT_CUTOFF_TWICE_J:
        return _wigner_6j_float(ta, tb, tc, td, te, tf)

    tri_sums = [sum(tri) // 2 for tri in triads]
    quad_sums = [
        (ta + tb + td + te) // 2,
        (tb + tc + te + tf) // 2,
        (ta + tc + td + tf) // 2,
    ]
    ssum = Fraction(0)
    for t in range(max(tri_sums), min(quad_sums) + 1):
        num = _fact(t + 1)
        den = 1
        for s in tri_sums:
            den *= _fact(t - s)
        for s in quad_sums:
            den *= _fact(s - t)
        ssum += Fraction((-1 if t % 2 else 1) * num, den)
    if ssum == 0:
        return 0.0

    pref = Fraction(1)
    for tri in triads:
        pref *= _delta_sq(*tri)
    return (1 if ssum > 0 else -1) * float(abs(ssum)) * sqrt(float(pref))


def _wigner_3j_float(tj1, tj2, tj3, tm1, tm2, tm3):
    # log-gamma evaluation; plenty of relative accuracy for the huge-j regime
    def lf(n):
        return lgamma(n + 1.0)

    tmin = max(0, (tj2 - tj3 - tm1) // 2, (tj1 - tj3 + tm2) // 2)
    tmax = min((tj1 + tj2 - tj3) // 2, (tj1 - tm1) // 2, (tj2 + tm2) // 2)
    if tmax < tmin:
        return 0.0
    logpref = 0.5 * (
        lf((tj1 + tj2 - tj3) // 2)
        + lf((tj1 - tj2 + tj3) // 2)
        + lf((-tj1 + tj2 + tj3) // 2)
        - lf((tj1 + tj2 + tj3) // 2 + 1)
        + lf((tj1 + tm1) // 2)
        + lf((tj1 - tm1) // 2)
        + lf((tj2 + tm2) // 2)
        + lf((tj2 - tm2) // 2)
        + lf((tj3 + tm3) // 2)
        + lf((tj3 - tm3) // 2)
    )
    total = 0.0
    for t in range(tmin, tmax + 1):
        logden = (
            lf(t)
            + lf((tj3 - tj2 + tm1) // 2 + t)
            + lf((tj3 - tj1 - tm2) // 2 + t)
            + lf((tj1 + tj2 - tj3) // 2 - t)
            + lf((tj1 - tm1) // 2 - t)
            + lf((tj2 + tm2) // 2 - t)
        )
        total += (-1.0 if t % 2 else 1.0) * exp(logpref - logden)
    sign = -1.0 if ((tj1 - tj2 - tm3) // 2) % 2 else 1.0
    return sign * total


def _wigner_6j_float(ta, tb, tc, td, te, tf):
    def lf(n):
        return lgamma(n + 1.0)

    triads = ((ta, tb, tc), (ta, te, tf), (td, tb, tf), (td, te, tc))
    tri_sums = [sum(tri) // 2 for tri in triads]
    quad_sums = [
        (ta + tb + td + te) // 2,
        (tb + tc + te + tf) // 2,
        (ta + tc + td + tf) // 2,
    ]
    logpref = 0.0
    for tri in triads:
        logpref += 0.5 * (
            lf((tri[0] + tri[1] - tri[2]) // 2)
            + lf((tri[0] - tri[1] + tri[2]) // 2)
            + lf((-tri[0] + tri[1] + tri[2]) // 2)
            - lf(sum(tri) // 2 + 1)
        )
    total = 0.0
    for t in range(max(tri_sums), min(quad_sums) + 1):
        logterm = lf(t + 1)
        for s in tri_sums:
            logterm -= lf(t - s)
        for s in quad_sums:
            logterm -= lf(s - t)
        total += (-1.0 if t % 2 else 1.0) * exp(logpref + logterm)
    return total


def wigner_3j(j1, j2, j3, m1, m2, m3):
    """Wigner 3j symbol (j1 j2 j3 / m1 m2 m3)."""
    return _wigner_3j_t(
        _twice(j1, "j1"), _twice(j2, "j2"), _twice(j3, "j3"),
        _twice(m1, "m1"), _twice(m2, "m2"), _twice(m3, "m3"),
    )


def wigner_6j(j1, j2, j3, j4, j5, j6):
    """Wigner 6j symbol {j1 j2 j3 / j4 j5 j6}."""
    return _wigner_6j_t(
        _twice(j1, "j1"), _twice(j2, "j2"), _twice(j3, "j3"),
        _twice(j4, "j4"), _twice(j5, "j5"), _twice(j6, "j6"),
    )
