"""Noncentral chi-square CDF, density, and log-derivative series.

The CDF and density use the standard representation as a central chi-square
mixture with Poisson(lambda/2) weights, truncated once the remaining Poisson
tail is below 1e-12.  The central pieces come from the regularized incomplete
gamma function.  The log-derivative of the even-degree density is evaluated
through its factorial-ratio series, summed outward from the modal index so
every partial term stays in [0, 1] and no explicit log-space lift is needed.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import NumericError

_POISSON_TAIL = 1e-12
_SERIES_RTOL = 1e-14
_SERIES_CAP = 200_000


def _poisson_window(mean: float) -> tuple[int, np.ndarray]:
    """Indices and weights of Poisson(mean) covering all but 1e-12 of mass.

    Returns (j_start, weights).  Weights are built by the ratio recurrence
    from the modal index, so they are overflow-free for any mean.
    """
    if mean == 0.0:
        return 0, np.ones(1)
    mode = int(mean)
    # expand symmetrically (in probability) around the mode
    lo = hi = mode
    terms = {mode: 1.0}
    total = 1.0
    lo_val = hi_val = 1.0
    while True:
        grew = False
        if hi_val > _POISSON_TAIL * total or hi - mode < 2:
            hi += 1
            hi_val = terms[hi - 1] * mean / hi
            terms[hi] = hi_val
            total += hi_val
            grew = True
        if lo > 0 and (lo_val > _POISSON_TAIL * total or mode - lo < 2):
            lo_val = terms[lo] * lo / mean
            lo -= 1
            terms[lo] = lo_val
            total += lo_val
            grew = True
        if not grew:
            break
        if hi - lo > _SERIES_CAP:
            raise NumericError("Poisson window failed to converge")
    w = np.array([terms[j] for j in range(lo, hi + 1)])
    return lo, w / w.sum()


def ncx2_cdf(t, df: float, lam: float) -> np.ndarray:
    """P[X <= t] for X noncentral chi-square(df, lam); vectorized in t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if lam < 0:
        raise ValueError("noncentrality must be >= 0")
    t = np.asarray(t, dtype=float)
    half = np.maximum(t, 0.0) / 2.0
    if lam == 0.0:
        out = special.gammainc(df / 2.0, half)
    else:
        j0, w = _poisson_window(lam / 2.0)
        shapes = df / 2.0 + j0 + np.arange(w.size)
        out = special.gammainc(shapes, half[..., None]) @ w
    return np.where(t <= 0.0, 0.0, out)


def ncx2_pdf(t, df: float, lam: float) -> np.ndarray:
    """Density of the noncentral chi-square(df, lam); vectorized in t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if lam < 0:
        raise ValueError("noncentrality must be >= 0")
    t = np.asarray(t, dtype=float)
    tt = np.maximum(t, 0.0)

    def central_pdf(shape):
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = (
                special.xlogy(shape - 1.0, tt / 2.0)
                - tt / 2.0
                - special.gammaln(shape)
            ) - math.log(2.0)
        return np.exp(logp)

    if lam == 0.0:
        out = central_pdf(df / 2.0)
    else:
        j0, w = _poisson_window(lam / 2.0)
        out = np.zeros_like(tt)
        for i, wi in enumerate(w):
            out += wi * central_pdf(df / 2.0 + j0 + i)
    return np.where(t <= 0.0, 0.0, out)


def ncx2_mean_var(df: float, lam: float) -> tuple[float, float]:
    """Exact mean and variance: (df + lam, 2 (df + 2 lam))."""
    return df + lam, 2.0 * (df + 2.0 * lam)


def noncentral_chi2_logderiv(d_n: int, lam: float, t: float) -> float:
    """g'(t)/g(t) for the even-degree noncentral chi-square density g.

    Evaluates -(1 - (2m + lam)/t)/2 + S1/(t S0) with m = d_n/2 - 1, where
    S0 = sum_j a_j, S1 = sum_j (j - lam/2) a_j and the a_j follow the ratio
    recurrence a_j / a_{j-1} = (lam t / 4) / (j (m + j)).  In the central case
    only j = 0 survives and the value reduces to m/t - 1/2.
    """
    if d_n % 2 != 0 or d_n < 4:
        raise ValueError("the series requires an even degree d_n >= 4")
    if t <= 0:
        raise ValueError("t must be positive")
    if lam < 0:
        raise ValueError("noncentrality must be >= 0")
    m = d_n // 2 - 1
    base = -0.5 * (1.0 - (2.0 * m + lam) / t)
    if lam == 0.0:
        return base
    z = lam * t / 4.0

    def ratio(j: int) -> float:
        return z / (j * (m + j))

    # modal index: largest j with a_j / a_{j-1} >= 1
    j_star = max(0, int((-m + math.sqrt(m * m + lam * t)) / 2.0))
    s0 = 1.0
    s1 = j_star - lam / 2.0
    # upward sweep
    term = 1.0
    j = j_star
    while True:
        j += 1
        term *= ratio(j)
        s0 += term
        s1 += (j - lam / 2.0) * term
        if term < _SERIES_RTOL * s0 and abs(j - lam / 2.0) * term < _SERIES_RTOL * max(
            abs(s1), 1.0
        ):
            break
        if j - j_star > _SERIES_CAP:
            raise NumericError("log-derivative series failed to converge (upward)")
    # downward sweep
    term = 1.0
    j = j_star
    while j > 0:
        term /= ratio(j)
        j -= 1
        s0 += term
        s1 += (j - lam / 2.0) * term
        if term < _SERIES_RTOL * s0 and abs(j - lam / 2.0) * term < _SERIES_RTOL * max(
            abs(s1), 1.0
        ):
            break
        if j_star - j > _SERIES_CAP:
            raise NumericError("log-derivative series failed to converge (downward)")
    return base + s1 / (t * s0)
