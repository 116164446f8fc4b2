"""Closed-form bound evaluators and their Monte Carlo verification partners.

The two rate bounds take their absolute constants as explicit inputs
(default 1): the constants are not pinned by the theory, so batteries assert
inequality shapes (monotonicity, domination with fitted constants) rather
than specific values.  Probability bounds clamp at 1 and report the clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .chisq import ncx2_mean_var, noncentral_chi2_logderiv  # noqa: F401 (re-export)
from .distributions import Dataset, NoiseSpec, ProductDistribution, bayes_at, sample
from .dominance import RhoEvaluator
from .errors import EmptyBallError, NumericError
from .knn import _derived
from .rng import STREAM_MC, STREAM_SAMPLE, spawn_generator

# ---------------------------------------------------------------------------
# Report containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    name: str
    inputs: dict
    value: float
    constants_used: dict = field(default_factory=dict)
    clamped: bool = False
    vacuous: bool = False


@dataclass(frozen=True)
class GaussianApproxReport:
    """Gap between the standardized noise law and the standard Gaussian."""

    d_n: int
    x: np.ndarray
    n_samples: int
    cdf_gap: float
    pdf_gap: float
    mu_x: float
    sigma_x: float
    bin_width: float
    norm4: float  # sum |x.v_i|^4
    norm6: float  # sum |x.v_i|^6
    norm_inf: float


@dataclass(frozen=True)
class BoundPair:
    """Monte Carlo estimate of a pair of prediction-probability bounds.

    ``bound0`` bounds P[prediction = 0], ``bound1`` bounds P[prediction = 1];
    ``failures`` counts trials dropped to propagated empty-ball errors.
    """

    bound0: float
    bound1: float
    se0: float
    se1: float
    trials: int
    failures: int = 0


@dataclass(frozen=True)
class PointBattery:
    """Per-trial outcomes of refitting at a fixed test point.

    ``preds`` are the k-NN votes, ``radii`` the (k+1)-th neighbor distances,
    ``t_values`` the conditional ratios at those radii.
    """

    x: np.ndarray
    theta: int
    n: int
    k: int
    preds: np.ndarray
    radii: np.ndarray
    t_values: np.ndarray
    failures: int = 0


# ---------------------------------------------------------------------------
# Vote bounds
# ---------------------------------------------------------------------------


def chernoff_vote_bound(rho: float, k: int) -> float:
    """((1 + rho) / (2 sqrt(rho)))^{-k}, clamped at 1.

    Bounds the chance that k independent votes with success odds rho fall
    below half; equals exp(-k d(1/2 || rho/(1+rho))) with d the binary
    relative entropy.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    return min(1.0, ((1.0 + rho) / (2.0 * math.sqrt(rho))) ** (-k))


def _vote_terms(t: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    t_hi = np.maximum(t, 1.0)
    t_lo = np.minimum(t, 1.0)
    with np.errstate(divide="ignore"):
        b0 = ((np.sqrt(t_hi) + 1.0 / np.sqrt(t_hi)) / 2.0) ** (-k)
        b1 = ((np.sqrt(t_lo) + 1.0 / np.sqrt(t_lo)) / 2.0) ** (-k)
    # T = 0 or inf degenerate to a zero bound (certain vote), not a NaN
    return np.nan_to_num(b0), np.nan_to_num(b1)


def point_trial_battery(
    dist: ProductDistribution,
    x: np.ndarray,
    n: int,
    k: int,
    trials: int,
    seed: int,
) -> PointBattery:
    """Refit ``trials`` fresh training sets and record prediction, radius, T_k.

    Training rows for all trials come from one derived stream (i.i.d. across
    trials), so the battery is deterministic given (dist, x, n, k, seed).
    """
    if not 1 <= k < n:
        raise ValueError("need 1 <= k < n for the (k+1)-th radius")
    x = np.asarray(x, dtype=float)
    theta = int(bayes_at(dist, x))
    evaluator = RhoEvaluator(dist, x)
    preds = np.empty(trials, dtype=np.int8)
    radii = np.empty(trials)
    chunk = max(1, 2_000_000 // n)
    done = 0
    part_idx = 0
    while done < trials:
        m = min(chunk, trials - done)
        batch = sample(dist, m * n, _derived(seed, STREAM_SAMPLE, 0, part_idx))
        pts = batch.points.reshape(m, n, -1)
        labs = batch.labels.reshape(m, n).astype(np.int64)
        diff = pts - x
        sq = np.einsum("tij,tij->ti", diff, diff).reshape(m, n)
        part = np.argpartition(sq, k, axis=1)
        votes = np.take_along_axis(
            labs, part[:, :k], axis=1
        ).sum(axis=1)
        preds[done : done + m] = (2 * votes >= k).astype(np.int8)
        radii[done : done + m] = np.sqrt(
            np.take_along_axis(sq, part[:, k : k + 1], axis=1)[:, 0]
        )
        done += m
        part_idx += 1
    try:
        t_values = evaluator.rho(radii)
        failures = 0
    except EmptyBallError:
        t_values = np.empty(trials)
        failures = 0
        for i, r in enumerate(radii):
            try:
                t_values[i] = evaluator.rho(np.array([r]))[0]
            except EmptyBallError:
                t_values[i] = np.nan
                failures += 1
    return PointBattery(
        x=x, theta=theta, n=n, k=k, preds=preds, radii=radii,
        t_values=t_values, failures=failures,
    )


def vote_bound_mc(
    dist: ProductDistribution, x: np.ndarray, n: int, k: int,
    trials: int, seed: int,
) -> BoundPair:
    """Monte Carlo estimate of E[((T v 1)^1/2 + (T v 1)^-1/2) / 2)^-k] and
    its (T ^ 1) twin over fresh training sets."""
    battery = point_trial_battery(dist, x, n, k, trials, seed)
    return bound_pair_from_t(battery.t_values, k, battery.failures)


def bound_pair_from_t(t_values: np.ndarray, k: int, failures: int = 0) -> BoundPair:
    t = t_values[~np.isnan(t_values)]
    b0, b1 = _vote_terms(t, k)
    m = t.size
    return BoundPair(
        bound0=float(b0.mean()),
        bound1=float(b1.mean()),
        se0=float(b0.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0,
        se1=float(b1.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0,
        trials=m,
        failures=failures,
    )


def half_bound_mc(
    dist: ProductDistribution, x: np.ndarray, n: int, k: int,
    trials: int, seed: int,
) -> BoundPair:
    """Monte Carlo estimate of (1 + P[T_k <= 1])/2 and (1 + P[T_k >= 1])/2."""
    battery = point_trial_battery(dist, x, n, k, trials, seed)
    return half_pair_from_t(battery.t_values, battery.failures)


def half_pair_from_t(t_values: np.ndarray, failures: int = 0) -> BoundPair:
    t = t_values[~np.isnan(t_values)]
    m = t.size
    le = (t <= 1.0).astype(float)
    ge = (t >= 1.0).astype(float)
    return BoundPair(
        bound0=float(0.5 * (1.0 + le.mean())),
        bound1=float(0.5 * (1.0 + ge.mean())),
        se0=float(0.5 * le.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0,
        se1=float(0.5 * ge.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0,
        trials=m,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Rate bounds (constants are caller-supplied)
# ---------------------------------------------------------------------------


def fast_rate_bound(k: int, d: int, tau: float, c: float = 1.0) -> float:
    """2 exp(-k/6) + exp(-c tau^2 k / d), clamped at 1."""
    if k < 1 or d < 1:
        raise ValueError("k and d must be >= 1")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if c <= 0:
        raise ValueError("c must be positive")
    return min(1.0, 2.0 * math.exp(-k / 6.0) + math.exp(-c * tau * tau * k / d))


def slow_rate_bound(
    n: int, d: int, gamma: float, beta: float, beta_prime: float,
    M: float, c: float = 1.0,
) -> float:
    """1/2 - n exp(-c d (gamma^2/(beta M^8) ^ gamma/(beta' M^4))), raw.

    The value may be non-positive, in which case the bound is vacuous; the
    caller decides (see ``slow_rate_report``).
    """
    if min(d, gamma, beta, beta_prime, M, c) <= 0 or n < 0:
        raise ValueError("all parameters must be positive (n >= 0)")
    rate = min(gamma * gamma / (beta * M**8), gamma / (beta_prime * M**4))
    return 0.5 - n * math.exp(-c * d * rate)


def fast_rate_report(k, d, tau, c=1.0) -> BoundReport:
    raw = 2.0 * math.exp(-k / 6.0) + math.exp(-c * tau * tau * k / d)
    return BoundReport(
        name="fast_rate",
        inputs={"k": k, "d": d, "tau": tau},
        value=min(1.0, raw),
        constants_used={"c": c},
        clamped=raw > 1.0,
    )


def slow_rate_report(n, d, gamma, beta, beta_prime, M, c=1.0) -> BoundReport:
    value = slow_rate_bound(n, d, gamma, beta, beta_prime, M, c)
    return BoundReport(
        name="slow_rate",
        inputs={
            "n": n, "d": d, "gamma": gamma, "beta": beta,
            "beta_prime": beta_prime, "M": M,
        },
        value=value,
        constants_used={"c": c},
        vacuous=value <= 0.0,
    )


# ---------------------------------------------------------------------------
# Gaussian approximation of the squared-noise norm
# ---------------------------------------------------------------------------


def noise_shift_moments(noise: NoiseSpec, h: np.ndarray) -> tuple[float, float]:
    """Exact (mean, variance) of sum_i (xi_i - h_i)^2 for the noise family."""
    h = np.asarray(h, dtype=float)
    if h.shape != (noise.d_n,):
        raise ValueError(f"offset vector must have length {noise.d_n}")
    var_c, m4_c = noise.coordinate_moments()
    lam = float(h @ h)
    mean = noise.d_n * var_c + lam
    var = noise.d_n * (m4_c - var_c**2) + 4.0 * lam * var_c
    return mean, var


def berry_esseen_gap(
    noise: NoiseSpec, x: np.ndarray, n_samples: int, seed: int
) -> GaussianApproxReport:
    """Kolmogorov and local-density gaps of the standardized squared-noise norm.

    Samples ||noise - x||^2, standardizes by the exact (mu_x, sigma_x), and
    compares the empirical CDF with Phi plus a histogram density (bin width
    d_n^{-1/4} after standardization) with phi over |t| <= 4.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples for a stable gap")
    h = np.asarray(x, dtype=float)
    mu, var = noise_shift_moments(noise, h)
    sigma = math.sqrt(var)
    rng = spawn_generator(seed, STREAM_MC)
    std = np.empty(n_samples)
    chunk = max(1, 20_000_000 // noise.d_n)
    for lo in range(0, n_samples, chunk):
        m = min(chunk, n_samples - lo)
        xi = noise.draw(rng, m)
        s = np.einsum("ij,ij->i", xi - h, xi - h)
        std[lo : lo + m] = (s - mu) / sigma
    std.sort()
    grid = special.ndtr(std)
    i = np.arange(1, n_samples + 1)
    cdf_gap = float(
        max(np.max(i / n_samples - grid), np.max(grid - (i - 1) / n_samples))
    )
    width = noise.d_n ** (-0.25)
    nbins = int(math.ceil(8.0 / width))
    edges = -4.0 + width * np.arange(nbins + 1)
    counts, _ = np.histogram(std, bins=edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    dens = counts / (n_samples * width)
    pdf_gap = float(np.max(np.abs(dens - np.exp(-(centers**2) / 2.0) / math.sqrt(2 * math.pi))))
    return GaussianApproxReport(
        d_n=noise.d_n,
        x=h,
        n_samples=n_samples,
        cdf_gap=cdf_gap,
        pdf_gap=pdf_gap,
        mu_x=mu,
        sigma_x=sigma,
        bin_width=width,
        norm4=float(np.sum(np.abs(h) ** 4)),
        norm6=float(np.sum(np.abs(h) ** 6)),
        norm_inf=float(np.max(np.abs(h))) if h.size else 0.0,
    )


# ---------------------------------------------------------------------------
# Minimum quadratic variance (the density-variance floor)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MinQuadVar:
    grid_min: float
    h_at_min: float
    moment_min: float


def uniform_min_quadratic_variance(halfwidth: float) -> float:
    """min_h var[(X - h)^2] for X ~ Uniform[-M, M]: 4 M^4 / 45 exactly."""
    if halfwidth <= 0:
        raise ValueError("halfwidth must be positive")
    return 4.0 * halfwidth**4 / 45.0


def moment_min_quadratic_variance(samples: np.ndarray) -> float:
    """var(X)^2 (m4 - m3^2 - 1) from standardized central sample moments."""
    x = np.asarray(samples, dtype=float)
    c = x - x.mean()
    v = float(np.mean(c**2))
    if v <= 0:
        raise NumericError("degenerate sample: fewer than two distinct values")
    m3 = float(np.mean(c**3)) / v**1.5
    m4 = float(np.mean(c**4)) / v**2
    return v * v * (m4 - m3 * m3 - 1.0)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def min_quadratic_variance(
    samples: np.ndarray, h_grid: np.ndarray | None = None
) -> MinQuadVar:
    """Grid-plus-golden-section minimization of h -> var[(X - h)^2].

    The default grid spans [mean - 3 sd, mean + 3 sd] with 257 points; a
    golden-section pass refines the best bracket.  The moment-determinant
    value rides along for cross-checking (the two are algebraically equal in
    the population).
    """
    x = np.asarray(samples, dtype=float)
    if np.unique(x).size < 2:
        raise NumericError("degenerate sample: fewer than two distinct values")
    mean, sd = float(x.mean()), float(x.std())
    if h_grid is None:
        h_grid = np.linspace(mean - 3.0 * sd, mean + 3.0 * sd, 257)
    h_grid = np.asarray(h_grid, dtype=float)
    if h_grid.size < 256:
        raise ValueError("h grid must have at least 256 points")

    def objective(h: float) -> float:
        y = (x - h) ** 2
        return float(y.var())

    vals = np.array([objective(h) for h in h_grid])
    i = int(np.argmin(vals))
    lo = h_grid[max(i - 1, 0)]
    hi = h_grid[min(i + 1, h_grid.size - 1)]
    a, b = lo, hi
    c1 = b - _GOLDEN * (b - a)
    c2 = a + _GOLDEN * (b - a)
    f1, f2 = objective(c1), objective(c2)
    for _ in range(60):
        if f1 < f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - _GOLDEN * (b - a)
            f1 = objective(c1)
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + _GOLDEN * (b - a)
            f2 = objective(c2)
        if b - a < 1e-12 * max(1.0, abs(a)):
            break
    h_best = (a + b) / 2.0
    best = min(objective(h_best), vals[i])
    return MinQuadVar(
        grid_min=float(best),
        h_at_min=float(h_best),
        moment_min=moment_min_quadratic_variance(x),
    )
