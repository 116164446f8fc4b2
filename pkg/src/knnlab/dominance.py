"""Dominance diagnostics: the margin tau, stochastic dominance verdicts,
the conditional-ratio rho(x, r), and its empirical composition T_k.

The margin at x is the gap between the other-class and same-class expected
squared signal distances; when it is positive and the same-class signal
distance is stochastically smaller, the point sits in the benign region where
nearest neighbors learn fast, and when it is at most -tau the point sits in
the malign region with a coin-flip error floor.

Numerics: conditional signal moments and masses come from a midpoint
quadrature grid over the signal rectangle (1024 x 1024 by default).  Distance
CDFs are exact for presets whose conditionals are uniform over polygons (disk
against polygon intersection areas, 1e-9 comparison slack) and pooled Monte
Carlo otherwise (4/sqrt(n_mc) slack per grid point).  rho's quadrature method
averages the noncentral chi-square noise CDF over the conditional signal grid
for standard-normal noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chisq import ncx2_cdf
from .distributions import (
    Dataset,
    ProductDistribution,
    bayes_at,
    conditional_cell_weights,
    signal_grid_centers,
)
from .errors import DegenerateClassError, EmptyBallError
from .knn import KnnModel, neighbor_radius
from .rng import STREAM_MC, spawn_generator

EXACT_SLACK = 1e-9
_GRID = (1024, 1024)
_RADIAL_BINS = 4096
_INTERP_NODES = 16384

# ---------------------------------------------------------------------------
# Cached conditional grids and moments
# ---------------------------------------------------------------------------

_weights_cache: dict = {}
_MAX_CACHED = 8


def _cache_key(dist: ProductDistribution, nx: int, ny: int):
    kind = dist.signal.kind
    if kind.tag == "custom":
        return None
    return (kind.tag, kind.params, dist.signal.rect, nx, ny)


def _grid_weights(dist: ProductDistribution, nx: int = _GRID[0], ny: int = _GRID[1]):
    key = _cache_key(dist, nx, ny)
    if key is not None and key in _weights_cache:
        return _weights_cache[key]
    value = conditional_cell_weights(dist, nx, ny)
    if key is not None:
        if len(_weights_cache) >= _MAX_CACHED:
            _weights_cache.pop(next(iter(_weights_cache)))
        _weights_cache[key] = value
    return value


def signal_moments(dist: ProductDistribution, nx: int = _GRID[0], ny: int = _GRID[1]):
    """Conditional signal means and second moments ((m0, m1), (E0, E1))."""
    centers, w0, w1 = _grid_weights(dist, nx, ny)
    sq = np.einsum("ij,ij->i", centers, centers)
    m0 = w0 @ centers
    m1 = w1 @ centers
    return (m0, m1), (float(w0 @ sq), float(w1 @ sq))


# ---------------------------------------------------------------------------
# The margin tau
# ---------------------------------------------------------------------------


def tau_margin(dist: ProductDistribution, x: np.ndarray) -> float:
    """E||P_s(X' - x)||^2 - E||P_s(X - x)||^2 with X same-class as f*(x).

    Expands to a moment difference, so one cached quadrature pass over the
    signal rectangle serves every x.
    """
    x = np.asarray(x, dtype=float)
    theta = int(bayes_at(dist, x))
    p = dist.signal_part(x)
    (m0, m1), (e0, e1) = signal_moments(dist)
    if theta == 1:
        return float((e0 - e1) - 2.0 * (m0 - m1) @ p)
    return float((e1 - e0) - 2.0 * (m1 - m0) @ p)


def tau_margin_grid(
    dist: ProductDistribution, probes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(theta, tau) for a stack of signal-plane probes, vectorized."""
    probes = np.asarray(probes, dtype=float)
    (m0, m1), (e0, e1) = signal_moments(dist)
    tau_if_1 = (e0 - e1) - 2.0 * probes @ (m0 - m1)
    eta = dist.signal.eta(probes)
    theta = (eta >= 0.5).astype(np.int8)
    tau = np.where(theta == 1, tau_if_1, -tau_if_1)
    return theta, tau


# ---------------------------------------------------------------------------
# Exact disk-against-polygon geometry for uniform-polygon conditionals
# ---------------------------------------------------------------------------


def _clip_halfplane(poly: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon to {x : normal . x >= 0}."""
    out = []
    m = poly.shape[0]
    vals = poly @ normal
    for i in range(m):
        j = (i + 1) % m
        pi, pj = poly[i], poly[j]
        vi, vj = vals[i], vals[j]
        if vi >= 0:
            out.append(pi)
        if (vi >= 0) != (vj >= 0):
            t = vi / (vi - vj)
            out.append(pi + t * (pj - pi))
    return np.asarray(out)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def conditional_polygons(dist: ProductDistribution):
    """(poly0, poly1) for presets with uniform polygonal conditionals, else None."""
    kind = dist.signal.kind
    if kind.tag in ("aligned_rect", "mixture_rect"):
        a, b = kind.params[0], kind.params[1]
        poly1 = np.array([[0.0, -b], [a, -b], [a, b], [0.0, b]])
        poly0 = np.array([[-a, -b], [0.0, -b], [0.0, b], [-a, b]])
        return poly0, poly1
    if kind.tag == "rotated_rect":
        a, b, slope = kind.params
        rect = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        normal = np.array([-slope, 1.0])
        poly1 = _clip_halfplane(rect, normal)
        poly0 = _clip_halfplane(rect, -normal)
        return poly0, poly1
    return None


def disk_polygon_area(
    poly: np.ndarray, centers: np.ndarray, radii: np.ndarray
) -> np.ndarray:
    """area(polygon intersect disk(center, r)) for (C,) centers x (R,) radii.

    Green's-theorem edge sweep: each edge contributes either a triangle part
    (chord inside the disk) or circular-sector parts, all vectorized over the
    (C, R) broadcast.  Exact up to floating rounding; the polygon must be
    simple (any orientation; the result carries the orientation sign).
    """
    poly = np.asarray(poly, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    r2 = (radii**2)[None, :]  # (1, R)
    total = np.zeros((centers.shape[0], radii.size))
    m = poly.shape[0]

    def cross(ux, uy, vx, vy):
        return ux * vy - uy * vx

    def sector(ux, uy, vx, vy):
        ang = np.arctan2(cross(ux, uy, vx, vy), ux * vx + uy * vy)
        return 0.5 * r2 * ang

    for i in range(m):
        v0 = poly[i]
        v1 = poly[(i + 1) % m]
        d = v1 - v0  # constant along the edge
        a = float(d @ d)
        px = v0[0] - centers[:, 0:1]  # (C, 1)
        py = v0[1] - centers[:, 1:2]
        qx, qy = px + d[0], py + d[1]
        b = 2.0 * (px * d[0] + py * d[1])  # (C, 1)
        c = px**2 + py**2 - r2  # (C, R)
        disc = b**2 - 4.0 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = np.clip((-b - sq) / (2.0 * a), 0.0, 1.0)
        t2 = np.clip((-b + sq) / (2.0 * a), 0.0, 1.0)
        empty = (disc <= 0.0) | (t2 <= t1)
        lo = np.where(empty, 0.0, t1)
        hi = np.where(empty, 0.0, t2)
        ax_, ay_ = px + lo * d[0], py + lo * d[1]
        bx_, by_ = px + hi * d[0], py + hi * d[1]
        contrib = (
            sector(px, py, ax_, ay_)
            + 0.5 * cross(ax_, ay_, bx_, by_)
            + sector(bx_, by_, qx, qy)
        )
        total += contrib
    return total


def signal_distance_cdfs_exact(
    dist: ProductDistribution, probes: np.ndarray, radii: np.ndarray
):
    """Exact conditional CDFs of the signal distance for polygon presets.

    Returns (F0, F1) of shape (C, R); None when the preset has no polygonal
    conditionals.
    """
    polys = conditional_polygons(dist)
    if polys is None:
        return None
    poly0, poly1 = polys
    f0 = disk_polygon_area(poly0, probes, radii) / polygon_area(poly0)
    f1 = disk_polygon_area(poly1, probes, radii) / polygon_area(poly1)
    return np.clip(f0, 0.0, 1.0), np.clip(f1, 0.0, 1.0)


def signal_distance_cdfs_mc(
    dist: ProductDistribution, probes: np.ndarray, radii: np.ndarray, n_mc: int, seed: int
):
    """Pooled-sample empirical conditional CDFs (F0, F1) of shape (C, R).

    One conditional sample per class is shared by every probe, so a map over
    many probes stays deterministic and cheap.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    radii = np.asarray(radii, dtype=float)
    rng = spawn_generator(seed, STREAM_MC)
    s1 = dist.signal.conditional_sampler(1, rng, n_mc)
    s0 = dist.signal.conditional_sampler(0, rng, n_mc)
    n_r = radii.size
    out = []
    for s in (s0, s1):
        sq_s = np.einsum("ij,ij->i", s, s)
        f = np.empty((probes.shape[0], n_r))
        for lo in range(0, probes.shape[0], 64):
            chunk = probes[lo : lo + 64]
            rows = chunk.shape[0]
            d2 = (
                np.einsum("ij,ij->i", chunk, chunk)[:, None]
                - 2.0 * chunk @ s.T
                + sq_s[None, :]
            )
            d = np.sqrt(np.maximum(d2, 0.0))
            # each distance lands in the first radius bin covering it; a
            # cumulative count over bins gives the CDF at every grid radius
            idx = np.searchsorted(radii, d.ravel(), side="left")
            idx += np.repeat(np.arange(rows) * (n_r + 1), n_mc)
            counts = np.bincount(idx, minlength=rows * (n_r + 1))
            counts = counts.reshape(rows, n_r + 1)[:, :n_r]
            f[lo : lo + 64] = np.cumsum(counts, axis=1)
        out.append(f / n_mc)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Dominance verdicts and point classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdVerdict:
    """Outcome of the stochastic-dominance comparison at one point."""

    status: str  # "holds" | "violated" | "untested"
    max_violation: float = 0.0
    at_radius: float = math.nan
    method: str = ""

    @property
    def holds(self) -> bool:
        return self.status == "holds"


UNTESTED = SdVerdict(status="untested")


@dataclass(frozen=True)
class DominanceReport:
    """Per-point diagnostic: margin, dominance verdict, region label."""

    x: np.ndarray
    theta: int
    tau: float
    sd_verdict: SdVerdict
    region: str  # "positive" | "negative" | "neither"
    tau_threshold: float


def dominance_radius_grid(dist: ProductDistribution, size: int) -> np.ndarray:
    """Uniform radius grid over (0, 2R]; 2R covers every in-support distance."""
    if size < 16:
        raise ValueError("radius grid must have at least 16 points")
    two_r = 2.0 * dist.signal.support_radius
    return two_r * np.arange(1, size + 1) / size


def stochastic_dominance_check(
    dist: ProductDistribution,
    x: np.ndarray,
    radius_grid_size: int = 64,
    n_mc: int = 100_000,
    seed: int = 0,
) -> SdVerdict:
    """Compare the same-class vs other-class signal-distance CDFs at f*(x).

    Dominance holds when the same-class CDF is at least the other-class CDF at
    every grid radius beyond the method's noise slack.
    """
    x = np.asarray(x, dtype=float)
    theta = int(bayes_at(dist, x))
    probe = dist.signal_part(x)[None, :]
    radii = dominance_radius_grid(dist, radius_grid_size)
    exact = signal_distance_cdfs_exact(dist, probe, radii)
    if exact is not None:
        f0, f1 = exact
        slack, method = EXACT_SLACK, "exact"
    else:
        f0, f1 = signal_distance_cdfs_mc(dist, probe, radii, n_mc, seed)
        slack, method = 4.0 / math.sqrt(n_mc), "monte_carlo"
    same, other = (f1, f0) if theta == 1 else (f0, f1)
    return _verdict_from_cdfs(same[0], other[0], radii, slack, method)


def _verdict_from_cdfs(same, other, radii, slack, method) -> SdVerdict:
    gap = other - same
    worst = int(np.argmax(gap))
    if gap[worst] > slack:
        return SdVerdict(
            status="violated",
            max_violation=float(gap[worst]),
            at_radius=float(radii[worst]),
            method=method,
        )
    return SdVerdict(status="holds", method=method)


def classify_point(
    dist: ProductDistribution,
    x: np.ndarray,
    tau_threshold: float,
    radius_grid_size: int = 64,
    n_mc: int = 100_000,
    seed: int = 0,
) -> DominanceReport:
    """Assign x to the positive region, the negative region, or neither.

    Positive needs both the margin clause (tau >= threshold) and the dominance
    clause; negative needs only the margin clause (tau <= -threshold).  When
    the margin passes but dominance fails, the region is neither and the
    verdict carries the violation magnitude.
    """
    if tau_threshold <= 0:
        raise ValueError("tau threshold must be positive")
    x = np.asarray(x, dtype=float)
    theta = int(bayes_at(dist, x))
    tau = tau_margin(dist, x)
    if tau >= tau_threshold:
        verdict = stochastic_dominance_check(dist, x, radius_grid_size, n_mc, seed)
        region = "positive" if verdict.holds else "neither"
    elif tau <= -tau_threshold:
        verdict = UNTESTED
        region = "negative"
    else:
        verdict = UNTESTED
        region = "neither"
    return DominanceReport(
        x=x, theta=theta, tau=tau, sd_verdict=verdict, region=region,
        tau_threshold=tau_threshold,
    )


# ---------------------------------------------------------------------------
# The conditional ratio rho and its empirical composition T_k
# ---------------------------------------------------------------------------


class RhoEvaluator:
    """Quadrature evaluator of r -> rho(x, r) for a fixed x.

    Averages the noncentral chi-square noise CDF (d_n degrees, noncentrality
    ||P_n(x)||^2; standard-normal noise only) over the conditional signal
    masses.  Signal squared distances are reduced onto radial bins carrying
    their within-bin weighted means, and the noise CDF is evaluated through a
    dense interpolation table, so repeated radii cost O(bins) each.
    """

    def __init__(
        self,
        dist: ProductDistribution,
        x: np.ndarray,
        grid: tuple = _GRID,
        radial_bins: int = _RADIAL_BINS,
    ):
        if dist.noise.family != "standard_normal":
            raise ValueError(
                "the quadrature route needs standard-normal noise; "
                "use the monte_carlo method instead"
            )
        x = np.asarray(x, dtype=float)
        if x.shape != (dist.d,):
            raise ValueError(f"x must have dimension {dist.d}")
        self.dist = dist
        self.d_n = dist.noise.d_n
        h = dist.noise_part(x)
        self.lam = float(h @ h)
        p = dist.signal_part(x)
        centers, w0, w1 = _grid_weights(dist, *grid)
        diff = centers - p
        q = np.einsum("ij,ij->i", diff, diff)
        q_max = float(q.max())
        edges = np.linspace(0.0, q_max * (1 + 1e-12), radial_bins + 1)
        digit = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, radial_bins - 1)
        self.w0 = np.bincount(digit, weights=w0, minlength=radial_bins)
        self.w1 = np.bincount(digit, weights=w1, minlength=radial_bins)
        with np.errstate(invalid="ignore"):
            self.q0 = np.where(
                self.w0 > 0,
                np.bincount(digit, weights=w0 * q, minlength=radial_bins)
                / np.where(self.w0 > 0, self.w0, 1.0),
                edges[:-1],
            )
            self.q1 = np.where(
                self.w1 > 0,
                np.bincount(digit, weights=w1 * q, minlength=radial_bins)
                / np.where(self.w1 > 0, self.w1, 1.0),
                edges[:-1],
            )

    def _noise_cdf_table(self, vmin: float, vmax: float):
        nodes = np.linspace(min(vmin, 0.0), max(vmax, 1.0), _INTERP_NODES)
        return nodes, ncx2_cdf(nodes, self.d_n, self.lam)

    def ball_probs(self, radii: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(P0[B(x,r)], P1[B(x,r)]) for an array of radii."""
        radii = np.atleast_1d(np.asarray(radii, dtype=float))
        r2 = radii**2
        vmax = float(r2.max())
        vmin = float(r2.min() - max(self.q0.max(), self.q1.max()))
        nodes, table = self._noise_cdf_table(vmin, vmax)
        p0 = np.empty(radii.size)
        p1 = np.empty(radii.size)
        chunk = max(1, 2_000_000 // self.w0.size)
        for lo in range(0, radii.size, chunk):
            v0 = r2[lo : lo + chunk, None] - self.q0[None, :]
            v1 = r2[lo : lo + chunk, None] - self.q1[None, :]
            p0[lo : lo + chunk] = np.interp(v0, nodes, table) @ self.w0
            p1[lo : lo + chunk] = np.interp(v1, nodes, table) @ self.w1
        return p0, p1

    def rho(self, radii: np.ndarray) -> np.ndarray:
        """rho(x, r) per radius; +inf radii give the prior ratio exactly."""
        radii = np.atleast_1d(np.asarray(radii, dtype=float))
        out = np.empty(radii.size)
        inf_mask = np.isinf(radii)
        out[inf_mask] = self.dist.pi1 / self.dist.pi0
        if (~inf_mask).any():
            p0, p1 = self.ball_probs(radii[~inf_mask])
            if np.any((p0 <= 0.0) & (p1 <= 0.0)):
                raise EmptyBallError(
                    "both ball probabilities vanished; enlarge r or the grid"
                )
            with np.errstate(divide="ignore"):
                out[~inf_mask] = (self.dist.pi1 * p1) / (self.dist.pi0 * p0)
        return out


def rho(
    dist: ProductDistribution,
    x: np.ndarray,
    r: float,
    method: str = "quadrature",
    n_mc: int = 100_000,
    seed: int = 0,
) -> float:
    """The conditional ratio pi1 P1[B(x,r)] / (pi0 P0[B(x,r)])."""
    if not r > 0:
        raise ValueError("r must be positive")
    if method == "quadrature":
        return float(RhoEvaluator(dist, x).rho(np.array([r]))[0])
    if method == "monte_carlo":
        value, _, failed = rho_monte_carlo(dist, x, r, n_mc, seed)
        return value
    raise ValueError(f"unknown method {method!r}")


def rho_monte_carlo(
    dist: ProductDistribution, x: np.ndarray, r: float, n_mc: int, seed: int
) -> tuple[float, float, bool]:
    """(estimate, standard error, denominator-failure flag) for rho(x, r).

    Samples both conditionals; raises EmptyBallError when neither class puts
    any sample in the ball, and flags (value +inf) when only the denominator
    is empty.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    x = np.asarray(x, dtype=float)
    rng = spawn_generator(seed, STREAM_MC)
    counts = []
    for label in (0, 1):
        pts = np.empty((n_mc, dist.d))
        pts[:, : dist.signal.d_s] = dist.signal.conditional_sampler(label, rng, n_mc)
        pts[:, dist.signal.d_s :] = dist.noise.draw(rng, n_mc)
        diff = pts - x
        counts.append(int(np.sum(np.einsum("ij,ij->i", diff, diff) < r * r)))
    c0, c1 = counts
    if c0 == 0 and c1 == 0:
        raise EmptyBallError(
            f"no samples of either class landed in B(x, {r}); "
            "increase r or n_mc"
        )
    if c0 == 0:
        return math.inf, math.nan, True
    p0, p1 = c0 / n_mc, c1 / n_mc
    value = (dist.pi1 * p1) / (dist.pi0 * p0)
    if c1 == 0:
        return 0.0, math.nan, False
    rel = math.sqrt((1 - p0) / (n_mc * p0) + (1 - p1) / (n_mc * p1))
    return value, value * rel, False


def t_k_empirical(
    model: KnnModel, dist: ProductDistribution, x: np.ndarray, k: int
) -> float:
    """T_k(x) = rho(x, R_(k+1)(x)) under the fitted model (quadrature rho)."""
    n = model.data.n
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    r = neighbor_radius(model, x, k + 1)
    if math.isinf(r):
        return dist.pi1 / dist.pi0
    return float(RhoEvaluator(dist, x).rho(np.array([r]))[0])
