"""Signal-times-noise product distributions and their analytic quantities.

Each distribution is a product of a bounded two-dimensional signal component
that carries the label and an independent i.i.d. noise component.  The
embedding convention is fixed: coordinates ``0..d_s-1`` are signal,
``d_s..d-1`` are noise (standard basis vectors).

All spec objects are immutable after construction and safe to share across
threads; sampling takes an explicit seed, so concurrent use is race-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateClassError
from .rng import STREAM_SAMPLE, spawn_generator

# ---------------------------------------------------------------------------
# Spec dataclasses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalKind:
    """Tag + parameters identifying a preset signal family.

    Tags: ``aligned_rect(a, b)``, ``rotated_rect(a, b, slope)``,
    ``ramp_rect(a, b)``, ``ellipse_rect(a, b)``, ``mixture_rect(a, b, w0)``,
    ``custom``.
    """

    tag: str
    params: tuple = ()


@dataclass(frozen=True)
class SignalSpec:
    """Bounded signal component: regression function + class-conditional laws.

    ``eta`` maps an ``(m, d_s)`` array of signal vectors to values in [0, 1].
    ``conditional_sampler(label, rng, m)`` draws ``m`` signal vectors from the
    law of the signal given ``Y = label``.  ``marginal_density`` is the signal
    marginal (used by quadrature); ``rect`` is the bounding box
    ``(x_lo, x_hi, y_lo, y_hi)`` of the support.
    """

    d_s: int
    support_radius: float
    pi1: float
    eta: Callable[[np.ndarray], np.ndarray]
    conditional_sampler: Callable[[int, np.random.Generator, int], np.ndarray]
    marginal_density: Callable[[np.ndarray], np.ndarray]
    rect: tuple
    kind: SignalKind

    def __post_init__(self):
        if self.d_s < 1:
            raise ValueError("signal dimension must be >= 1")
        if not 0.0 < self.pi1 < 1.0:
            raise ValueError("class-1 prior must lie strictly inside (0, 1)")
        if self.support_radius <= 0:
            raise ValueError("support radius must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Independent zero-mean noise coordinates with bounded density.

    ``family`` is one of ``standard_normal``, ``uniform_scaled``, ``custom``.
    ``density_bound`` is the common bound M on the sup norm and the total
    variation of each coordinate density (M >= 1).  ``uniform_scaled`` with
    bound M means Uniform[-1/M, 1/M] per coordinate, so that both constraints
    hold with equality at M.
    """

    d_n: int
    family: str
    density_bound: float = 1.0
    sampler: Optional[Callable[[np.random.Generator, tuple], np.ndarray]] = None

    def __post_init__(self):
        if self.d_n < 1:
            raise ValueError("noise dimension must be >= 1")
        if self.family not in ("standard_normal", "uniform_scaled", "custom"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.density_bound < 1.0:
            raise ValueError("density bound must be >= 1")
        if self.family == "custom" and self.sampler is None:
            raise ValueError("custom noise needs a sampler")

    @property
    def halfwidth(self) -> float:
        if self.family != "uniform_scaled":
            raise ValueError("halfwidth is defined for uniform_scaled noise only")
        return 1.0 / self.density_bound

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "standard_normal":
            return rng.standard_normal((n, self.d_n))
        if self.family == "uniform_scaled":
            w = self.halfwidth
            return rng.uniform(-w, w, (n, self.d_n))
        return np.asarray(self.sampler(rng, (n, self.d_n)), dtype=float)

    def coordinate_moments(self) -> tuple:
        """(variance, fourth moment) of one noise coordinate, exact."""
        if self.family == "standard_normal":
            return 1.0, 3.0
        if self.family == "uniform_scaled":
            w = self.halfwidth
            return w**2 / 3.0, w**4 / 5.0
        raise ValueError("exact moments unavailable for custom noise")


@dataclass(frozen=True)
class ProductDistribution:
    signal: SignalSpec
    noise: NoiseSpec
    name: str = "custom"

    @property
    def d(self) -> int:
        return self.signal.d_s + self.noise.d_n

    @property
    def pi1(self) -> float:
        return self.signal.pi1

    @property
    def pi0(self) -> float:
        return 1.0 - self.signal.pi1

    def signal_part(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., : self.signal.d_s]

    def noise_part(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., self.signal.d_s :]


@dataclass(frozen=True)
class Dataset:
    """n labeled points in R^d with binary labels."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=float)
        labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        if points.ndim != 2:
            raise ValueError("points must be a 2-D array")
        if labels.shape != (points.shape[0],):
            raise ValueError("labels must be one per row")
        if points.shape[0] < 1:
            raise ValueError("a dataset needs at least one row")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        points.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def class_counts(self) -> tuple:
        n1 = int(self.labels.sum())
        return self.n - n1, n1


# ---------------------------------------------------------------------------
# Preset regression functions and densities (module level: picklable)
# ---------------------------------------------------------------------------


def _eta_sign(s: np.ndarray) -> np.ndarray:
    return (np.asarray(s)[..., 0] > 0).astype(float)


def _eta_rotated(s: np.ndarray, slope: float) -> np.ndarray:
    s = np.asarray(s)
    return (s[..., 1] > slope * s[..., 0]).astype(float)


def _eta_ramp(s: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(s)[..., 0] + 1.0) / 2.0, 0.0, 1.0)


ELLIPSE_LEVEL = 8.0 / math.pi


def _eta_ellipse(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    return (s[..., 0] ** 2 + 16.0 * s[..., 1] ** 2 <= ELLIPSE_LEVEL).astype(float)


def _uniform_rect_density(s: np.ndarray, a: float, b: float) -> np.ndarray:
    s = np.asarray(s)
    inside = (np.abs(s[..., 0]) <= a) & (np.abs(s[..., 1]) <= b)
    return inside / (4.0 * a * b)


def _mixture_rect_density(s: np.ndarray, a: float, b: float, w0: float) -> np.ndarray:
    s = np.asarray(s)
    z = s[..., 0]
    dens1 = np.where((z >= -a) & (z < 0), w0 / a, 0.0)
    dens1 = np.where((z >= 0) & (z <= a), (1.0 - w0) / a, dens1)
    inside_y = np.abs(s[..., 1]) <= b
    return dens1 * inside_y / (2.0 * b)


def _rejection_conditional(
    label: int,
    rng: np.random.Generator,
    m: int,
    a: float,
    b: float,
    eta_fn: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Sample the label-conditional signal by rejection against eta.

    Draws uniformly from the rectangle and accepts with probability eta (for
    label 1) or 1 - eta (for label 0); exact for indicator and for smooth eta.
    """
    out = np.empty((m, 2))
    have = 0
    while have < m:
        batch = max(1024, 2 * (m - have))
        s = np.column_stack(
            [rng.uniform(-a, a, batch), rng.uniform(-b, b, batch)]
        )
        p = eta_fn(s)
        accept_prob = p if label == 1 else 1.0 - p
        keep = rng.random(batch) < accept_prob
        s = s[keep]
        take = min(m - have, s.shape[0])
        out[have : have + take] = s[:take]
        have += take
    return out


def _subrect_conditional(
    label: int,
    rng: np.random.Generator,
    m: int,
    a: float,
    b: float,
) -> np.ndarray:
    """Conditional sampler for the two-piece mixture: uniform sub-rectangles."""
    lo, hi = (0.0, a) if label == 1 else (-a, 0.0)
    return np.column_stack([rng.uniform(lo, hi, m), rng.uniform(-b, b, m)])


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def _check_dimension(d: int) -> None:
    if d < 3:
        raise ValueError("total dimension must be >= 3 (2 signal + >=1 noise)")


def _rect_spec(a, b, eta_fn, pi1, kind) -> SignalSpec:
    return SignalSpec(
        d_s=2,
        support_radius=math.hypot(a, b),
        pi1=pi1,
        eta=eta_fn,
        conditional_sampler=partial(_rejection_conditional, a=a, b=b, eta_fn=eta_fn),
        marginal_density=partial(_uniform_rect_density, a=a, b=b),
        rect=(-a, a, -b, b),
        kind=kind,
    )


def make_aligned(a: float, b: float, d: int) -> ProductDistribution:
    """Uniform rectangle with the axis-aligned boundary label 1{z1 > 0}."""
    if a <= 0 or b <= 0:
        raise ValueError("rectangle half-widths must be positive")
    _check_dimension(d)
    signal = _rect_spec(a, b, _eta_sign, 0.5, SignalKind("aligned_rect", (a, b)))
    noise = NoiseSpec(d_n=d - 2, family="standard_normal")
    return ProductDistribution(signal, noise, name=f"aligned(a={a},b={b},d={d})")


def make_rotated(a: float, b: float, d: int, slope: float = 0.5) -> ProductDistribution:
    """Same covariates as ``make_aligned``, label 1{z2 > slope * z1}.

    The regime condition a > 2b is enforced for the default slope 1/2; for
    other slopes the balanced-class property is the caller's responsibility.
    """
    if a <= 0 or b <= 0:
        raise ValueError("rectangle half-widths must be positive")
    if slope == 0.5 and not a > 2 * b:
        raise ValueError("the rotated preset with slope 1/2 requires a > 2b")
    _check_dimension(d)
    eta_fn = partial(_eta_rotated, slope=slope)
    signal = _rect_spec(a, b, eta_fn, 0.5, SignalKind("rotated_rect", (a, b, slope)))
    noise = NoiseSpec(d_n=d - 2, family="standard_normal")
    return ProductDistribution(
        signal, noise, name=f"rotated(a={a},b={b},d={d},slope={slope})"
    )


def make_ramp(a: float, b: float, d: int) -> ProductDistribution:
    """Agnostic preset: eta ramps linearly from 0 to 1 over z1 in [-1, 1]."""
    if a <= 1:
        raise ValueError("the ramp preset requires a > 1 so all branches are active")
    if b <= 0:
        raise ValueError("rectangle half-widths must be positive")
    _check_dimension(d)
    signal = _rect_spec(a, b, _eta_ramp, 0.5, SignalKind("ramp_rect", (a, b)))
    noise = NoiseSpec(d_n=d - 2, family="standard_normal")
    return ProductDistribution(signal, noise, name=f"ramp(a={a},b={b},d={d})")


def make_ellipse(a: float = 2.0, b: float = 0.5, d: int = 10) -> ProductDistribution:
    """Realizable nonlinear boundary: label = 1{z1^2 + 16 z2^2 <= 8/pi}."""
    _check_dimension(d)
    semi_x = math.sqrt(ELLIPSE_LEVEL)
    semi_y = semi_x / 4.0
    if a < semi_x or b < semi_y:
        raise ValueError("the ellipse must fit inside the rectangle")
    # ellipse area = pi * semi_x * semi_y = 2, exactly
    pi1 = (math.pi * semi_x * semi_y) / (4.0 * a * b)
    signal = _rect_spec(a, b, _eta_ellipse, pi1, SignalKind("ellipse_rect", (a, b)))
    noise = NoiseSpec(d_n=d - 2, family="standard_normal")
    return ProductDistribution(signal, noise, name=f"ellipse(a={a},b={b},d={d})")


def make_unbalanced(d: int) -> ProductDistribution:
    """Two-piece mixture on z1 (3:1 mass split) with the sign label rule."""
    _check_dimension(d)
    a, b, w0 = 2.0, 0.5, 0.75
    signal = SignalSpec(
        d_s=2,
        support_radius=math.hypot(a, b),
        pi1=1.0 - w0,
        eta=_eta_sign,
        conditional_sampler=partial(_subrect_conditional, a=a, b=b),
        marginal_density=partial(_mixture_rect_density, a=a, b=b, w0=w0),
        rect=(-a, a, -b, b),
        kind=SignalKind("mixture_rect", (a, b, w0)),
    )
    noise = NoiseSpec(d_n=d - 2, family="standard_normal")
    return ProductDistribution(signal, noise, name=f"unbalanced(d={d})")


PRESETS = {
    "aligned": make_aligned,
    "rotated": make_rotated,
    "ramp": make_ramp,
    "ellipse": make_ellipse,
    "unbalanced": make_unbalanced,
}


# ---------------------------------------------------------------------------
# Sampling and analytic quantities
# ---------------------------------------------------------------------------


def sample(dist: ProductDistribution, n: int, seed: int) -> Dataset:
    """Draw n i.i.d. rows; deterministic given (dist, n, seed).

    Labels come from the prior first, then the signal from the label
    conditional, then the noise block; this keeps the class proportions
    exactly at the prior in distribution.
    """
    if n < 1:
        raise ValueError("sample size must be >= 1")
    rng = spawn_generator(seed, STREAM_SAMPLE)
    labels = (rng.random(n) < dist.pi1).astype(np.int8)
    d_s = dist.signal.d_s
    points = np.empty((n, dist.d))
    n1 = int(labels.sum())
    if n1:
        points[labels == 1, :d_s] = dist.signal.conditional_sampler(1, rng, n1)
    if n - n1:
        points[labels == 0, :d_s] = dist.signal.conditional_sampler(0, rng, n - n1)
    points[:, d_s:] = dist.noise.draw(rng, n)
    return Dataset(points, labels)


def eta_at(dist: ProductDistribution, x: np.ndarray) -> np.ndarray:
    """Regression function P[Y=1 | X=x]; accepts a vector or a stack."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dist.d:
        raise ValueError(f"point has dimension {x.shape[-1]}, expected {dist.d}")
    return dist.signal.eta(dist.signal_part(x))


def bayes_at(dist: ProductDistribution, x: np.ndarray) -> np.ndarray:
    """Optimal rule 1{eta >= 1/2} (ties predict 1)."""
    return (eta_at(dist, x) >= 0.5).astype(np.int8)


REALIZABLE_KINDS = ("aligned_rect", "rotated_rect", "ellipse_rect", "mixture_rect")

_BAYES_GRID = 2048


def bayes_risk(dist: ProductDistribution) -> float:
    """E[min(eta, 1 - eta)]: zero for realizable presets, quadrature otherwise.

    The quadrature is a midpoint rule on a 2048 x 2048 grid over the signal
    rectangle; the integrand is bounded and piecewise smooth in 2-D.
    """
    if dist.signal.kind.tag in REALIZABLE_KINDS:
        return 0.0
    centers, cell_area = signal_grid_centers(dist, _BAYES_GRID, _BAYES_GRID)
    e = dist.signal.eta(centers)
    dens = dist.signal.marginal_density(centers)
    return float(np.sum(np.minimum(e, 1.0 - e) * dens) * cell_area)


def signal_grid_centers(
    dist: ProductDistribution, nx: int, ny: int
) -> tuple[np.ndarray, float]:
    """Midpoint-rule cell centers over the signal rectangle, plus cell area."""
    x_lo, x_hi, y_lo, y_hi = dist.signal.rect
    hx = (x_hi - x_lo) / nx
    hy = (y_hi - y_lo) / ny
    cx = x_lo + hx * (np.arange(nx) + 0.5)
    cy = y_lo + hy * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    return centers, hx * hy


def conditional_cell_weights(
    dist: ProductDistribution, nx: int = 1024, ny: int = 1024
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centers, w0, w1): per-cell conditional signal masses on a midpoint grid.

    w_theta sums to 1 and approximates P[signal in cell | Y=theta].
    """
    centers, cell_area = signal_grid_centers(dist, nx, ny)
    e = dist.signal.eta(centers)
    dens = dist.signal.marginal_density(centers)
    w1 = e * dens * cell_area
    w0 = (1.0 - e) * dens * cell_area
    t0, t1 = w0.sum(), w1.sum()
    if t0 <= 0 or t1 <= 0:
        raise DegenerateClassError("a class has zero signal mass on the grid")
    return centers, w0 / t0, w1 / t1


# ---------------------------------------------------------------------------
# Dataset CSV round trip (header x0..x{d-1},y; repr gives shortest
# round-trip decimals, locale-independent)
# ---------------------------------------------------------------------------


def save_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        cols = [f"x{i}" for i in range(dataset.d)] + ["y"]
        fh.write(",".join(cols) + "\n")
        for row, label in zip(dataset.points, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write(f",{int(label)}\n")


def load_dataset_csv(path) -> Dataset:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if header[-1] != "y" or header[0] != "x0":
            raise ValueError("not a dataset CSV (expected header x0,...,y)")
        rows = []
        labels = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(parts[-1]))
    return Dataset(np.asarray(rows), np.asarray(labels))
