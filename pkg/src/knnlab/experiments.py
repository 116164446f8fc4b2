"""Experiment orchestration: scaling scans, dominance maps, bound overlays.

Scans run ``trials`` independent train/evaluate repetitions per sample size,
each owning a derived seed, and aggregate by trial index with numpy's pairwise
summation, so results are byte-identical for a given config regardless of
worker count.  Fresh test points are drawn per trial (the reported standard
error reflects both sampling sources).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import ProductDistribution, bayes_risk, signal_grid_centers
from .dominance import (
    DominanceReport,
    SdVerdict,
    UNTESTED,
    _verdict_from_cdfs,
    dominance_radius_grid,
    signal_distance_cdfs_exact,
    signal_distance_cdfs_mc,
    tau_margin_grid,
)
from .errors import ConfigError, InsufficientDataError
from .knn import _derived, _trial_eval, fit, predict_batch
from .distributions import sample
from .rng import STREAM_SAMPLE
from . import bounds as _bounds

# ---------------------------------------------------------------------------
# Configs and curve container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KRule:
    """How k scales with n: floor_frac(frac), affine (n/100 + 2), or fixed."""

    tag: str  # "floor_frac" | "affine" | "fixed"
    value: float = 0.1

    def k_for(self, n: int) -> int:
        if self.tag == "floor_frac":
            return max(1, int(math.floor(self.value * n)))
        if self.tag == "affine":
            return n // 100 + 2
        if self.tag == "fixed":
            return int(self.value)
        raise ConfigError(f"unknown k rule {self.tag!r}")

    def label(self) -> str:
        if self.tag == "floor_frac":
            return f"floor_frac({self.value})"
        if self.tag == "affine":
            return "affine"
        return f"fixed({int(self.value)})"


def parse_k_rule(text: str) -> KRule:
    """Parse 'affine', 'floor_frac:0.1', or 'fixed:52'."""
    parts = text.split(":")
    tag = parts[0]
    if tag == "affine":
        return KRule("affine")
    if tag in ("floor_frac", "fixed"):
        if len(parts) != 2:
            raise ConfigError(f"k rule {tag} needs a value, e.g. {tag}:0.1")
        return KRule(tag, float(parts[1]))
    raise ConfigError(f"unknown k rule {text!r}")


@dataclass(frozen=True)
class ScanConfig:
    dist: ProductDistribution
    n_grid: tuple
    k_rule: KRule
    trials: int
    n_test: int
    master_seed: int
    resample: str | None = None  # None | "undersample" | "oversample"
    workers: int = 0  # 0 = serial

    def validate(self) -> None:
        if len(self.n_grid) == 0:
            raise ConfigError("n grid must be non-empty")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n grid must be strictly increasing")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_test < 1:
            raise ConfigError("n_test must be >= 1")
        for n in self.n_grid:
            k = self.k_rule.k_for(n)
            if not 1 <= k <= n:
                raise ConfigError(f"k rule gives k={k} outside [1, {n}] at n={n}")
        if self.resample not in (None, "undersample", "oversample"):
            raise ConfigError(f"unknown resample mode {self.resample!r}")


@dataclass(frozen=True)
class CurveRow:
    n: int
    k: int
    trials: int
    mean_test_error: float
    stderr: float
    bayes_risk: float
    mean_excess: float
    excess_stderr: float


@dataclass(frozen=True)
class ScalingCurve:
    rows: tuple
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


# ---------------------------------------------------------------------------
# Scaling scans
# ---------------------------------------------------------------------------


def _scan_task(args):
    config, i, t = args
    n = config.n_grid[i]
    k = config.k_rule.k_for(n)
    return i, t, _trial_eval(
        config.dist, n, k, config.n_test, config.master_seed, i, t,
        resample=config.resample,
    )


def scaling_scan(config: ScanConfig) -> ScalingCurve:
    """Run the full (n, trial) grid and aggregate one row per n."""
    config.validate()
    n_sizes = len(config.n_grid)
    errors = np.empty((n_sizes, config.trials))
    excesses = np.empty((n_sizes, config.trials))
    tasks = [(config, i, t) for i in range(n_sizes) for t in range(config.trials)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for i, t, (err, exc) in pool.map(_scan_task, tasks, chunksize=4):
                errors[i, t] = err
                excesses[i, t] = exc
    else:
        for task in tasks:
            i, t, (err, exc) = _scan_task(task)
            errors[i, t] = err
            excesses[i, t] = exc
    l_star = bayes_risk(config.dist)
    rows = []
    for i, n in enumerate(config.n_grid):
        k = config.k_rule.k_for(n)
        err = errors[i]
        exc = excesses[i]
        se = float(err.std(ddof=1) / math.sqrt(config.trials)) if config.trials > 1 else 0.0
        ese = float(exc.std(ddof=1) / math.sqrt(config.trials)) if config.trials > 1 else 0.0
        rows.append(
            CurveRow(
                n=int(n), k=int(k), trials=config.trials,
                mean_test_error=float(err.mean()), stderr=se,
                bayes_risk=l_star,
                mean_excess=float(exc.mean()), excess_stderr=ese,
            )
        )
    meta = {
        "preset": config.dist.name,
        "k_rule": config.k_rule.label(),
        "trials": str(config.trials),
        "n_test": str(config.n_test),
        "master_seed": str(config.master_seed),
        "resample": str(config.resample or "none"),
        "test_points": "fresh per trial",
    }
    return ScalingCurve(rows=tuple(rows), meta=meta)


CURVE_COLUMNS = (
    "n,k,trials,mean_test_error,stderr,bayes_risk,mean_excess,excess_stderr"
)


def save_curve_csv(curve: ScalingCurve, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for key in sorted(curve.meta):
            fh.write(f"# {key}: {curve.meta[key]}\n")
        fh.write(CURVE_COLUMNS + "\n")
        for r in curve.rows:
            fh.write(
                f"{r.n},{r.k},{r.trials},{r.mean_test_error!r},{r.stderr!r},"
                f"{r.bayes_risk!r},{r.mean_excess!r},{r.excess_stderr!r}\n"
            )


def load_curve_csv(path) -> ScalingCurve:
    meta = {}
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
                continue
            if line.startswith("n,"):
                continue
            parts = line.split(",")
            rows.append(
                CurveRow(
                    n=int(parts[0]), k=int(parts[1]), trials=int(parts[2]),
                    mean_test_error=float(parts[3]), stderr=float(parts[4]),
                    bayes_risk=float(parts[5]), mean_excess=float(parts[6]),
                    excess_stderr=float(parts[7]),
                )
            )
    return ScalingCurve(rows=tuple(rows), meta=meta)


# ---------------------------------------------------------------------------
# Slope estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    n_used: int
    n_excluded: int


def slope_fit(curve: ScalingCurve, n_min: int, n_max: int) -> SlopeFit:
    """OLS slope of log(excess) on log(n) over rows with positive excess."""
    sel = [
        r for r in curve.rows
        if n_min <= r.n <= n_max
    ]
    usable = [r for r in sel if r.mean_excess > 0]
    excluded = len(sel) - len(usable)
    if len(usable) < 3:
        raise InsufficientDataError(
            f"need >= 3 rows with positive excess in [{n_min}, {n_max}], "
            f"have {len(usable)}"
        )
    lx = np.log([r.n for r in usable])
    ly = np.log([r.mean_excess for r in usable])
    m = lx.size
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    slope = float(np.sum((lx - lx.mean()) * (ly - ly.mean())) / sxx)
    resid = ly - (ly.mean() + slope * (lx - lx.mean()))
    var = float(np.sum(resid**2) / (m - 2)) if m > 2 else 0.0
    return SlopeFit(
        slope=slope,
        stderr=math.sqrt(var / sxx),
        n_used=m,
        n_excluded=excluded,
    )


# ---------------------------------------------------------------------------
# Signal-plane maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TauMapCell:
    s0: float
    s1: float
    theta: int
    tau: float
    sd_holds: bool
    region: str


def map_probes(dist: ProductDistribution, nx: int, ny: int) -> np.ndarray:
    """Cell centers of an nx-by-ny lattice over the signal rectangle."""
    centers, _ = signal_grid_centers(dist, nx, ny)
    return centers


def tau_map(
    dist: ProductDistribution,
    nx: int,
    ny: int,
    tau_threshold: float,
    radius_grid_size: int = 64,
    n_mc: int = 40_000,
    seed: int = 0,
) -> list:
    """Classify every lattice cell of the signal plane (probe noise = 0).

    Region rules match ``classify_point``: positive needs the margin and a
    dominance verdict of holds; negative needs only the margin.  Presets with
    polygonal conditionals get exact dominance verdicts; the rest share one
    pooled Monte Carlo sample.
    """
    if tau_threshold <= 0:
        raise ConfigError("tau threshold must be positive")
    probes = map_probes(dist, nx, ny)
    theta, tau = tau_margin_grid(dist, probes)
    radii = dominance_radius_grid(dist, radius_grid_size)
    exact = signal_distance_cdfs_exact(dist, probes, radii)
    if exact is not None:
        f0, f1 = exact
        slack, method = 1e-9, "exact"
    else:
        f0, f1 = signal_distance_cdfs_mc(dist, probes, radii, n_mc, seed)
        slack, method = 4.0 / math.sqrt(n_mc), "monte_carlo"
    cells = []
    for i in range(probes.shape[0]):
        same, other = (f1[i], f0[i]) if theta[i] == 1 else (f0[i], f1[i])
        if tau[i] >= tau_threshold:
            verdict = _verdict_from_cdfs(same, other, radii, slack, method)
            region = "positive" if verdict.holds else "neither"
            holds = verdict.holds
        elif tau[i] <= -tau_threshold:
            region = "negative"
            holds = False
        else:
            region = "neither"
            holds = False
        cells.append(
            TauMapCell(
                s0=float(probes[i, 0]), s1=float(probes[i, 1]),
                theta=int(theta[i]), tau=float(tau[i]),
                sd_holds=bool(holds), region=region,
            )
        )
    return cells


def save_tau_map_csv(cells, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("s0,s1,theta,tau,sd_holds,region\n")
        for c in cells:
            fh.write(
                f"{c.s0!r},{c.s1!r},{c.theta},{c.tau!r},"
                f"{int(c.sd_holds)},{c.region}\n"
            )


@dataclass(frozen=True)
class PredMapCell:
    s0: float
    s1: float
    prediction: int
    bayes: int
    agree: bool


def prediction_map(
    dist: ProductDistribution,
    n: int,
    k: int,
    seed: int,
    nx: int,
    ny: int,
) -> list:
    """Train once and predict on the signal-plane lattice (probe noise = 0)."""
    train = sample(dist, n, _derived(seed, STREAM_SAMPLE, 0, 0))
    model = fit(train)
    probes = map_probes(dist, nx, ny)
    queries = np.zeros((probes.shape[0], dist.d))
    queries[:, : dist.signal.d_s] = probes
    preds = predict_batch(model, queries, min(k, train.n))
    eta = dist.signal.eta(probes)
    bayes = (eta >= 0.5).astype(np.int8)
    return [
        PredMapCell(
            s0=float(probes[i, 0]), s1=float(probes[i, 1]),
            prediction=int(preds[i]), bayes=int(bayes[i]),
            agree=bool(preds[i] == bayes[i]),
        )
        for i in range(probes.shape[0])
    ]


def save_pred_map_csv(cells, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("s0,s1,prediction,bayes,agree\n")
        for c in cells:
            fh.write(
                f"{c.s0!r},{c.s1!r},{c.prediction},{c.bayes},{int(c.agree)}\n"
            )


# ---------------------------------------------------------------------------
# Bound overlays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoremParams:
    tau: float = 1.0
    c_fast: float = 1.0
    gamma: float = 0.125
    beta: float = 1.0
    beta_prime: float = 1.0
    M: float = 1.0
    c_slow: float = 1.0
    d: int = 10


def bound_overlay(curve: ScalingCurve, params: TheoremParams):
    """Per-row (fast_rate, slow_rate) bound columns for the curve's (n, k)."""
    out = []
    for r in curve.rows:
        fast = _bounds.fast_rate_bound(r.k, params.d, params.tau, params.c_fast)
        slow = _bounds.slow_rate_bound(
            r.n, params.d, params.gamma, params.beta,
            params.beta_prime, params.M, params.c_slow,
        )
        out.append((r.n, r.k, fast, slow))
    return out


def save_overlay_csv(curve: ScalingCurve, params: TheoremParams, path) -> None:
    overlay = bound_overlay(curve, params)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CURVE_COLUMNS + ",fast_rate_bound,slow_rate_bound\n")
        for r, (_, _, fast, slow) in zip(curve.rows, overlay):
            fh.write(
                f"{r.n},{r.k},{r.trials},{r.mean_test_error!r},{r.stderr!r},"
                f"{r.bayes_risk!r},{r.mean_excess!r},{r.excess_stderr!r},"
                f"{fast!r},{slow!r}\n"
            )


def fit_envelope_constant(curve: ScalingCurve, d: int, tau: float) -> float:
    """Largest c with 2e^{-k/6} + e^{-c tau^2 k / d} >= excess on every row.

    Rows already below the 2e^{-k/6} floor put no constraint (the bound
    envelopes them for any c); returns +inf when no row constrains c.
    """
    c_best = math.inf
    for r in curve.rows:
        gap = r.mean_excess - 2.0 * math.exp(-r.k / 6.0)
        if gap <= 0:
            continue
        if gap >= 1.0:
            return 0.0
        c_row = -math.log(gap) * d / (tau * tau * r.k)
        c_best = min(c_best, c_row)
    return c_best


# ---------------------------------------------------------------------------
# Companion plot script
# ---------------------------------------------------------------------------

_PLOT_TEMPLATE = '''#!/usr/bin/env python3
"""Log-log learning-curve plot for {csv_name} (emitted alongside the scan)."""
import csv
import matplotlib.pyplot as plt

ns, excess, err = [], [], []
with open("{csv_name}") as fh:
    for row in csv.DictReader(r for r in fh if not r.startswith("#")):
        ns.append(int(row["n"]))
        excess.append(float(row["mean_excess"]))
        err.append(float(row["excess_stderr"]))

fig, ax = plt.subplots(figsize=(5, 4))
ax.errorbar(ns, excess, yerr=err, marker="o", capsize=3)
ax.set_xscale("log", base=2)
ax.set_yscale("log")
ax.set_xlabel("training size n")
ax.set_ylabel("excess risk")
ax.grid(True, which="both", alpha=0.3)
fig.tight_layout()
fig.savefig("{csv_name}.png", dpi=150)
print("wrote {csv_name}.png")
'''


def emit_plot_script(csv_path) -> str:
    """Write a standalone plain-text plotting script next to a curve CSV."""
    csv_path = os.fspath(csv_path)
    script_path = csv_path + ".plot.py"
    with open(script_path, "w", encoding="ascii") as fh:
        fh.write(_PLOT_TEMPLATE.format(csv_name=os.path.basename(csv_path)))
    return script_path
