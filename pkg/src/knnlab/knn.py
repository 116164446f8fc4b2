"""Exact brute-force k-nearest-neighbor classification.

Distances are squared Euclidean internally (monotone equivalent); reported
radii are true distances.  Distance ties break by ascending training index,
and a vote tie at exactly k/2 predicts 1.  The search is a plain distance
scan with partial selection: exact, simple, and fast enough for the scales
this package targets (n <= 65536), where spatial trees lose to the curse of
dimension anyway.

A fitted model is read-only; concurrent queries are safe.  Trial-level Monte
Carlo uses one derived seed per trial and aggregates by trial index, so the
reduction is order-independent up to floating rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import Dataset, ProductDistribution, bayes_at, eta_at, sample
from .errors import DegenerateClassError
from .rng import STREAM_RESAMPLE, STREAM_SAMPLE, STREAM_TEST, spawn_generator

_CHUNK_ROWS = 256


@dataclass(frozen=True)
class KnnModel:
    data: Dataset


def fit(data: Dataset) -> KnnModel:
    return KnnModel(data)


def _check_query(model: KnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.data.d,):
        raise ValueError(f"query must have dimension {model.data.d}")
    return x


def _sq_dists(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    diff = points - x
    return np.einsum("ij,ij->i", diff, diff)


def _k_smallest(sq: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest by (distance, index), ascending."""
    n = sq.shape[0]
    if k == n:
        cand = np.arange(n)
    else:
        # partial selection by value, then resolve the boundary tie group
        # by ascending index so the documented tie policy holds exactly
        part = np.argpartition(sq, k - 1)
        kth = sq[part[k - 1]]
        strict = np.flatnonzero(sq < kth)
        tied = np.flatnonzero(sq == kth)
        cand = np.concatenate([strict, tied[: k - strict.size]])
    order = np.lexsort((cand, sq[cand]))
    return cand[order][:k]


def neighbor_indices(model: KnnModel, x: np.ndarray, k: int) -> np.ndarray:
    """The k nearest training indices, sorted by distance then by index."""
    x = _check_query(model, x)
    n = model.data.n
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    return _k_smallest(_sq_dists(model.data.points, x), k)


def neighbor_radius(model: KnnModel, x: np.ndarray, k: int) -> float:
    """Distance to the k-th nearest training point; k = n+1 gives +inf."""
    x = _check_query(model, x)
    n = model.data.n
    if not 1 <= k <= n + 1:
        raise ValueError(f"k must lie in [1, {n + 1}]")
    if k == n + 1:
        return math.inf
    sq = _sq_dists(model.data.points, x)
    return float(math.sqrt(np.partition(sq, k - 1)[k - 1]))


def predict(model: KnnModel, x: np.ndarray, k: int) -> int:
    """Vote of the k nearest labels: 1 iff their sum is >= k/2."""
    idx = neighbor_indices(model, x, k)
    return int(2 * int(model.data.labels[idx].sum()) >= k)


def predict_batch(model: KnnModel, queries: np.ndarray, k: int) -> np.ndarray:
    """Vectorized ``predict`` over rows of ``queries``."""
    queries = np.asarray(queries, dtype=float)
    if queries.ndim != 2 or queries.shape[1] != model.data.d:
        raise ValueError(f"queries must be (m, {model.data.d})")
    n = model.data.n
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    points = model.data.points
    labels = model.data.labels.astype(np.int64)
    sq_norms = np.einsum("ij,ij->i", points, points)
    out = np.empty(queries.shape[0], dtype=np.int8)
    for lo in range(0, queries.shape[0], _CHUNK_ROWS):
        q = queries[lo : lo + _CHUNK_ROWS]
        sq = sq_norms[None, :] - 2.0 * (q @ points.T)
        # row-wise constant ||q||^2 omitted: it does not affect the order
        if k == n:
            votes = np.full(q.shape[0], labels.sum())
        else:
            part = np.argpartition(sq, k - 1, axis=1)[:, :k]
            votes = labels[part].sum(axis=1)
            kth = np.take_along_axis(sq, part[:, k - 1 : k], axis=1)
            # exact tie handling only where the boundary value is ambiguous
            ambiguous = np.flatnonzero((sq == kth).sum(axis=1) > 1)
            for r in ambiguous:
                row = sq[r]
                v = kth[r, 0]
                strict = np.flatnonzero(row < v)
                tied = np.flatnonzero(row == v)
                take = k - strict.size
                votes[r] = labels[strict].sum() + labels[tied[:take]].sum()
        out[lo : lo + _CHUNK_ROWS] = (2 * votes >= k).astype(np.int8)
    return out


def resample_balance(data: Dataset, mode: str, seed: int) -> Dataset:
    """Equalize class counts by under- or over-sampling.

    ``undersample`` keeps every rare-class row and a without-replacement draw
    of the abundant class; ``oversample`` keeps every row and appends
    with-replacement draws of the rare class.  A balanced input comes back
    unchanged.
    """
    if mode not in ("undersample", "oversample"):
        raise ValueError(f"unknown resample mode {mode!r}")
    n0, n1 = data.class_counts()
    if n0 == 0 or n1 == 0:
        raise DegenerateClassError("resampling needs both classes present")
    if n0 == n1:
        return data
    rng = spawn_generator(seed, STREAM_RESAMPLE)
    idx0 = np.flatnonzero(data.labels == 0)
    idx1 = np.flatnonzero(data.labels == 1)
    abundant, rare = (idx0, idx1) if n0 > n1 else (idx1, idx0)
    if mode == "undersample":
        kept = rng.choice(abundant, size=rare.size, replace=False)
        keep = np.zeros(data.n, dtype=bool)
        keep[rare] = True
        keep[kept] = True
        sel = np.flatnonzero(keep)
    else:
        extra = rng.choice(rare, size=abundant.size - rare.size, replace=True)
        sel = np.concatenate([np.arange(data.n), extra])
    return Dataset(data.points[sel], data.labels[sel])


def test_error(model: KnnModel, k: int, test: Dataset) -> float:
    """Fraction of test rows the k-NN vote mislabels."""
    pred = predict_batch(model, test.points, k)
    return float(np.mean(pred != test.labels))


def _trial_eval(
    dist: ProductDistribution,
    n: int,
    k: int,
    n_test: int,
    seed: int,
    n_index: int,
    trial: int,
    resample: str | None = None,
) -> tuple[float, float]:
    """(test error, conditional excess estimate) for one fresh train/test pair.

    The excess estimate averages |2 eta - 1| 1{prediction != bayes} over fresh
    test points: exact for realizable presets and lower-variance in general.
    """
    train = sample(dist, n, _derived(seed, STREAM_SAMPLE, n_index, trial))
    if resample:
        train = resample_balance(
            train, resample, _derived(seed, STREAM_RESAMPLE, n_index, trial)
        )
    k_eff = min(k, train.n)
    model = fit(train)
    test = sample(dist, n_test, _derived(seed, STREAM_TEST, n_index, trial))
    pred = predict_batch(model, test.points, k_eff)
    err = float(np.mean(pred != test.labels))
    e = eta_at(dist, test.points)
    mismatch = pred != bayes_at(dist, test.points)
    excess = float(np.mean(np.abs(2.0 * e - 1.0) * mismatch))
    return err, excess


def _derived(seed: int, domain: int, n_index: int, trial: int) -> int:
    """Fold (domain, n_index, trial) into a sub-seed for ``sample``'s stream."""
    g = spawn_generator(seed, domain, n_index, trial)
    return int(g.integers(0, 2**63 - 1))


def excess_risk_mc(
    dist: ProductDistribution,
    n: int,
    k: int,
    n_test: int,
    trials: int,
    seed: int,
) -> tuple[float, float]:
    """Across-trial mean and standard error of the conditional excess risk."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    vals = np.empty(trials)
    for t in range(trials):
        _, vals[t] = _trial_eval(dist, n, k, n_test, seed, 0, t)
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, se
