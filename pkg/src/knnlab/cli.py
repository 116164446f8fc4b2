"""Single entry point: experiments and diagnostics behind subcommands.

Configuration is flat key = value text, accepted both as command-line flags
and as a --config file, flags winning.  Every run writes a ``manifest.txt``
into its output directory that echoes the fully-resolved configuration plus
the artifact version; the manifest itself is a valid --config file, so a run
can be replayed bit-for-bit.  Output goes only under the output directory
(flag --out, else the KNNLAB_OUTPUT_DIR environment variable, else ./runs).

Exit codes: 0 ok, 2 config error, 3 data-file error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, bounds, experiments, ingest
from . import distributions as dists
from . import dominance
from .errors import ConfigError, DataFileError, KnnLabError, NumericError
from .knn import fit, predict_batch, test_error
from .rng import STREAM_MC, STREAM_SAMPLE, STREAM_TEST, spawn_generator

OUTPUT_ENV_VAR = "KNNLAB_OUTPUT_DIR"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_META_KEYS = ("subcommand", "artifact_version")

# option name -> (type, default, help); shared across flag and config parsing
_COMMON = {
    "out": (str, None, "output directory (overrides KNNLAB_OUTPUT_DIR)"),
    "seed": (int, 1, "master seed"),
    "threads": (int, 0, "worker processes for scans (0 = serial)"),
}

_PRESET = {
    "preset": (str, "aligned", "aligned|rotated|ramp|ellipse|unbalanced"),
    "a": (float, 2.0, "rectangle half-width"),
    "b": (float, 0.5, "rectangle half-height"),
    "d": (int, 10, "total dimension"),
    "slope": (float, 0.5, "rotated-boundary slope"),
}

_SPECS = {
    "scan": {
        **_COMMON,
        **_PRESET,
        "n_grid": (str, "128,256,512,1024", "comma list of training sizes"),
        "k_rule": (str, "affine", "affine | floor_frac:F | fixed:K"),
        "trials": (int, 20, "independent repetitions per n"),
        "n_test": (int, 2000, "fresh test points per trial"),
        "resample": (str, "none", "none|undersample|oversample"),
    },
    "tau-map": {
        **_COMMON,
        **_PRESET,
        "nx": (int, 80, "signal-plane cells along the first coordinate"),
        "ny": (int, 40, "cells along the second coordinate"),
        "tau_threshold": (float, 0.5, "margin threshold for the regions"),
        "radius_grid": (int, 64, "dominance radius grid size"),
        "n_mc": (int, 40000, "Monte Carlo sample per class (non-polygon presets)"),
    },
    "pred-map": {
        **_COMMON,
        **_PRESET,
        "n": (int, 5000, "training size"),
        "k": (int, 52, "number of neighbors"),
        "nx": (int, 80, "cells along the first coordinate"),
        "ny": (int, 40, "cells along the second coordinate"),
    },
    "diagnose": {
        **_COMMON,
        **_PRESET,
        "point": (str, "0.5,0.0", "comma list; padded with zeros to dimension d"),
        "tau_threshold": (float, 0.5, "margin threshold"),
        "radius_grid": (int, 64, "dominance radius grid size"),
        "n_mc": (int, 100000, "Monte Carlo sample per class"),
    },
    "bounds": {
        **_COMMON,
        **_PRESET,
        "n": (int, 200, "training size per trial"),
        "k": (int, 20, "number of neighbors"),
        "trials": (int, 2000, "training resamples per point"),
        "points": (int, 10, "random test points"),
    },
    "gauss-check": {
        **_COMMON,
        "d_n_list": (str, "8,32,128,512", "noise dimensions for the CDF gap"),
        "n_samples": (int, 200000, "samples per gap estimate"),
        "halfwidths": (str, "0.5,1,2", "uniform halfwidths for the variance floor"),
    },
    "ingest-scan": {
        **_COMMON,
        "images": (str, None, "IDX image file (training)"),
        "labels": (str, None, "IDX label file (training)"),
        "test_images": (str, "", "IDX image file (held-out; optional)"),
        "test_labels": (str, "", "IDX label file (held-out; optional)"),
        "classes": (str, "0,1", "the two digit classes A,B"),
        "n_grid": (str, "500,2000,8000", "comma list of training sizes"),
        "k_rule": (str, "affine", "affine | floor_frac:F | fixed:K"),
        "trials": (int, 5, "repetitions per n"),
        "n_test": (int, 2000, "test points per trial"),
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knnlab",
        description="nearest-neighbor scaling-law laboratory",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, spec in _SPECS.items():
        sp = subs.add_parser(name)
        sp.add_argument("--config", type=str, default=None,
                        help="flat key = value config file (flags win)")
        for key, (typ, _default, help_text) in spec.items():
            # default None so explicit flags are distinguishable from absent
            sp.add_argument(_flag(key), type=typ, default=None, help=help_text)
    return parser


def parse_config_file(path: str, spec: dict) -> dict:
    """Read flat key = value lines; unknown keys name the offending line."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key in _META_KEYS:
            values[key] = val
            continue
        if key not in spec:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        typ = spec[key][0]
        try:
            values[key] = typ(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    return values


def resolve_options(subcommand: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; returns the full key map."""
    spec = _SPECS[subcommand]
    resolved = {key: default for key, (_t, default, _h) in spec.items()}
    if args.config:
        file_values = parse_config_file(args.config, spec)
        if "subcommand" in file_values and file_values["subcommand"] != subcommand:
            raise ConfigError(
                f"config file is for {file_values['subcommand']!r}, "
                f"not {subcommand!r}"
            )
        for key, val in file_values.items():
            if key not in _META_KEYS:
                resolved[key] = val
    for key in spec:
        flag_val = getattr(args, key)
        if flag_val is not None:
            resolved[key] = flag_val
    if resolved.get("out") is None:
        resolved["out"] = os.environ.get(
            OUTPUT_ENV_VAR, os.path.join("runs", subcommand)
        )
    return resolved


def write_manifest(out_dir: Path, subcommand: str, options: dict) -> None:
    lines = [f"subcommand = {subcommand}", f"artifact_version = {__version__}"]
    for key in sorted(options):
        lines.append(f"{key} = {options[key]}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="ascii")


def _parse_int_list(text: str, what: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad {what} list: {text!r}") from exc
    if not values:
        raise ConfigError(f"{what} list is empty")
    return values


def _parse_float_list(text: str, what: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad {what} list: {text!r}") from exc


def build_preset(options: dict) -> dists.ProductDistribution:
    name = options["preset"]
    a, b, d = options["a"], options["b"], options["d"]
    try:
        if name == "aligned":
            return dists.make_aligned(a, b, d)
        if name == "rotated":
            return dists.make_rotated(a, b, d, options.get("slope", 0.5))
        if name == "ramp":
            return dists.make_ramp(a, b, d)
        if name == "ellipse":
            return dists.make_ellipse(a, b, d)
        if name == "unbalanced":
            return dists.make_unbalanced(d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown preset {name!r}")


def _point_from_text(text: str, d: int) -> np.ndarray:
    vals = _parse_float_list(text, "point")
    if len(vals) > d:
        raise ConfigError(f"point has {len(vals)} coordinates, dimension is {d}")
    x = np.zeros(d)
    x[: len(vals)] = vals
    return x


# ---------------------------------------------------------------------------
# Subcommand bodies (each returns the list of files it wrote)
# ---------------------------------------------------------------------------


def run_scan(options: dict, out: Path) -> list:
    dist = build_preset(options)
    config = experiments.ScanConfig(
        dist=dist,
        n_grid=_parse_int_list(options["n_grid"], "n grid"),
        k_rule=experiments.parse_k_rule(options["k_rule"]),
        trials=options["trials"],
        n_test=options["n_test"],
        master_seed=options["seed"],
        resample=None if options["resample"] == "none" else options["resample"],
        workers=options["threads"],
    )
    curve = experiments.scaling_scan(config)
    csv_path = out / "curve.csv"
    experiments.save_curve_csv(curve, csv_path)
    plot = experiments.emit_plot_script(csv_path)
    return [csv_path, Path(plot)]


def run_tau_map(options: dict, out: Path) -> list:
    dist = build_preset(options)
    cells = experiments.tau_map(
        dist,
        options["nx"],
        options["ny"],
        tau_threshold=options["tau_threshold"],
        radius_grid_size=options["radius_grid"],
        n_mc=options["n_mc"],
        seed=options["seed"],
    )
    path = out / "tau_map.csv"
    experiments.save_tau_map_csv(cells, path)
    return [path]


def run_pred_map(options: dict, out: Path) -> list:
    dist = build_preset(options)
    cells = experiments.prediction_map(
        dist, options["n"], options["k"], options["seed"],
        options["nx"], options["ny"],
    )
    path = out / "pred_map.csv"
    experiments.save_pred_map_csv(cells, path)
    return [path]


def run_diagnose(options: dict, out: Path) -> list:
    dist = build_preset(options)
    x = _point_from_text(options["point"], dist.d)
    report = dominance.classify_point(
        dist, x,
        tau_threshold=options["tau_threshold"],
        radius_grid_size=options["radius_grid"],
        n_mc=options["n_mc"],
        seed=options["seed"],
    )
    print(
        f"point={options['point']} theta={report.theta} "
        f"tau={report.tau:.6g} sd={report.sd_verdict.status} "
        f"region={report.region}"
    )
    path = out / "diagnose.csv"
    with open(path, "w", encoding="ascii") as fh:
        fh.write("s0,s1,theta,tau,sd_status,max_violation,region,tau_threshold\n")
        v = report.sd_verdict
        fh.write(
            f"{x[0]!r},{x[1]!r},{report.theta},{report.tau!r},{v.status},"
            f"{v.max_violation!r},{report.region},{report.tau_threshold!r}\n"
        )
    return [path]


def _battery_rows_for_point(dist, x, options, seed):
    n, k, trials = options["n"], options["k"], options["trials"]
    bat = bounds.point_trial_battery(dist, x, n, k, trials, seed)
    emp = float(np.mean(bat.preds != bat.theta))
    emp_se = math.sqrt(max(emp * (1.0 - emp), 1e-12) / trials)
    vote = bounds.bound_pair_from_t(bat.t_values, k, bat.failures)
    half = bounds.half_pair_from_t(bat.t_values, bat.failures)
    v, vse = (vote.bound0, vote.se0) if bat.theta == 1 else (vote.bound1, vote.se1)
    h, hse = (half.bound0, half.se0) if bat.theta == 1 else (half.bound1, half.se1)
    atom = 0.0
    if k % 2 == 0:
        atom = 0.5 * math.comb(k, k // 2) / 2.0**k
    params = f"x0={x[0]:.4g};theta={bat.theta};n={n};k={k};failures={bat.failures}"
    vote_slack = 3.0 * math.sqrt(emp_se**2 + vse**2)
    half_slack = 3.0 * math.sqrt(emp_se**2 + hse**2) + atom
    return [
        ("vote_bound_dominates", params, emp, v, vote_slack, emp <= v + vote_slack),
        ("half_bound_dominates", params, emp, h, half_slack, emp <= h + half_slack),
    ]


def run_bounds(options: dict, out: Path) -> list:
    dist = build_preset(options)
    rows = []
    test = dists.sample(dist, options["points"], options["seed"])
    for i, x in enumerate(test.points):
        rows.extend(_battery_rows_for_point(dist, x, options, options["seed"] + i))
    # binomial Monte Carlo check of the closed-form vote bound
    rng = spawn_generator(options["seed"], STREAM_MC)
    for rho in (2.0, 4.0, 9.0):
        for k in (5, 10, 50):
            p = rho / (1.0 + rho)
            draws = rng.binomial(k, p, size=1_000_000)
            emp = float(np.mean(draws < k / 2.0))
            bound = bounds.chernoff_vote_bound(rho, k)
            se = math.sqrt(max(emp * (1 - emp), 1e-12) / 1_000_000)
            rows.append(
                ("chernoff_vote_bound", f"rho={rho};k={k}", emp, bound,
                 3.0 * se, emp <= bound + 3.0 * se)
            )
    path = out / "bounds_battery.csv"
    _write_battery(path, rows)
    return [path]


def _write_battery(path: Path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("name,params,empirical,bound,slack,pass\n")
        for name, params, emp, bound, slack, ok in rows:
            fh.write(f"{name},{params},{emp!r},{bound!r},{slack!r},{int(ok)}\n")


def run_gauss_check(options: dict, out: Path) -> list:
    rows = []
    d_n_list = _parse_int_list(options["d_n_list"], "d_n")
    gaps = []
    for d_n in d_n_list:
        noise = dists.NoiseSpec(d_n=d_n, family="standard_normal")
        rep = bounds.berry_esseen_gap(
            noise, np.zeros(d_n), options["n_samples"], options["seed"]
        )
        gaps.append(rep.cdf_gap * math.sqrt(d_n))
        rows.append(
            ("cdf_gap", f"d_n={d_n}", rep.cdf_gap, math.nan, math.nan, True)
        )
        rows.append(
            ("pdf_gap", f"d_n={d_n};bin={rep.bin_width:.4g}", rep.pdf_gap,
             math.nan, math.nan, True)
        )
    ratio = max(gaps) / min(gaps)
    rows.append(("cdf_gap_sqrt_ratio", "max/min over d_n list", ratio, 3.0,
                 0.0, ratio <= 3.0))
    # log-derivative window and normalization checks
    worst = 0.0
    for d_n in (8, 16, 32):
        for lam in (0.0, 2.0, 8.0):
            mu, var = bounds.ncx2_mean_var(d_n, lam)
            ts = mu + var * np.linspace(-0.1, 0.1, 41)
            vals = [
                abs(bounds.noncentral_chi2_logderiv(d_n, lam, float(t)))
                for t in ts if t > 0
            ]
            worst = max(worst, max(vals))
            rows.append(
                (
                    "logderiv_window_max", f"d_n={d_n};lam={lam}",
                    max(vals), 2.0, 0.0, max(vals) <= 2.0,
                )
            )
    from scipy import integrate
    from .chisq import ncx2_pdf

    for d_n, lam in ((8, 2.0), (16, 4.0)):
        mu, var = bounds.ncx2_mean_var(d_n, lam)
        hi = mu + 40.0 * math.sqrt(var)
        total, _ = integrate.quad(
            lambda t: float(ncx2_pdf(t, d_n, lam)), 0.0, hi, limit=200
        )
        err = abs(total - 1.0)
        rows.append(
            ("density_normalization", f"d_n={d_n};lam={lam}", err, 1e-8,
             0.0, err <= 1e-8)
        )
    # uniform variance floor
    for m in _parse_float_list(options["halfwidths"], "halfwidth"):
        closed = bounds.uniform_min_quadratic_variance(m)
        ident = 1.0 / (180.0 * (1.0 / (2.0 * m)) ** 4)
        rows.append(
            ("uniform_variance_floor_identity", f"M={m}",
             closed, ident, 1e-6, abs(closed - ident) <= 1e-6)
        )
        rng = spawn_generator(options["seed"], STREAM_MC, int(m * 1000))
        xs = rng.uniform(-m, m, 200_000)
        mq = bounds.min_quadratic_variance(xs)
        rel = abs(mq.grid_min - closed) / closed
        rows.append(
            ("uniform_variance_floor_grid", f"M={m}", mq.grid_min, closed,
             0.02, rel <= 0.02)
        )
    path = out / "gauss_check.csv"
    _write_battery(path, rows)
    return [path]


def run_ingest_scan(options: dict, out: Path) -> list:
    if not options["images"] or not options["labels"]:
        raise ConfigError("ingest-scan needs --images and --labels")
    class_a, class_b = _parse_int_list(options["classes"], "classes")[:2]
    images = ingest.read_idx(options["images"])
    labels = ingest.read_idx(options["labels"])
    pool = ingest.to_binary_dataset(images, labels, class_a, class_b)
    if options["test_images"] and options["test_labels"]:
        t_img = ingest.read_idx(options["test_images"])
        t_lab = ingest.read_idx(options["test_labels"])
        test_pool = ingest.to_binary_dataset(t_img, t_lab, class_a, class_b)
        train_pool = pool
    else:
        # carve a held-out block from the tail of a seeded shuffle
        rng = spawn_generator(options["seed"], STREAM_TEST)
        perm = rng.permutation(pool.n)
        n_hold = min(options["n_test"] * 2, pool.n // 4)
        test_pool = dists.Dataset(
            pool.points[perm[:n_hold]], pool.labels[perm[:n_hold]]
        )
        train_pool = dists.Dataset(
            pool.points[perm[n_hold:]], pool.labels[perm[n_hold:]]
        )
    n_grid = _parse_int_list(options["n_grid"], "n grid")
    k_rule = experiments.parse_k_rule(options["k_rule"])
    trials = options["trials"]
    rows = []
    for i, n in enumerate(n_grid):
        if n > train_pool.n:
            raise ConfigError(f"n={n} exceeds the {train_pool.n} pooled rows")
        k = k_rule.k_for(n)
        errs = np.empty(trials)
        for t in range(trials):
            rng = spawn_generator(options["seed"], STREAM_SAMPLE, i, t)
            idx = rng.choice(train_pool.n, size=n, replace=False)
            model = fit(dists.Dataset(train_pool.points[idx], train_pool.labels[idx]))
            tidx = rng.choice(
                test_pool.n, size=min(options["n_test"], test_pool.n), replace=False
            )
            errs[t] = test_error(
                model, k, dists.Dataset(test_pool.points[tidx], test_pool.labels[tidx])
            )
        se = float(errs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        rows.append((n, k, trials, float(errs.mean()), se))
    path = out / "real_curve.csv"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# classes: {class_a},{class_b}\n")
        fh.write("n,k,trials,mean_test_error,stderr\n")
        for n, k, tr, err, se in rows:
            fh.write(f"{n},{k},{tr},{err!r},{se!r}\n")
    return [path]


_RUNNERS = {
    "scan": run_scan,
    "tau-map": run_tau_map,
    "pred-map": run_pred_map,
    "diagnose": run_diagnose,
    "bounds": run_bounds,
    "gauss-check": run_gauss_check,
    "ingest-scan": run_ingest_scan,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = args.subcommand
    try:
        options = resolve_options(sub, args)
        out = Path(options["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, sub, options)
        written = _RUNNERS[sub](options, out)
        for path in written:
            print(f"wrote {path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFileError as exc:
        print(f"data-file error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KnnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
