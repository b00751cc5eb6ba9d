"""Command-line surface: simulation, fitting, reconstruction, tests,
cross-validation, and replicated summary tables.

File formats owned here:

- observations CSV: header ``loc_id,x,y,t,value``, one row per observation.
- truth/reconstruction CSV: header ``loc_id,x,y,v0..v{M-1}`` plus a JSON
  sidecar (``<path>.meta.json``) carrying the grid.
- model JSON: grid, mean, sigma2, eigenvalues, eigenfunctions, separable
  flag, correlation parameters (angles in degrees for reporting, radians
  kept alongside for exact round-trips), and provenance.

Exit codes: 0 success, 2 usage, 3 data/schema problems, 4 numerical
failure. Every stochastic command takes a seed and reproduces its outputs
byte for byte.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import sys

import numpy as np

from .bootstrap_tests import (BootstrapTestConfig, Partition, isotropy_test,
                              separability_test)
from .data_model import (EvalGrid, FunctionalDataset, Location, Observation,
                         make_grid, validate_dataset)
from .eigen_analysis import EigenSystem
from .errors import InvalidArgumentError, SchemaError, SpaceFdaError
from .matern import MaternParams
from .model_selection import (best_bandwidth, errcv_curves, lobo_bandwidth,
                              select_k)
from .parallel import worker_count
from .pipeline import (DEFAULT_MEAN_CANDIDATES, DEFAULT_SURFACE_CANDIDATES,
                       PipelineConfig, fit_space_model, make_fit_closure,
                       select_bandwidths)
from .reconstruction import (SpaceModel, blup_scores, pointwise_interval,
                             reconstruct, simultaneous_band)
from .sim_engine import (SCENARIO_NAMES, improvement, pace_baseline,
                         preset_scenario, run_table, simulate)
from .smoothing import raw_cross_covariances, smooth_mean, SmootherConfig


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_observations_csv(path, dataset: FunctionalDataset) -> None:
    coords = {loc.id: (loc.x, loc.y) for loc in dataset.locations}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loc_id", "x", "y", "t", "value"])
        for obs in dataset.observations:
            x, y = coords[obs.location_id]
            writer.writerow([obs.location_id, repr(float(x)), repr(float(y)),
                             repr(float(obs.t)), repr(float(obs.y))])


def read_observations_csv(path, time_domain=(0.0, 1.0)) -> FunctionalDataset:
    locations: dict[int, Location] = {}
    observations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["loc_id", "x", "y", "t", "value"]:
            raise SchemaError(f"{path}: expected header loc_id,x,y,t,value, "
                              f"got {header}")
        for k, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise SchemaError(f"{path}: line {k}: expected 5 fields, "
                                  f"got {len(row)}")
            try:
                loc_id = int(row[0])
                x, y, t, value = (float(v) for v in row[1:])
            except ValueError as exc:
                raise SchemaError(f"{path}: line {k}: {exc}")
            if loc_id not in locations:
                locations[loc_id] = Location(loc_id, x, y)
            observations.append(Observation(loc_id, t, value))
    data = FunctionalDataset(list(locations.values()), observations,
                             time_domain)
    problems = validate_dataset(data)
    if problems:
        raise SchemaError(f"{path}: {problems[0]}")
    return data


def write_matrix_csv(path, locations, values: np.ndarray,
                     grid: EvalGrid) -> None:
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loc_id", "x", "y"]
                        + [f"v{j}" for j in range(values.shape[1])])
        for loc, row in zip(locations, values):
            writer.writerow([loc.id, repr(float(loc.x)), repr(float(loc.y))]
                            + [repr(float(v)) for v in row])
    meta = {"t_min": grid.t_min, "t_max": grid.t_max, "m": grid.m,
            "points": [float(p) for p in grid.points]}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["loc_id", "x", "y"]:
            raise SchemaError(f"{path}: expected header loc_id,x,y,v0..")
        width = len(header)
        ids, coords, rows = [], [], []
        for k, row in enumerate(reader, start=2):
            if len(row) != width:
                raise SchemaError(f"{path}: line {k}: expected {width} fields,"
                                  f" got {len(row)}")
            try:
                ids.append(int(row[0]))
                coords.append((float(row[1]), float(row[2])))
                rows.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise SchemaError(f"{path}: line {k}: {exc}")
    return ids, coords, np.array(rows, dtype=float)


def model_to_dict(model: SpaceModel, seed, config_hash: str) -> dict:
    eigen = model.eigen
    return {
        "grid": {"t_min": eigen.grid.t_min, "t_max": eigen.grid.t_max,
                 "m": eigen.grid.m},
        "mean": [float(v) for v in eigen.mean],
        "sigma2": float(eigen.sigma2),
        "eigenvalues": [float(v) for v in eigen.eigenvalues],
        "eigenfunctions": [[float(v) for v in row]
                           for row in eigen.eigenfunctions],
        "separable": bool(model.separable),
        "matern": [{"alpha_deg": math.degrees(p.alpha), "alpha": p.alpha,
                    "delta": p.delta, "zeta": p.zeta, "nu": p.nu}
                   for p in model.matern],
        "provenance": {"seed": seed, "config_hash": config_hash},
    }


def save_model(path, model: SpaceModel, seed=None, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, seed, config_hash), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SpaceModel:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}")
    try:
        grid = make_grid((raw["grid"]["t_min"], raw["grid"]["t_max"]),
                         raw["grid"]["m"])
        eigen = EigenSystem(grid=grid, mean=np.array(raw["mean"]),
                            eigenfunctions=np.array(raw["eigenfunctions"]),
                            eigenvalues=np.array(raw["eigenvalues"]),
                            sigma2=float(raw["sigma2"]))
        matern = tuple(
            MaternParams(alpha=float(p.get("alpha",
                                           math.radians(p["alpha_deg"]))),
                         delta=float(p["delta"]), zeta=float(p["zeta"]),
                         nu=float(p["nu"]))
            for p in raw["matern"])
        return SpaceModel(eigen=eigen, matern=matern,
                          separable=bool(raw["separable"]))
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise SchemaError(f"{path}: malformed model file: {exc}")


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

_UNHASHED_KEYS = ("func", "config", "observations", "model", "truth",
                  "out", "out_model", "out_observations", "out_truth")


def _hash_args(args: argparse.Namespace) -> str:
    """Hash of the analysis parameters (paths excluded) for provenance."""
    payload = {k: v for k, v in sorted(vars(args).items())
               if k not in _UNHASHED_KEYS}
    return hashlib.sha256(repr(payload).encode()).hexdigest()[:16]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v != ""]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="INI file; section per command")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker cap (default: SPACE_FDA_THREADS or 1)")


def _add_fit_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--components", type=int, default=2)
    sub.add_argument("--bandwidth-mean", type=float, default=None)
    sub.add_argument("--bandwidth-surface", type=float, default=None)
    sub.add_argument("--grid-points", type=int, default=101)
    sub.add_argument("--max-ladder", type=int, default=20)
    sub.add_argument("--ball-radius", type=float, default=0.0)
    sub.add_argument("--separable", action="store_true")
    sub.add_argument("--isotropic", action="store_true")
    sub.add_argument("--trim", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="space-fda",
        description="Spatially correlated functional data analysis")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="generate a scenario dataset")
    sim.add_argument("--scenario", required=True,
                     help=f"one of {', '.join(SCENARIO_NAMES)}")
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--extent", type=int, default=None)
    sim.add_argument("--grid-points", type=int, default=101)
    sim.add_argument("--out-observations", required=True)
    sim.add_argument("--out-truth", default=None)
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)

    fit = commands.add_parser("fit", help="fit the model to observations")
    fit.add_argument("--observations", required=True)
    fit.add_argument("--out-model", required=True)
    fit.add_argument("--seed", type=int, default=None,
                     help="recorded in provenance")
    _add_fit_options(fit)
    _add_common(fit)
    fit.set_defaults(func=cmd_fit)

    rec = commands.add_parser("reconstruct", help="reconstruct trajectories")
    rec.add_argument("--model", required=True)
    rec.add_argument("--observations", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--level", type=float, default=None,
                     help="adds pointwise and simultaneous bounds")
    rec.add_argument("--baseline-pace", action="store_true",
                     help="also write the independence baseline")
    rec.add_argument("--truth", default=None,
                     help="truth CSV; adds the improvement metric")
    _add_common(rec)
    rec.set_defaults(func=cmd_reconstruct)

    tst = commands.add_parser("test", help="bootstrap hypothesis tests")
    tst.add_argument("--observations", required=True)
    tst.add_argument("--kind", choices=("separability", "isotropy"),
                     required=True)
    tst.add_argument("--components", type=int, default=2)
    tst.add_argument("--b", type=int, default=199)
    tst.add_argument("--seed", type=int, required=True)
    tst.add_argument("--levels", type=_float_list, default=[0.05])
    tst.add_argument("--bandwidth-mean", type=float, default=None)
    tst.add_argument("--bandwidth-surface", type=float, default=None)
    tst.add_argument("--grid-points", type=int, default=51)
    tst.add_argument("--max-ladder", type=int, default=3)
    tst.add_argument("--iso-groups", type=_int_list, default=[0])
    tst.add_argument("--statistic", default=None,
                     help="separability: correlation_rms (default), "
                          "zeta_absdiff, rho_absdiff, rho_diff; "
                          "isotropy: log_ratio (default) or angle")
    tst.add_argument("--out", required=True)
    _add_common(tst)
    tst.set_defaults(func=cmd_test)

    cv = commands.add_parser("cv", help="bandwidth and component selection")
    cv.add_argument("--observations", required=True)
    cv.add_argument("--out", required=True)
    cv.add_argument("--bandwidth-candidates", type=_float_list, default=None)
    cv.add_argument("--k-candidates", type=_int_list, default=[1, 2, 3, 4])
    cv.add_argument("--j-folds", type=int, default=5)
    cv.add_argument("--buffer", type=float, default=2.0)
    cv.add_argument("--bins", type=int, default=10)
    cv.add_argument("--grid-points", type=int, default=101)
    cv.add_argument("--max-ladder", type=int, default=3)
    cv.add_argument("--skip-errcv", action="store_true")
    _add_common(cv)
    cv.set_defaults(func=cmd_cv)

    tab = commands.add_parser("table", help="replicated scenario summaries")
    tab.add_argument("--scenarios", required=True,
                     help="comma-separated scenario names")
    tab.add_argument("--replicates", type=int, required=True)
    tab.add_argument("--seed", type=int, required=True)
    tab.add_argument("--extent", type=int, default=None)
    tab.add_argument("--max-ladder", type=int, default=20)
    tab.add_argument("--out", required=True)
    _add_common(tab)
    tab.set_defaults(func=cmd_table)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]):
    """Config-file values become defaults; explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv[1:] if argv else argv)
    if not argv or known.config is None:
        return
    ini = configparser.ConfigParser()
    read = ini.read(known.config)
    if not read:
        raise SchemaError(f"config file not found: {known.config}")
    command = argv[0]
    if not ini.has_section(command):
        return
    sub = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action.choices.get(command)
    if sub is None:
        return
    defaults = {}
    by_flag = {}
    for action in sub._actions:
        for opt in action.option_strings:
            by_flag[opt.lstrip("-")] = action
    for key, value in ini.items(command):
        action = by_flag.get(key) or by_flag.get(key.replace("_", "-"))
        if action is None:
            raise SchemaError(f"{known.config}: unknown key {key!r} "
                              f"in section [{command}]")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = ini.getboolean(command, key)
        elif action.type is not None:
            defaults[action.dest] = action.type(value)
        else:
            defaults[action.dest] = value
        action.required = False
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _pipeline_config_from(args) -> PipelineConfig:
    return PipelineConfig(
        n_components=args.components,
        bandwidth_mean=args.bandwidth_mean,
        bandwidth_surface=args.bandwidth_surface,
        grid_points=args.grid_points,
        max_ladder=args.max_ladder,
        ball_radius=args.ball_radius,
        separable=args.separable,
        force_isotropic=True if args.isotropic else None,
        trim=args.trim)


def cmd_simulate(args) -> int:
    scenario = preset_scenario(args.scenario, seed=args.seed,
                               grid=make_grid((0.0, 1.0), args.grid_points),
                               extent=args.extent)
    sim = simulate(scenario)
    write_observations_csv(args.out_observations, sim.dataset)
    if args.out_truth:
        write_matrix_csv(args.out_truth, sim.locations, sim.truth,
                         scenario.grid)
    print(f"scenario {scenario.name}: {sim.dataset.n_locations} locations x "
          f"{scenario.n_per_curve} observations, sigma {scenario.sigma}, "
          f"seed {args.seed}")
    print(f"observations -> {args.out_observations}")
    if args.out_truth:
        print(f"truth -> {args.out_truth}")
    return 0


def cmd_fit(args) -> int:
    data = read_observations_csv(args.observations)
    config = _pipeline_config_from(args)
    fit = fit_space_model(data, config)
    save_model(args.out_model, fit.model, seed=args.seed,
               config_hash=_hash_args(args))
    h_mu, h_g = fit.bandwidths
    print(f"bandwidths: mean {h_mu:.6g}, surface {h_g:.6g}")
    print(f"dimension {fit.dimension}; eigenvalues "
          + ", ".join(f"{v:.4g}" for v in fit.model.eigen.eigenvalues)
          + f"; sigma2 {fit.model.eigen.sigma2:.4g}")
    for group, params in fit.ladder_estimates.items():
        label = "pooled" if len(group) > 1 else f"component {group[0]}"
        print(f"{label}: alpha {math.degrees(params.alpha):.2f} deg, "
              f"delta {params.delta:.3f}, zeta {params.zeta:.4g}, "
              f"nu {params.nu:.3g}")
    return 0


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    data = read_observations_csv(args.observations)
    want_intervals = args.level is not None
    est = blup_scores(model, data, error_cov=want_intervals)
    recon = reconstruct(model, est)
    grid = model.eigen.grid
    if want_intervals:
        n, m = recon.shape
        header_extra = []
        extra_cols = []
        pw = np.empty((n, m, 2))
        band = np.empty((n, m, 2))
        for i in range(n):
            band[i] = simultaneous_band(model, est, i, args.level)
            for j in range(m):
                pw[i, j] = pointwise_interval(model, est, i, j, args.level)
        blocks = {"pw_lo": pw[..., 0], "pw_hi": pw[..., 1],
                  "band_lo": band[..., 0], "band_hi": band[..., 1]}
        values = np.concatenate([recon] + list(blocks.values()), axis=1)
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["loc_id", "x", "y"] + [f"v{j}" for j in range(m)]
                + [f"{name}{j}" for name in blocks for j in range(m)])
            for loc, row in zip(data.locations, values):
                writer.writerow([loc.id, repr(float(loc.x)),
                                 repr(float(loc.y))]
                                + [repr(float(v)) for v in row])
        meta = {"t_min": grid.t_min, "t_max": grid.t_max, "m": grid.m,
                "points": [float(p) for p in grid.points],
                "level": args.level}
        with open(args.out + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True)
            fh.write("\n")
    else:
        write_matrix_csv(args.out, data.locations, recon, grid)
    print(f"reconstruction -> {args.out}")

    pace = None
    if args.baseline_pace:
        pace = pace_baseline(model, data)
        base_path = str(args.out) + ".pace.csv"
        write_matrix_csv(base_path, data.locations, pace, grid)
        print(f"independence baseline -> {base_path}")
    if args.truth:
        ids, _, truth = read_matrix_csv(args.truth)
        order = {i: k for k, i in enumerate(ids)}
        rows = np.array([order[loc.id] for loc in data.locations])
        if pace is not None:
            ip = improvement(truth[rows], recon, pace)
            ip_path = str(args.out) + ".ip.csv"
            with open(ip_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["loc_id", "ip"])
                for k, loc in enumerate(data.locations):
                    writer.writerow([loc.id, repr(improvement(
                        truth[rows[k]:rows[k] + 1], recon[k:k + 1],
                        pace[k:k + 1]))])
            print(f"improvement over baseline: {ip:.6g} "
                  f"(per-curve -> {ip_path})")
        err = float(np.mean((truth[rows] - recon) ** 2))
        print(f"mean squared error vs truth: {err:.6g}")
    return 0


def cmd_test(args) -> int:
    data = read_observations_csv(args.observations)
    cfg = BootstrapTestConfig(bandwidth_mean=args.bandwidth_mean,
                              bandwidth_surface=args.bandwidth_surface,
                              grid_points=args.grid_points,
                              max_ladder=args.max_ladder,
                              levels=tuple(args.levels),
                              threads=worker_count(args.threads))
    partition = Partition([list(range(args.components))])
    kwargs = {"statistic": args.statistic} if args.statistic else {}
    if args.kind == "separability":
        result = separability_test(data, partition, args.b, args.seed, cfg,
                                   **kwargs)
    else:
        result = isotropy_test(data, partition, args.iso_groups, args.b,
                               args.seed, cfg, **kwargs)
    report = {
        "kind": args.kind,
        "statistic": result.statistic_name,
        "observed": result.observed_stat,
        "null_stats": list(result.null_stats),
        "p_value": result.p_value,
        "decisions": {repr(k): v for k, v in result.decision_at.items()},
        "dropped_replicates": result.n_dropped,
        "b": args.b,
        "seed": args.seed,
    }
    if "observed_angles" in result.extras:
        report["observed_angles_deg"] = [math.degrees(a) for a in
                                         result.extras["observed_angles"]]
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True)
        fh.write("\n")
    print(f"{args.kind}: observed {result.observed_stat:.6g}, "
          f"p-value {result.p_value:.4g} -> {args.out}")
    return 0


def cmd_cv(args) -> int:
    data = read_observations_csv(args.observations)
    grid = make_grid(data.time_domain, args.grid_points)
    span = grid.t_max - grid.t_min
    report: dict = {}

    mean_cands = args.bandwidth_candidates or [c * span for c in
                                               DEFAULT_MEAN_CANDIDATES]
    mean_rep = lobo_bandwidth((data.pooled_times, data.pooled_values),
                              mean_cands, bins=args.bins)
    h_mu = best_bandwidth(mean_rep)
    report["mean_bandwidth"] = {
        "selected": h_mu,
        "profile": [{"candidate": r.candidate, "score": r.score}
                    for r in mean_rep]}

    surf_cands = args.bandwidth_candidates or [c * span for c in
                                               DEFAULT_SURFACE_CANDIDATES]
    mu = smooth_mean(data, SmootherConfig(h_mu=h_mu, h_g=1.0), grid)
    pts = raw_cross_covariances(
        data, mu, grid, [(i, i) for i in data.location_ids]).off_diagonal()
    surf_rep = lobo_bandwidth(pts, surf_cands, bins=min(args.bins, 6))
    h_g = best_bandwidth(surf_rep)
    report["surface_bandwidth"] = {
        "selected": h_g,
        "profile": [{"candidate": r.candidate, "score": r.score}
                    for r in surf_rep]}

    if not args.skip_errcv:
        config = PipelineConfig(bandwidth_mean=h_mu, bandwidth_surface=h_g,
                                grid_points=args.grid_points,
                                max_ladder=args.max_ladder)
        profile = errcv_curves(data, args.k_candidates, args.j_folds,
                               args.buffer, make_fit_closure(config))
        report["components"] = {
            "selected": select_k(profile),
            "profile": [{"candidate": int(r.candidate), "score": r.score,
                         "fold_scores": list(r.fold_scores)}
                        for r in profile]}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True)
        fh.write("\n")
    print(f"cross-validation report -> {args.out}")
    return 0


def cmd_table(args) -> int:
    names = [s.strip() for s in args.scenarios.split(",") if s.strip()]
    scenarios = [preset_scenario(name, seed=args.seed, extent=args.extent)
                 for name in names]
    from .sim_engine import default_pipeline_config
    rows = run_table(scenarios, args.replicates, args.seed,
                     config_for=lambda s: default_pipeline_config(
                         s, max_ladder=args.max_ladder))
    fields = ["scenario", "component", "parameter", "true_value", "mean",
              "median", "std", "rmse", "rho_true", "rho_mean", "rho_median",
              "rho_std", "rho_rmse", "pct_ip_positive", "n_ok", "n_failed"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([getattr(row, f) for f in fields])
    for row in rows:
        print(f"{row.scenario} component {row.component}: "
              f"{row.parameter} mean {row.mean:.4g} (true {row.true_value:g}),"
              f" rho mean {row.rho_mean:.4g} (true {row.rho_true:.4g}), "
              f"IP>0 {row.pct_ip_positive:.0f}%")
    print(f"table -> {args.out}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SpaceFdaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
