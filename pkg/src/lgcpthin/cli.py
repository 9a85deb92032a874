"""Command-line interface.

Subcommands: explore, simulate, thin, fit, predict, simstudy, report.  Every
run writes its artifacts plus a ``manifest.json`` (resolved options, seed,
package versions, wall time, artifact list) sufficient to reproduce it.
Options can come from a flat ``key = value`` config file (``--config``);
explicit flags win over config values.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from lgcpthin import __version__, assess, geo
from lgcpthin.errors import LgcpThinError, ParseError
from lgcpthin.geo import Grid, RasterGrid
from lgcpthin.grf import MaternParams, PcPriorSpec, sample_matern_field
from lgcpthin.inference import FitResult, ModelSpec, NormalPrior, fit, predict_intensity
from lgcpthin.pointprocess import ThinningConfig, make_log_intensity, simulate_lgcp, thin
from lgcpthin.simstudy import ScenarioConfig, coverage_table, run_scenarios


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; '#' starts a comment.

    Values are parsed as bool, int, float, comma list, or string, in that
    order of preference.
    """
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError("expected 'key = value'", path, lineno)
            key, _, raw = text.partition("=")
            key = key.strip().replace("-", "_")
            if not key:
                raise ParseError("empty key", path, lineno)
            out[key] = _parse_value(raw.strip())
    return out


def _parse_value(raw: str):
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if "," in raw:
        return [_parse_value(part.strip()) for part in raw.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw.strip("'\"")


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill still-at-default options from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    cfg = read_config(args.config)
    sub_action = next(a for a in parser._actions
                      if isinstance(a, argparse._SubParsersAction))
    subparser = sub_action.choices[args.command]
    defaults = {a.dest: a.default for a in subparser._actions}
    for key, value in cfg.items():
        if key in vars(args) and key in defaults and getattr(args, key) == defaults[key]:
            setattr(args, key, value)
    return args


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------

class _Run:
    """Tracks artifacts and writes the manifest on completion."""

    def __init__(self, command: str, args: argparse.Namespace):
        import os

        self.command = command
        self.outdir = args.out
        os.makedirs(self.outdir, exist_ok=True)
        self.t0 = time.time()
        self.artifacts: list[str] = []
        self.options = {k: v for k, v in vars(args).items() if k != "func"}

    def path(self, name: str) -> str:
        import os

        self.artifacts.append(name)
        return os.path.join(self.outdir, name)

    def finish(self, extra: dict | None = None) -> int:
        import os
        import scipy

        manifest = {
            "command": self.command,
            "options": _jsonable(self.options),
            "seed": self.options.get("seed"),
            "versions": {"lgcpthin": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__,
                         "python": sys.version.split()[0]},
            "wall_time_s": round(time.time() - self.t0, 3),
            "artifacts": self.artifacts,
        }
        if extra:
            manifest.update(_jsonable(extra))
        with open(os.path.join(self.outdir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
        missing = [a for a in self.artifacts
                   if not os.path.exists(os.path.join(self.outdir, a))]
        return 1 if missing else 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _load_covariates(pairs: list[str]) -> dict[str, RasterGrid]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise LgcpThinError(f"--covariate expects name=path, got {pair!r}")
        name, _, path = pair.partition("=")
        out[name] = geo.read_esri_ascii(path)
    return out


def _model_spec(args, covariate_names) -> ModelSpec:
    return ModelSpec(
        covariate_names=tuple(covariate_names),
        use_vse=args.model == "vse",
        pc_prior=PcPriorSpec(args.pc_rho0, args.pc_alpha_rho,
                             args.pc_sigma0, args.pc_alpha_sigma),
        beta_prior=NormalPrior(0.0, args.beta_precision),
        theta_prior=NormalPrior(args.theta_mean, args.theta_precision),
        zeta_fixed=args.zeta_fixed,
    )


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_explore(args) -> int:
    run = _Run("explore", args)
    points = geo.read_points_csv(args.points)
    roads = geo.read_roads(args.roads)
    xmin, ymin, xmax, ymax = points.domain
    cell = (xmax - xmin) / args.grid_res
    ny = max(int(round((ymax - ymin) / cell)), 1)
    grid = Grid(xmin, ymin, cell, args.grid_res, ny)
    point_dists = geo.distances_to_roads(points.points, roads)
    grid_dists = geo.distances_to_roads(grid.cell_centers(), roads)
    d_stat, p_value = geo.ks_two_sample(point_dists, grid_dists)

    thresholds = [0.5, 1.0, 2.0, 3.0]
    summary = {
        "n_points": len(points),
        "n_reference": grid_dists.size,
        "distance_quantiles": {
            str(q): float(np.quantile(point_dists, q))
            for q in (0.05, 0.25, 0.5, 0.75, 0.95)},
        "fraction_within": {
            str(t): float(np.mean(point_dists <= t)) for t in thresholds},
        "ks_statistic": d_stat,
        "ks_p_value": p_value,
    }
    if args.covariate:
        covs = _load_covariates(args.covariate)
        summary["covariate_distance_correlation"] = {}
        for name, rast in covs.items():
            cell_d = geo.distances_to_roads(rast.grid.cell_centers(), roads)
            summary["covariate_distance_correlation"][name] = geo.pearson_corr(
                rast.values.ravel(), cell_d)
    with open(run.path("explore.json"), "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
    support = np.unique(np.concatenate([point_dists, grid_dists]))
    f_pts, f_grid = geo.ecdf(point_dists), geo.ecdf(grid_dists)
    _write_csv(run.path("ecdf.csv"), ["distance", "ecdf_points", "ecdf_reference"],
               zip(support, f_pts(support), f_grid(support)))
    return run.finish()


def cmd_simulate(args) -> int:
    run = _Run("simulate", args)
    covs = _load_covariates(args.covariate)
    names = list(covs)
    coefs = dict(zip(names, args.coef))
    if len(args.coef) != len(names):
        raise LgcpThinError("need one --coef per covariate, in order")
    grid = covs[names[0]].grid
    field = None
    if args.sigma > 0:
        field = sample_matern_field(
            grid, MaternParams(sigma=args.sigma, rho=args.rho),
            seed=args.seed, extension_factor=args.extension)
    surface = make_log_intensity(covs, args.beta0, coefs, field)
    pattern = simulate_lgcp(surface, np.random.default_rng(args.seed + 1))
    geo.write_points_csv(pattern, run.path("points.csv"))
    geo.write_esri_ascii(surface.raster, run.path("log_intensity.asc"))
    return run.finish({"n_points": len(pattern)})


def cmd_thin(args) -> int:
    run = _Run("thin", args)
    pattern = geo.read_points_csv(args.points)
    roads = geo.read_roads(args.roads)
    thinned = thin(pattern, ThinningConfig(args.zeta), roads, args.seed)
    geo.write_points_csv(thinned, run.path("thinned.csv"))
    return run.finish({"n_before": len(pattern), "n_after": len(thinned),
                       "removed_fraction": 1.0 - len(thinned) / max(len(pattern), 1)})


def cmd_fit(args) -> int:
    run = _Run("fit", args)
    covs = _load_covariates(args.covariate)
    grid = covs[next(iter(covs))].grid
    pattern = geo.read_points_csv(args.points, domain=grid.bbox)
    roads = geo.read_roads(args.roads) if args.roads else None
    spec = _model_spec(args, covs.keys())
    result = fit(pattern, covs, roads, spec)
    if args.assess_draws > 0:
        assess.score(result, n_samples=args.assess_draws, seed=args.seed)
    result.save(run.outdir)
    run.artifacts.extend(["fit.json", "fit_nodes.npz"])
    return run.finish({"n_points": len(pattern)})


def cmd_predict(args) -> int:
    import os

    run = _Run("predict", args)
    with open(os.path.join(args.fit, "manifest.json")) as fh:
        fit_manifest = json.load(fh)
    opts = fit_manifest["options"]
    covs = _load_covariates(args.covariate or opts["covariate"])
    grid = covs[next(iter(covs))].grid
    pattern = geo.read_points_csv(args.points or opts["points"], domain=grid.bbox)
    roads_path = args.roads or opts.get("roads")
    roads = geo.read_roads(roads_path) if roads_path else None
    ns = argparse.Namespace(**{**opts, "model": opts["model"]})
    spec = _model_spec(ns, covs.keys())
    result = FitResult.load(args.fit, pattern, covs, roads, spec)
    median, sd = predict_intensity(result, draws=args.draws, seed=args.seed)
    geo.write_esri_ascii(median, run.path("log_intensity_median.asc"))
    geo.write_esri_ascii(sd, run.path("log_intensity_sd.asc"))
    return run.finish()


def cmd_simstudy(args) -> int:
    run = _Run("simstudy", args)
    config = ScenarioConfig(
        zeta_levels=tuple(float(z) for z in args.zeta_levels),
        replicates=args.replicates,
        posterior_draws_per_fit=args.posterior_draws,
        theta_prior_preset=args.theta_prior,
        informative_mean=args.informative_mean,
        informative_precision=args.informative_precision,
        seed=args.seed,
        nominal_level=args.level,
        grid_n=args.grid_n,
        domain_size=args.domain_size,
        self_test=args.self_test,
        threads=args.threads,
    )
    result = run_scenarios(config)
    result.to_csv(run.path("results.csv"))
    result.scores_to_csv(run.path("scores.csv"))
    _write_csv(run.path("coverage.csv"),
               ["scenario_index", "zeta", "model", "parameter", "coverage", "mean_ci_width"],
               [[c["scenario_index"], c["zeta"], c["model"], c["parameter"],
                 c["coverage"], c["mean_ci_width"]] for c in coverage_table(result)])
    with open(run.path("summary.md"), "w") as fh:
        fh.write(result.to_markdown() + "\n")
    return run.finish(result.metadata())


def cmd_report(args) -> int:
    import os

    run = _Run("report", args)
    rows = []
    for fit_dir in args.fits:
        with open(os.path.join(fit_dir, "fit.json")) as fh:
            doc = json.load(fh)
        scores = doc.get("scores") or {}
        rows.append([doc.get("model", fit_dir), scores.get("dic"),
                     scores.get("waic"), scores.get("lpml")])
    _write_csv(run.path("comparison.csv"), ["model", "dic", "waic", "lpml"], rows)
    return run.finish()


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")


def _add_prior_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pc-rho0", type=float, default=15.0)
    p.add_argument("--pc-alpha-rho", type=float, default=0.05)
    p.add_argument("--pc-sigma0", type=float, default=1.0)
    p.add_argument("--pc-alpha-sigma", type=float, default=0.05)
    p.add_argument("--beta-precision", type=float, default=0.01)
    p.add_argument("--theta-mean", type=float, default=1.0)
    p.add_argument("--theta-precision", type=float, default=0.05)
    p.add_argument("--zeta-fixed", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgcpthin",
        description="Simulate and fit Cox point processes observed under "
                    "distance-based thinning (units: kilometers).")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explore", help="distance summaries, ECDFs, KS test")
    p.add_argument("--points", required=True)
    p.add_argument("--roads", required=True)
    p.add_argument("--grid-res", type=int, default=100)
    p.add_argument("--covariate", action="append", default=[],
                   help="name=path.asc (repeatable)")
    _add_common(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("simulate", help="draw a point pattern from a Cox surface")
    p.add_argument("--covariate", action="append", required=True,
                   help="name=path.asc (repeatable)")
    p.add_argument("--beta0", type=float, required=True)
    p.add_argument("--coef", type=float, action="append", required=True,
                   help="coefficient per covariate, in order (repeatable)")
    p.add_argument("--rho", type=float, default=34.0)
    p.add_argument("--sigma", type=float, default=0.8367,
                   help="field standard deviation; 0 disables the field")
    p.add_argument("--extension", type=float, default=1.5)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("thin", help="thin a pattern by road distance")
    p.add_argument("--points", required=True)
    p.add_argument("--roads", required=True)
    p.add_argument("--zeta", type=float, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_thin)

    p = sub.add_parser("fit", help="fit the naive or VSE model")
    p.add_argument("--points", required=True)
    p.add_argument("--covariate", action="append", required=True)
    p.add_argument("--roads", default=None)
    p.add_argument("--model", choices=["naive", "vse"], default="naive")
    p.add_argument("--assess-draws", type=int, default=200,
                   help="posterior draws for DIC/WAIC/LPML; 0 skips scoring")
    _add_prior_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior intensity rasters from a saved fit")
    p.add_argument("--fit", required=True, help="directory written by 'fit'")
    p.add_argument("--points", default=None, help="override the fit's inputs")
    p.add_argument("--covariate", action="append", default=None)
    p.add_argument("--roads", default=None)
    p.add_argument("--model", choices=["naive", "vse"], default=None)
    p.add_argument("--draws", type=int, default=1000)
    _add_prior_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simstudy", help="run the simulate/thin/fit/compare protocol")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--zeta-levels", default=[0.0, 1.0, 8.0, 16.0], nargs="+", type=float)
    p.add_argument("--posterior-draws", type=int, default=100)
    p.add_argument("--theta-prior", choices=["default", "informative"], default="default")
    p.add_argument("--informative-mean", type=float, default=None)
    p.add_argument("--informative-precision", type=float, default=10.0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--grid-n", type=int, default=20)
    p.add_argument("--domain-size", type=float, default=150.0)
    p.add_argument("--self-test", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_simstudy)

    p = sub.add_parser("report", help="criteria comparison CSV across fits")
    p.add_argument("--fits", nargs="+", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, parser)
        return args.func(args)
    except (LgcpThinError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
