"""Command-line entry point: ``pmba {simulate,init,optimize,compare}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import DataError, DisconnectedGraphError, InfeasibleProblemError, StageError
from .solver import METHODS, SingularSystemError, SolverConfig, optimize

logger = logging.getLogger("pmba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PARAMS = ("pmba", "xyz", "idp")
DEFAULT_CONFIGS = "pmba:lm,pmba:dl,xyz:lm,xyz:dl,idp:lm,idp:dl"


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _default_out():
    return os.environ.get("PMBA_OUTPUT_DIR", "pmba_out")


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# ---------------------------------------------------------------------------
# shared helpers


def _solver_config(args) -> SolverConfig:
    return SolverConfig(method=args.method, max_iterations=args.max_iterations,
                        initial_lambda=args.initial_lambda, initial_radius=args.initial_radius,
                        rel_tol=args.rel_tol, step_tol=args.step_tol, grad_tol=args.grad_tol)


def _load_bal(path, mode, distortion=True):
    from .scene.bal import bal_to_problem, parse_bal

    ds = parse_bal(Path(path))
    problem, behind = bal_to_problem(ds, mode="xyz", distortion=distortion)
    if behind.any():
        print(f"warning: {int(behind.sum())} points lie behind every observing camera")
    if mode != "xyz":
        problem = problem.as_mode(mode)
    return ds, problem


def _truth_alignment(problem, truth_path):
    from .scene.align import align_similarity
    from .scene.bal import bal_to_problem, parse_bal

    truth, _ = bal_to_problem(parse_bal(Path(truth_path)), mode="xyz")
    return align_similarity(problem.p, truth.p, problem.points(), truth.points(), problem.R, truth.R)


def _write_result(problem, out: Path, prefix=""):
    from .scene.bal import problem_to_bal, write_bal
    from .scene.export import export_geometry

    export_geometry(problem, out, prefix)
    write_bal(problem_to_bal(problem), out / f"{prefix}result.bal")


def _max_cond(records):
    c = [r.cond_HFF for r in records if not np.isnan(r.cond_HFF)]
    return max(c) if c else float("nan")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    from .scene.bal import scene_to_bal, write_bal
    from .scene.export import write_points, write_poses
    from .scene.synthetic import SceneSpec, generate_scene

    spec = SceneSpec(n_poses=args.poses, n_features=args.features, n_far=args.far,
                     n_collinear=args.collinear, noise_px=args.noise, seed=args.seed,
                     layout=args.layout, focal=args.focal)
    try:
        scene = generate_scene(spec)
    except ValueError as exc:
        raise UsageError(f"{exc} (try more poses, fewer pathological features, or another seed)") from exc
    out = Path(args.out)
    write_bal(scene_to_bal(scene.R, scene.p, scene.points, scene.obs, scene.intrinsics), out / "truth.bal")
    R0, p0, X0 = scene.perturbed_state(args.perturb_rot, args.perturb_pos, args.perturb_point,
                                       seed=args.seed + 1)
    write_bal(scene_to_bal(R0, p0, X0, scene.obs, scene.intrinsics), out / "initial.bal")
    write_poses(out / "truth_poses.csv", scene.R, scene.p)
    write_points(out / "truth_points.csv", scene.points, scene.tags)
    counts = {t: scene.tags.count(t) for t in ("normal", "far", "collinear")}
    print(f"scene: {scene.n_poses} poses, {scene.n_features} features, {len(scene.obs)} observations")
    print("pathology: " + ", ".join(f"{v} {k}" for k, v in counts.items()))
    print(f"wrote {out / 'truth.bal'} and {out / 'initial.bal'}")
    return EXIT_OK


def cmd_init(args, pipeline_options: dict) -> int:
    from .init.pipeline import PipelineConfig, run_pipeline
    from .scene.export import write_stage_reports

    _, problem = _load_bal(args.input, "xyz", not args.no_distortion)
    opts = dict(pipeline_options)
    opts["seed"] = args.seed
    if args.skip_qplc:
        opts["skip_qplc"] = True
    if args.min_shared is not None:
        opts["min_shared"] = args.min_shared
    try:
        config = PipelineConfig.from_mapping(opts)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    result = run_pipeline(problem.obs, problem.n_poses, problem.intrinsics, config, run_ba=False,
                          artifacts_dir=out)
    write_stage_reports(out / "stage_reports.csv", result.reports)
    _write_result(result.initial, out, "init_")
    for r in result.reports:
        stats = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in r.stats.items())
        print(f"[{r.stage}] {stats}")
        for f in r.flags:
            print(f"    flag: {f}")
    if args.truth:
        al = _truth_alignment(result.initial, args.truth)
        print(f"alignment to truth: pose_rmse={al.pose_rmse:.3e} point_rmse={al.point_rmse:.3e}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .scene.export import export_iterations, write_csv

    _, problem = _load_bal(args.input, args.param, not args.no_distortion)
    problem.robust_scale = args.robust_scale
    res = optimize(problem, _solver_config(args))
    out = Path(args.out)
    export_iterations(res.records, out / "iterations.csv")
    _write_result(res.problem, out)
    rows = [("param", args.param), ("method", args.method), ("reason", res.reason),
            ("iterations", res.iterations), ("linear_solves", res.linear_solves),
            ("chi2_ray", res.problem.chi2_ray()), ("chi2_uv", res.problem.chi2_uv()),
            ("cond_HFF_initial", res.records[0].cond_HFF), ("cond_HFF_max", _max_cond(res.records)),
            ("regularized_blocks", res.regularized_blocks)]
    if args.truth:
        al = _truth_alignment(res.problem, args.truth)
        rows += [("pose_rmse", al.pose_rmse), ("point_rmse", al.point_rmse)]
    write_csv(out / "summary.csv", ["key", "value"], rows)
    if args.plots:
        from .plotting import plot_convergence, plot_geometry

        plot_convergence({f"{args.param}+{args.method}": res.records}, out / "convergence.png")
        plot_geometry(res.problem.p, res.problem.points(), out / "geometry.png",
                      far_limit=50.0 * _baseline(res.problem.p))
    for k, v in rows:
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    if res.reason == "singular":
        print("error: Gauss-Newton system is singular", file=sys.stderr)
        return EXIT_NUMERIC
    if not np.isfinite(res.problem.chi2()):
        print("error: non-finite cost", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _baseline(p):
    if len(p) < 2:
        return 1.0
    return max(float(np.max(np.linalg.norm(p[:, None] - p[None], axis=-1))), 1e-9)


def parse_configs(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise UsageError(f"config {item!r} must look like param:method")
        param, method = (s.strip().lower() for s in item.split(":", 1))
        if param not in PARAMS or method not in METHODS:
            raise UsageError(f"config {item!r}: param in {PARAMS}, method in {METHODS}")
        out.append((param, method))
    if not out:
        raise UsageError("no configurations given")
    return out


def cmd_compare(args) -> int:
    from .scene.export import export_iterations, write_csv

    configs = parse_configs(args.configs)
    _, base = _load_bal(args.input, "xyz", not args.no_distortion)
    out = Path(args.out)
    rows, runs = [], {}
    for param, method in configs:
        name = f"{param}_{method}"
        args.method = method
        row = {"config": f"{param}:{method}", "status": "ok", "reason": "", "iterations": "",
               "linear_solves": "", "chi2_ray": "", "chi2_uv": "", "cond_HFF_max": "",
               "pose_rmse": "", "point_rmse": ""}
        try:
            problem = base.as_mode(param)
            res = optimize(problem, _solver_config(args))
            export_iterations(res.records, out / f"compare_{name}.csv")
            runs[f"{param}+{method}"] = res.records
            row.update(reason=res.reason, iterations=res.iterations, linear_solves=res.linear_solves,
                       chi2_ray=res.problem.chi2_ray(), chi2_uv=res.problem.chi2_uv(),
                       cond_HFF_max=_max_cond(res.records))
            if args.truth:
                al = _truth_alignment(res.problem, args.truth)
                row.update(pose_rmse=al.pose_rmse, point_rmse=al.point_rmse)
        except (DataError, SingularSystemError, np.linalg.LinAlgError, ValueError,
                FloatingPointError) as exc:
            row.update(status="error", reason=f"{type(exc).__name__}: {exc}")
        rows.append(row)

    def key(r):
        ok = r["status"] == "ok" and r["reason"] in ("converged", "gradient")
        uv = r["chi2_uv"] if isinstance(r["chi2_uv"], float) and np.isfinite(r["chi2_uv"]) else np.inf
        return (not ok, r["iterations"] if ok else np.inf, uv)

    order = sorted(range(len(rows)), key=lambda i: key(rows[i]))
    for rank, i in enumerate(order, 1):
        rows[i]["rank"] = rank
    header = ["config", "status", "reason", "iterations", "linear_solves", "chi2_ray", "chi2_uv",
              "cond_HFF_max", "pose_rmse", "point_rmse", "rank"]
    write_csv(out / "summary.csv", header, ([r[h] for h in header] for r in rows))
    if args.plots and runs:
        from .plotting import plot_convergence

        plot_convergence(runs, out / "convergence.png")
    for i in order:
        r = rows[i]
        print(f"{r['rank']}. {r['config']}: {r['reason']} iterations={r['iterations']} chi2_uv={r['chi2_uv']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_solver_flags(p):
    d = SolverConfig()
    p.add_argument("--method", choices=METHODS, default="dl", help="Newton variant")
    p.add_argument("--max-iterations", type=int, default=d.max_iterations)
    p.add_argument("--initial-lambda", type=float, default=None,
                   help="LM damping; default 1e-4 * mean(diag H)")
    p.add_argument("--initial-radius", type=float, default=d.initial_radius, help="dogleg trust radius")
    p.add_argument("--rel-tol", type=float, default=d.rel_tol, help="relative cost decrease tolerance")
    p.add_argument("--step-tol", type=float, default=d.step_tol, help="step norm tolerance")
    p.add_argument("--grad-tol", type=float, default=d.grad_tol, help="gradient infinity-norm tolerance")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="pmba", description=__doc__, formatter_class=fmt)
    parser.add_argument("--config", help="key=value file merged under command-line flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene", formatter_class=fmt)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--poses", type=int, default=4)
    s.add_argument("--features", type=int, default=10)
    s.add_argument("--far", type=int, default=None,
                   help="far features; 1 when omitted on forward scenes")
    s.add_argument("--collinear", type=int, default=None,
                   help="near-collinear features; 1 when omitted on forward scenes")
    s.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    s.add_argument("--layout", choices=("forward", "lateral", "arc"), default="forward")
    s.add_argument("--focal", type=float, default=500.0)
    s.add_argument("--perturb-rot", type=float, default=0.01, help="initial-state rotation noise (rad)")
    s.add_argument("--perturb-pos", type=float, default=0.05, help="initial-state position noise")
    s.add_argument("--perturb-point", type=float, default=0.02,
                   help="initial-state point noise relative to distance")
    s.add_argument("--out", default=_default_out())

    i = sub.add_parser("init", help="global initialization from tracks", formatter_class=fmt)
    i.add_argument("--input", required=True, help="BAL file supplying observations")
    i.add_argument("--out", default=_default_out())
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--skip-qplc", action="store_true", help="start the convex stage from random positions")
    i.add_argument("--min-shared", type=int, default=None,
                   help="shared features per epipolar pair; 16 when omitted")
    i.add_argument("--truth", help="ground-truth BAL for alignment errors")
    i.add_argument("--no-distortion", action="store_true")

    o = sub.add_parser("optimize", help="bundle adjustment from a BAL state", formatter_class=fmt)
    o.add_argument("--input", required=True)
    o.add_argument("--out", default=_default_out())
    o.add_argument("--param", choices=PARAMS, default="pmba", help="feature parameterization")
    o.add_argument("--anchors", choices=("auto",), default="auto",
                   help="anchor selection: widest rotated-ray angle")
    o.add_argument("--robust-scale", type=float, default=None, help="pseudo-Huber scale")
    o.add_argument("--truth", help="ground-truth BAL for alignment errors")
    o.add_argument("--no-distortion", action="store_true")
    o.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True,
                   help="render PNG figures next to the CSVs")
    _add_solver_flags(o)

    c = sub.add_parser("compare", help="run several parameterization/method pairs", formatter_class=fmt)
    c.add_argument("--input", required=True)
    c.add_argument("--out", default=_default_out())
    c.add_argument("--configs", default=DEFAULT_CONFIGS, help="comma list of param:method")
    c.add_argument("--truth", help="ground-truth BAL for alignment errors")
    c.add_argument("--no-distortion", action="store_true")
    c.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    _add_solver_flags(c)
    return parser


def _apply_config(parser, argv):
    """Re-parse with config-file values installed as defaults; returns ``(args, leftovers)``."""
    pre, _ = parser.parse_known_args(argv)
    if not pre.config:
        return parser.parse_args(argv), {}
    values = read_config_file(pre.config)
    sub = parser._subparsers._group_actions[0].choices[pre.command]
    dests = {a.dest: a for a in sub._actions}
    known, leftovers = {}, {}
    for k, v in values.items():
        if k in dests:
            a = dests[k]
            if a.type is not None:
                try:
                    v = a.type(v)
                except ValueError as exc:
                    raise UsageError(f"config key {k}: {exc}") from exc
            elif isinstance(a.default, bool) or a.default is None and a.nargs == 0:
                v = v.lower() in ("1", "true", "yes", "on")
            if a.choices is not None and v not in a.choices:
                raise UsageError(f"config key {k}: {v!r} not in {list(a.choices)}")
            known[k] = v
        else:
            leftovers[k] = v
    sub.set_defaults(**known)
    args = parser.parse_args(argv)
    if leftovers and args.command != "init":
        raise UsageError(f"unknown config keys: {sorted(leftovers)}")
    return args, leftovers


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "init":
            from .init.pipeline import PipelineConfig

            bad = set(extra) - {f.name for f in fields(PipelineConfig)}
            if bad:
                raise UsageError(f"unknown config keys: {sorted(bad)}")
            return cmd_init(args, extra)
        if args.command == "optimize":
            return cmd_optimize(args)
        return cmd_compare(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: stage {exc.stage} failed: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, DisconnectedGraphError):
            for n, comp in enumerate(cause.components):
                print(f"  component {n}: poses {comp}", file=sys.stderr)
        return EXIT_DATA if isinstance(cause, DataError) else EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularSystemError, InfeasibleProblemError, np.linalg.LinAlgError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
