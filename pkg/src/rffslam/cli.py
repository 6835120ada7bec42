"""Command-line driver: simulate, run, eval and sweep.

Configuration comes from an optional JSON file (``--config``) whose keys
mirror the flags; flags given on the command line override it. Every
command writes the resolved configuration as ``config.json`` next to its
outputs.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import FORMATS, load_dataset, load_trajectory_csv, save_dataset, save_results, write_json
from .errors import NumericalFailure, ParseError, RffSlamError, ValidationError
from .estimator import PRECONDITIONERS, SolverConfig
from .metrics import evaluate
from .observation import KINDS
from .pipeline import PRIORS, RunOptions, run_estimation, scenario_dataset
from .priors import SplinePriorConfig
from .sim import ScenarioConfig, simulate

log = logging.getLogger("rffslam")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are invalid input, so they share exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# --- configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    dataset: str | None = None
    format: str = "canonical"
    scenario: ScenarioConfig | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    spline: SplinePriorConfig = field(default_factory=SplinePriorConfig)
    prior: str = "spline"
    kind: str | None = None
    batch_size: int = 5
    output: str = "out"
    range_sigma: float | None = None
    bearing_sigma: float | None = None
    ground_truth: str | None = None
    strict: bool = True

    def validate(self) -> None:
        if (self.dataset is None) == (self.scenario is None):
            raise ValidationError("exactly one of a dataset path or a scenario must be given")
        if self.dataset is not None and not Path(self.dataset).exists():
            raise ValidationError(f"dataset {self.dataset} does not exist")
        if self.ground_truth is not None and not Path(self.ground_truth).exists():
            raise ValidationError(f"ground truth {self.ground_truth} does not exist")
        if self.format not in FORMATS:
            raise ValidationError(f"format must be one of {FORMATS}")
        if self.kind is not None and self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}")
        RunOptions(self.solver, self.prior, self.kind, self.batch_size, self.spline)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scenario"] = None if self.scenario is None else self.scenario.to_dict()
        return out


SOLVER_FLAGS = {
    "num_features": (int, "random Fourier features per state dimension"),
    "lengthscale": (float, "RBF kernel lengthscale in seconds"),
    "solver_seed": (int, "seed of the feature frequencies"),
    "weight_prior_var": (float, "prior variance of every feature weight"),
    "landmark_prior_var": (float, "prior variance of initialized landmarks (m^2)"),
    "lm_lambda_init": (float, "initial Levenberg-Marquardt damping"),
    "tolerance": (float, "relative objective change that stops the iterations"),
    "max_iterations": (int, "Levenberg-Marquardt iterations per batch"),
    "cg_tolerance": (float, "relative residual of the conjugate gradient solves"),
    "time_scale": (float, "factor applied to times before the feature map"),
    "anchor_position_std": (float, "std of the initial-pose anchor, position (m)"),
    "anchor_heading_std": (float, "std of the initial-pose anchor, heading (rad)"),
}

SCENARIO_FLAGS = {
    "num_landmarks": (int, "landmarks in the scenario"),
    "duration": (float, "trajectory duration (s)"),
    "cadence": (float, "measurement period (s)"),
    "range_noise_std": (float, "range noise std (m)"),
    "bearing_noise_deg": (float, "bearing noise std (degrees)"),
    "sensor_max_range": (float, "visibility limit (m)"),
    "odometry_v_std": (float, "linear velocity noise std of the odometry (m/s)"),
    "odometry_w_std": (float, "angular velocity noise std of the odometry (rad/s)"),
}


def _add_solver_flags(p):
    g = p.add_argument_group("solver")
    defaults = SolverConfig()
    for name, (typ, text) in SOLVER_FLAGS.items():
        attr = "seed" if name == "solver_seed" else name
        g.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None, help=f"{text} (default {getattr(defaults, attr)})")
    g.add_argument("--preconditioner", choices=PRECONDITIONERS, default=None, help="CG preconditioner (default block_jacobi)")
    g.add_argument("--prior", choices=PRIORS, default=None, help="trajectory prior mean (default spline; motion needs odometry)")
    g.add_argument("--batch-size", type=_positive_int, default=None, help="measurements per incremental update (default 5)")
    g.add_argument("--smoothing", type=float, default=None, help="spline smoothing parameter p in [0, 1] (default 0.98)")


def _add_scenario_flags(p):
    g = p.add_argument_group("scenario")
    defaults = ScenarioConfig()
    for name, (typ, text) in SCENARIO_FLAGS.items():
        if name == "bearing_noise_deg":
            default = round(math.degrees(defaults.bearing_noise_std), 12)
        else:
            default = getattr(defaults, name)
        g.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None, help=f"{text} (default {default})")
    g.add_argument("--measurement-kind", choices=KINDS, default=None, help="simulated sensor (default range_bearing)")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: configuration must be a JSON object")
    return data


def _merged(args, file_cfg: dict, section: str, names) -> dict:
    """File values for ``names`` overridden by the flags that were given."""
    out = dict(file_cfg.get(section, {}))
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _scenario_config(args, file_cfg, seed=None) -> ScenarioConfig:
    values = _merged(args, file_cfg, "scenario", list(SCENARIO_FLAGS) + ["measurement_kind"])
    if "bearing_noise_deg" in values:
        values["bearing_noise_std"] = math.radians(values.pop("bearing_noise_deg"))
    if seed is not None:
        values["seed"] = seed
    elif getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    _reject_unknown(values, ScenarioConfig, "scenario")
    return ScenarioConfig(**values)


def _solver_config(args, file_cfg) -> SolverConfig:
    values = _merged(args, file_cfg, "solver", list(SOLVER_FLAGS) + ["preconditioner"])
    if "solver_seed" in values:
        values["seed"] = values.pop("solver_seed")
    _reject_unknown(values, SolverConfig, "solver")
    return SolverConfig(**values)


def _reject_unknown(values, cls, section):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown {section} settings: {', '.join(unknown)}")


def _run_config(args, file_cfg) -> RunConfig:
    top = dict(file_cfg)
    for name in ("dataset", "format", "prior", "kind", "batch_size", "output", "range_sigma", "ground_truth"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "bearing_sigma_deg", None) is not None:
        top["bearing_sigma"] = math.radians(args.bearing_sigma_deg)
    scenario = None
    if top.get("dataset") is None and (getattr(args, "scenario_seed", None) is not None or "scenario" in file_cfg):
        seed = getattr(args, "scenario_seed", None)
        scenario = _scenario_config(args, file_cfg, seed)
    spline = dict(file_cfg.get("spline", {}))
    if getattr(args, "smoothing", None) is not None:
        spline["smoothing_parameter"] = args.smoothing
    cfg = RunConfig(
        dataset=top.get("dataset"),
        format=top.get("format", "canonical"),
        scenario=scenario,
        solver=_solver_config(args, file_cfg),
        spline=SplinePriorConfig(**spline),
        prior=top.get("prior", "spline"),
        kind=top.get("kind"),
        batch_size=int(top.get("batch_size", 5)),
        output=top.get("output", "out"),
        range_sigma=top.get("range_sigma"),
        bearing_sigma=top.get("bearing_sigma"),
        ground_truth=top.get("ground_truth"),
        strict=not getattr(args, "lenient", False) and top.get("strict", True),
    )
    cfg.validate()
    return cfg


# --- commands -------------------------------------------------------------------

def _write_scenario(scenario, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "scenario.txt"
    save_dataset(scenario_dataset(scenario), path)
    write_json({"scenario": scenario.config.to_dict(), "metadata": scenario.metadata}, directory / "config.json")
    return path


def cmd_simulate(args) -> int:
    file_cfg = _load_config_file(args.config)
    out = Path(args.output)
    base = _scenario_config(args, file_cfg)
    seeds = [base.seed + k for k in range(args.num_seeds)]
    for seed in seeds:
        scenario = simulate(ScenarioConfig(**{**base.to_dict(), "seed": seed}))
        directory = out if args.num_seeds == 1 else out / f"seed_{seed:03d}"
        path = _write_scenario(scenario, directory)
        print(f"wrote {path} ({len(scenario.measurements)} measurements)")
    return EXIT_OK


def execute_run(cfg: RunConfig) -> dict:
    """Load or simulate the data, estimate, evaluate and write the outputs."""
    if cfg.scenario is not None:
        dataset = scenario_dataset(simulate(cfg.scenario))
    else:
        options = {"range_sigma": cfg.range_sigma, "bearing_sigma": cfg.bearing_sigma}
        if cfg.ground_truth is not None:
            options["ground_truth"] = load_trajectory_csv(cfg.ground_truth)
        dataset = load_dataset(cfg.dataset, cfg.format, cfg.strict, **options)
    result = run_estimation(dataset, RunOptions(cfg.solver, cfg.prior, cfg.kind, cfg.batch_size, cfg.spline))
    out = Path(cfg.output)
    files = save_results(result.trajectory, result.landmarks, result.evaluation, out)
    log_entries = result.convergence_log()
    write_json(log_entries, out / "convergence.json")
    write_json(cfg.to_dict(), out / "config.json")
    for entry in log_entries:
        log.info(
            "batch %d: %d iterations, objective %.6g -> %.6g",
            entry["batch"],
            entry["iterations"],
            entry["initial_objective"],
            entry["final_objective"],
        )
    summary = {"final_objective": result.final_objective, "batches": len(log_entries)}
    if result.evaluation is not None:
        summary.update(result.evaluation.summary())
    return {"summary": summary, "files": {k: str(v) for k, v in files.items()}}


def cmd_run(args) -> int:
    cfg = _run_config(args, _load_config_file(args.config))
    report = execute_run(cfg)
    print(json.dumps(report["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    estimate = load_trajectory_csv(args.estimate)
    if str(args.ground_truth).endswith(".csv"):
        truth = load_trajectory_csv(args.ground_truth)
    else:
        truth = load_dataset(args.ground_truth, "canonical").ground_truth
        if truth is None:
            raise ValidationError(f"{args.ground_truth} has no ground truth records")
    report = evaluate(estimate, truth)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "errors.csv").write_text(report.to_csv())
    write_json({"estimate": str(args.estimate), "ground_truth": str(args.ground_truth)}, out / "config.json")
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return EXIT_OK


def _sweep_one(job):
    cfg, label = job
    report = execute_run(cfg)
    return label, report["summary"]


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    base = _run_config(_with(args, scenario_seed=args.seed or 0), file_cfg)
    out = Path(args.output)
    levels = args.bearing_noise_levels or [math.degrees(base.scenario.bearing_noise_std)]
    jobs = []
    for deg in levels:
        for k in range(args.num_seeds):
            scenario = ScenarioConfig(
                **{**base.scenario.to_dict(), "seed": base.scenario.seed + k, "bearing_noise_std": math.radians(deg)}
            )
            directory = out / f"bearing_{deg:g}deg" / f"seed_{scenario.seed:03d}"
            cfg = RunConfig(**{**vars(base), "scenario": scenario, "output": str(directory)})
            jobs.append((cfg, {"bearing_noise_deg": deg, "seed": scenario.seed}))
    if args.parallel_scenarios > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_scenarios) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    rows = [dict(label, **summary) for label, summary in results]
    per_level = []
    for deg in levels:
        sel = [r for r in rows if r["bearing_noise_deg"] == deg and "ape_trans" in r]
        if sel:
            per_level.append(
                {
                    "bearing_noise_deg": deg,
                    "mean_ape_trans": float(np.mean([r["ape_trans"] for r in sel])),
                    "mean_ape_rot": float(np.mean([r["ape_rot"] for r in sel])),
                    "runs": len(sel),
                }
            )
    out.mkdir(parents=True, exist_ok=True)
    write_json({"runs": rows, "levels": per_level}, out / "summary.json")
    write_json(base.to_dict(), out / "config.json")
    for level in per_level:
        print(f"bearing {level['bearing_noise_deg']:g} deg: mean APE {level['mean_ape_trans']:.4f} m over {level['runs']} runs")
    return EXIT_OK


def _with(args, **overrides):
    ns = argparse.Namespace(**vars(args))
    for k, v in overrides.items():
        setattr(ns, k, v)
    return ns


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rffslam", description="Continuous-time SLAM with random Fourier feature trajectories.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic scenarios")
    p.add_argument("--config", help="JSON file with a 'scenario' section")
    p.add_argument("--seed", type=int, default=None, help="scenario seed (default 0)")
    p.add_argument("--num-seeds", type=_positive_int, default=1, help="consecutive seeds to generate, one directory each")
    p.add_argument("-o", "--output", default="scenario", help="output directory")
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="estimate trajectory and landmarks")
    p.add_argument("--config", help="JSON file; flags override its values")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", default=None, help="dataset file or directory")
    src.add_argument("--scenario-seed", type=int, default=None, help="simulate a scenario in memory instead")
    p.add_argument("--format", choices=FORMATS, default=None, help="dataset format (default canonical)")
    p.add_argument("--kind", choices=KINDS, default=None, help="use only measurements of this kind")
    p.add_argument("--range-sigma", type=float, default=None, help="range std (m) for files without one")
    p.add_argument("--bearing-sigma-deg", type=float, default=None, help="bearing std (degrees) for files without one")
    p.add_argument("--ground-truth", default=None, help="t,x,y,alpha CSV for bearing_csv datasets")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    p.add_argument("-o", "--output", default=None, help="output directory (default out)")
    _add_solver_flags(p)
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="APE/RPE of an estimate against ground truth")
    p.add_argument("estimate", help="estimated trajectory CSV (t,x,y,alpha)")
    p.add_argument("ground_truth", help="ground truth CSV or canonical dataset")
    p.add_argument("-o", "--output", default="eval", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run synthetic scenarios over seeds and bearing noise levels")
    p.add_argument("--config", help="JSON file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="first scenario seed (default 0)")
    p.add_argument("--num-seeds", type=_positive_int, default=10, help="scenarios per noise level")
    p.add_argument("--bearing-noise-levels", type=float, nargs="+", default=None, help="bearing noise stds in degrees")
    p.add_argument("--parallel-scenarios", type=_positive_int, default=1, help="scenarios run concurrently")
    p.add_argument("-o", "--output", default="sweep", help="output directory")
    _add_solver_flags(p)
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_sweep, dataset=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"rffslam: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (RffSlamError, ValueError, TypeError) as exc:
        print(f"rffslam: error: {exc}", file=sys.stderr)
        if isinstance(exc, (ValidationError, ValueError)) and not isinstance(exc, ParseError):
            parser.print_usage(sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"rffslam: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
