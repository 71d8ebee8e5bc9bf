"""
Command-line front end: sample-env, simulate, bounds, scaling, aw-check.

Every subcommand resolves its options as flag > --config bundle > settings.yml >
model default, writes its outputs plus `<output>.manifest.json`, and reports
failures as a single `error=<kind> code=<n> message=<text>` line on stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .dynamics import SimConfig, log_output_times, run_ensemble
from .env_sampler import (CovarianceSpec, EnvironmentModel, GaussianMollifier, TracerModel,
                          sample_field, write_field_binary, write_field_csv)
from .errors import EXIT_OK, ConfigurationError, SuperdiffError
from .quadrature import QuadratureConfig
from .report import AwCheckReport, ReportBuilder, RunManifest
from .scaling import (MsdSeries, ScalingAnsatz, aw_exponents, aw_residual, fit_exponents,
                      laplace_msd)
from .utils import (load_yaml_config, merge_settings, parse_float_list, setup_logging,
                    settings_section, thread_cap)
from .variational import BoundQuery, bound_sweep

logger = setup_logging(__name__)

SUBCOMMANDS = ("sample-env", "simulate", "bounds", "scaling", "aw-check")


class RunConfig(BaseModel):
    """One resolved invocation: the options echo in the manifest is exactly `options`"""
    command: str
    seed: int = Field(0, ge=0)
    output_dir: str = "output"
    options: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def resolve(cls, command: str, flags: Dict[str, Any], bundle: Optional[Dict[str, Any]] = None) -> "RunConfig":
        bundle = bundle or {}
        section = command.replace("-", "_")
        options = merge_settings(bundle.get(section), flags)
        seed = options.pop("seed", None)
        if seed is None:
            seed = bundle.get("seed", 0)
        output_dir = bundle.get("output_dir") or settings_section("output").get("directory", "output")
        return cls(command=command, seed=seed, output_dir=output_dir, options=options)

    def output_path(self, value: Optional[str], default_name: str) -> str:
        """Explicit paths are used as given; defaults land in output_dir"""
        if value:
            return str(value)
        return str(Path(self.output_dir) / default_name)


class LabArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigurationError(message.replace("\n", " "))


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="superdiff", description="Superdiffusive tracer laboratory")
    parser.add_argument("--config", help="YAML experiment bundle (one section per subcommand)")
    parser.add_argument("--threads", type=int, help="Worker processes (overrides SUPERDIFF_THREADS)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command")

    sample = subparsers.add_parser("sample-env", help="Draw one stationary environment on the torus")
    sample.add_argument("--model", choices=[m.value for m in EnvironmentModel] + [m.value for m in TracerModel])
    sample.add_argument("--box", type=float)
    sample.add_argument("--grid", type=int)
    sample.add_argument("--sigma", type=float)
    sample.add_argument("--seed", type=int)
    sample.add_argument("--out", help="CSV with columns x, y, omega1, omega2")
    sample.add_argument("--binary", help="Optional binary grid dump")

    simulate = subparsers.add_parser("simulate", help="Monte Carlo ensemble of E(t)")
    simulate.add_argument("--model", choices=[m.value for m in TracerModel])
    simulate.add_argument("--dt", type=float)
    simulate.add_argument("--t-max", type=float, dest="t_max")
    simulate.add_argument("--ensemble", type=int, dest="ensemble_size")
    simulate.add_argument("--box", type=float)
    simulate.add_argument("--grid", type=int)
    simulate.add_argument("--sigma", type=float)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--output-times", dest="output_times", help="Comma-separated recording times")
    simulate.add_argument("--output-points", type=int, dest="output_points",
                          help="Number of log-spaced recording times when --output-times is absent")
    simulate.add_argument("--env-off", action="store_true", default=None, dest="environment_off")
    simulate.add_argument("--repulsion-off", action="store_true", default=None, dest="repulsion_off")
    simulate.add_argument("--out")

    bounds = subparsers.add_parser("bounds", help="Variational resolvent bounds over a lambda sweep")
    bounds.add_argument("--model", choices=[m.value for m in TracerModel])
    bounds.add_argument("--lambda-list", dest="lambda_list", help="Comma-separated lambda values")
    bounds.add_argument("--tol", type=float, dest="rel_tol")
    bounds.add_argument("--pmax", type=float, dest="p_max")
    bounds.add_argument("--sigma", type=float)
    bounds.add_argument("--out")

    scaling = subparsers.add_parser("scaling", help="Exponent fit, Laplace transform and consistency check")
    scaling.add_argument("--input", help="CSV written by simulate")
    scaling.add_argument("--lambda-list", dest="lambda_list")
    scaling.add_argument("--fit", action="store_true", default=None)
    scaling.add_argument("--aw-check", nargs=2, metavar=("D", "ISO"), dest="aw_check",
                         help="Dimension and iso|aniso")
    scaling.add_argument("--tail-gamma", type=float, dest="tail_gamma")
    scaling.add_argument("--out")

    aw = subparsers.add_parser("aw-check", help="Scaling exponents and their residual slope")
    aw.add_argument("--d", type=int)
    geometry = aw.add_mutually_exclusive_group()
    geometry.add_argument("--iso", action="store_true", default=None, dest="isotropic")
    geometry.add_argument("--aniso", action="store_false", default=None, dest="isotropic")
    aw.add_argument("--nu", type=float)
    aw.add_argument("--gamma", type=float)
    aw.add_argument("--out")
    return parser


def _load_bundle(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        bundle = load_yaml_config(path)
    except Exception as e:
        raise ConfigurationError(str(e).replace("\n", " "))
    if not isinstance(bundle, dict):
        raise ConfigurationError(f"{path} must hold a mapping of sections")
    return bundle


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"command", "config", "threads", "log_level"}
    return {key: value for key, value in vars(args).items() if key not in skip and value is not None}


def _number(value: Any, name: str, cast=float):
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a number, got {value!r}")


def _as_list(value: Any, name: str = "list") -> List[float]:
    if value is None:
        return []
    if isinstance(value, str):
        return parse_float_list(value)
    if isinstance(value, (int, float)):
        return [float(value)]
    return [_number(v, name) for v in value]


def _mollifier(options: Dict[str, Any]) -> GaussianMollifier:
    sigma = options.get("sigma", settings_section("sampler").get("sigma", 1.0))
    return GaussianMollifier(sigma=sigma)


def _manifest(builder: ReportBuilder, run: RunConfig, config: Dict[str, Any], outputs: List[str]) -> str:
    manifest = RunManifest(command=run.command, seed=run.seed, config=config, outputs=outputs)
    return builder.write_manifest(manifest, outputs[0])


def run_sample_env(run: RunConfig, builder: ReportBuilder) -> int:
    options = run.options
    defaults = settings_section("sampler")
    model = options.get("model", EnvironmentModel.CURL.value)
    if model in {m.value for m in TracerModel}:
        model = TracerModel(model).environment.value
    spec = CovarianceSpec(model=EnvironmentModel(model), mollifier=_mollifier(options))
    box = _number(options.get("box", defaults.get("box", 64.0)), "box")
    grid = _number(options.get("grid", defaults.get("grid", 256)), "grid", int)

    sample = sample_field(spec, box, grid, run.seed)
    outputs = [write_field_csv(sample, run.output_path(options.get("out"), "field.csv"))]
    if options.get("binary"):
        outputs.append(write_field_binary(sample, run.output_path(options["binary"], "field.bin")))
    config = {"model": spec.model.value, "box": box, "grid": grid, "mollifier": spec.mollifier.model_dump()}
    _manifest(builder, run, config, outputs)
    return EXIT_OK


def run_simulate(run: RunConfig, builder: ReportBuilder, workers: int) -> int:
    options = dict(run.options)
    if "model" not in options or "t_max" not in options:
        raise ConfigurationError("simulate needs --model and --t-max")
    times = _as_list(options.pop("output_times", None), "output_times")
    points = _number(options.pop("output_points", 20), "output_points", int)
    out = options.pop("out", None)
    mollifier = _mollifier(options)
    options.pop("sigma", None)

    config = SimConfig.from_settings(seed=run.seed, mollifier=mollifier, **options)
    if not times:
        times = log_output_times(config.dt, config.t_max, points)
    config = SimConfig.from_settings(seed=run.seed, mollifier=mollifier, output_times=tuple(times), **options)

    stats = run_ensemble(config, workers=workers)
    output_path = builder.write_csv(builder.simulate_frame(stats), run.output_path(out, "simulate.csv"))
    _manifest(builder, run, config.model_dump(mode="json"), [output_path])
    return EXIT_OK


def run_bounds(run: RunConfig, builder: ReportBuilder, workers: int) -> int:
    options = run.options
    if "model" not in options:
        raise ConfigurationError("bounds needs --model")
    lambdas = _as_list(options.get("lambda_list"), "lambda_list")
    if not lambdas:
        raise ConfigurationError("bounds needs a non-empty --lambda-list")
    quad = QuadratureConfig.from_settings(rel_tol=options.get("rel_tol"), p_max=options.get("p_max"))
    query = BoundQuery(lam=lambdas[0], model=TracerModel(options["model"]), mollifier=_mollifier(options), quad=quad)

    rows = bound_sweep(query, lambdas, workers=workers)
    output_path = builder.write_csv(builder.bounds_frame(rows), run.output_path(options.get("out"), "bounds.csv"))
    config = {"model": query.model.value, "lambda_list": lambdas, "mollifier": query.mollifier.model_dump(),
              "quad": quad.model_dump()}
    _manifest(builder, run, config, [output_path])
    return EXIT_OK


def _parse_geometry(value: Any) -> bool:
    text = str(value).strip().lower()
    if text in ("iso", "isotropic", "true"):
        return True
    if text in ("aniso", "anisotropic", "false"):
        return False
    raise ConfigurationError(f"expected iso or aniso, got {value!r}")


def run_scaling(run: RunConfig, builder: ReportBuilder) -> int:
    options = run.options
    if not options.get("input"):
        raise ConfigurationError("scaling needs --input")
    series = MsdSeries.from_csv(options["input"])
    tail_gamma = _number(options.get("tail_gamma", 0.0), "tail_gamma")

    fit = fit_exponents(series) if options.get("fit") else None
    lambdas = _as_list(options.get("lambda_list"), "lambda_list")
    laplace = [laplace_msd(series, lam, tail_gamma=tail_gamma) for lam in lambdas]
    aw_slope = None
    if options.get("aw_check"):
        d, geometry = options["aw_check"]
        ansatz = ScalingAnsatz.from_table(_number(d, "aw_check dimension", int), _parse_geometry(geometry))
        aw_slope = aw_residual(ansatz).slope

    report = builder.scaling_report(fit, laplace, aw_slope, input_path=options["input"])
    output_path = builder.save_json("scaling_report", report, run.output_path(options.get("out"), "scaling.json"))
    _manifest(builder, run, _jsonable(options), [output_path])
    return EXIT_OK


def run_aw_check(run: RunConfig, builder: ReportBuilder) -> int:
    options = run.options
    d = _number(options.get("d", 2), "d", int)
    isotropic = _parse_geometry(options.get("isotropic", True))
    nu, gamma = aw_exponents(d, isotropic)
    nu = _number(options.get("nu", nu), "nu")
    gamma = _number(options.get("gamma", gamma), "gamma")
    ansatz = ScalingAnsatz(nu=nu, gamma=gamma, d=d, isotropic=isotropic)

    report = AwCheckReport(nu=nu, gamma=gamma, slope=aw_residual(ansatz).slope)
    print(json.dumps(report.model_dump()))
    if options.get("out"):
        output_path = builder.save_json("aw_check", report, run.output_path(options["out"], "aw_check.json"))
        _manifest(builder, run, ansatz.model_dump(), [output_path])
    return EXIT_OK


def _jsonable(options: Dict[str, Any]) -> Dict[str, Any]:
    return {key: list(value) if isinstance(value, tuple) else value for key, value in options.items()}


def dispatch(args: argparse.Namespace, bundle: Dict[str, Any]) -> int:
    run = RunConfig.resolve(args.command, _flags(args), bundle)
    builder = ReportBuilder()
    workers = args.threads or thread_cap()
    logger.info(f"Running {run.command} (seed={run.seed}, workers={workers})")

    if run.command == "sample-env":
        return run_sample_env(run, builder)
    if run.command == "simulate":
        return run_simulate(run, builder, workers)
    if run.command == "bounds":
        return run_bounds(run, builder, workers)
    if run.command == "scaling":
        return run_scaling(run, builder)
    return run_aw_check(run, builder)


def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit status"""
    try:
        args = build_parser().parse_args(argv)
        if args.command not in SUBCOMMANDS:
            raise ConfigurationError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        if args.log_level:
            logging.getLogger().setLevel(getattr(logging, args.log_level.upper(), logging.INFO))
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be >= 1")
            os.environ["SUPERDIFF_THREADS"] = str(args.threads)
        return dispatch(args, _load_bundle(args.config))
    except ValidationError as e:
        error = ConfigurationError(" ".join(str(e).split()))
    except SuperdiffError as e:
        error = e
    except (FileNotFoundError, KeyError) as e:
        error = ConfigurationError(" ".join(str(e).split()))

    logger.error(f"{error.kind} error: {error.message}")
    print(error.one_line(), file=sys.stderr)
    return error.code


def main():
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
