"""Command-line entry point: ``python -m src.cli <command> ...``.

Exit codes: 0 ok, 1 usage or validation error, 2 convergence warning
(results are still written), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic.v1 import ValidationError

from . import graph_scm, scenarios
from .bench import run_grid, run_timing
from .config import Settings, load_settings
from .data import (
    EnvironmentDataset,
    LoadOptions,
    derive_env_by_median,
    export_csv,
    load_csv,
    read_frame,
    standardize,
)
from .decision import decide, plot_data
from .icp import icp_fit
from .logging_setup import setup_logging
from .model import build_density
from .models import BenchConfig, DataSource, RunConfig, SamplerConfig
from .reporting import build_report_sinks, format_icp_table
from .sampler import has_convergence_warning, nuts_sample

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONVERGENCE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Invalid flags, configuration or input data."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextmanager
def _usage_stage() -> Iterator[None]:
    """Errors raised while reading configuration and inputs are usage errors."""
    try:
        yield
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    logger.info("File written | path=%s", path)


def _int_list(text: str) -> List[int]:
    """``4,5,6`` or ``4..12`` (inclusive)."""
    try:
        if ".." in text:
            low, high = text.split("..", 1)
            return list(range(int(low), int(high) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a list like 4,5 or a range like 4..12: {text!r}") from exc


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc


def _set(target: Dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        target[key] = value


def _seed(args: argparse.Namespace, settings: Settings, configured: Optional[int] = None) -> int:
    """--seed, then the config file, then BHIP_SEED."""
    if args.seed is not None:
        return args.seed
    return configured if configured is not None else settings.default_seed


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate_scm(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(args.out or settings.output_dir)
    with _usage_stage():
        seed = _seed(args, settings)
        rng = np.random.default_rng(seed)
        dag = graph_scm.random_dag(args.nodes, args.edge_prob, rng)
        scm = graph_scm.random_lganm(dag, 1.0, 5.0, 0.0, 0.3, rng, positive_effects=args.positive_effects)
        target = graph_scm.topological_order(dag)[-1] if args.target is None else args.target
        true_parents = graph_scm.parents(dag, target)
        specs = graph_scm.make_benchmark_environments(
            scm, args.envs, args.samples, target, rng, allow_target=args.allow_target
        )

    dataset = graph_scm.sample_environments(scm, specs, target, rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_csv(dataset, out_dir / "data.csv")
    truth = {
        "scm": graph_scm.scm_to_dict(scm),
        "target": target,
        "true_parents": [f"x{p}" for p in sorted(true_parents)],
        "predictor_names": dataset.predictor_names,
        "environments": [[iv.to_dict() for iv in spec.interventions] for spec in specs],
        "seed": seed,
    }
    _write_json(out_dir / "truth.json", truth)
    return EXIT_OK


def cmd_generate_bus(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(args.out or settings.output_dir)
    with _usage_stage():
        seed = _seed(args, settings)
        rng = np.random.default_rng(seed)
        if args.params:
            stops = scenarios.load_bus_stops(Path(args.params))
        else:
            stops = scenarios.random_bus_stops(args.stops, rng, args.per_stop_coefficients)
        dataset = scenarios.generate_bus_data(stops, args.n, rng)

    out_dir.mkdir(parents=True, exist_ok=True)
    export_csv(dataset, out_dir / "data.csv")
    truth = scenarios.stops_to_dict(stops)
    truth["seed"] = seed
    _write_json(out_dir / "truth.json", truth)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit / icp
# ---------------------------------------------------------------------------


def _load_dataset(source: DataSource, standardized: bool) -> EnvironmentDataset:
    options = LoadOptions(target_kind=source.target_kind, drop_columns=source.drop_columns)
    if source.median_split:
        dataset = derive_env_by_median(read_frame(Path(source.path)), source.median_split, source.target, options)
    else:
        dataset = load_csv(Path(source.path), source.target, source.env_column, options)
    return standardize(dataset) if standardized else dataset


def _data_overrides(args: argparse.Namespace, data: Dict[str, Any]) -> None:
    _set(data, "path", args.input)
    _set(data, "target", args.target)
    if args.median_split:
        data["median_split"] = args.median_split
        data["env_column"] = None
    else:
        _set(data, "env_column", args.env)


def _build_run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    raw = _read_config(args.config)
    data = dict(raw.get("data", {}))
    _data_overrides(args, data)
    raw["data"] = data

    model = dict(raw.get("model", {}))
    _set(model, "prior_family", args.model)
    _set(model, "likelihood", args.likelihood)
    raw["model"] = model

    sampler = dict(raw.get("sampler", {}))
    _set(sampler, "chains", args.chains)
    _set(sampler, "warmup", args.warmup)
    _set(sampler, "draws", args.draws)
    _set(sampler, "target_accept", args.target_accept)
    _set(sampler, "max_tree_depth", args.max_tree_depth)
    sampler["seed"] = _seed(args, settings, sampler.get("seed"))
    raw["sampler"] = sampler

    decision = dict(raw.get("decision", {}))
    _set(decision, "rope_mode", args.rope_mode)
    _set(decision, "hdi_threshold", args.hdi_threshold)
    _set(decision, "pooling_threshold", args.pooling_threshold)
    raw["decision"] = decision

    _set(raw, "out_dir", args.out)
    raw.setdefault("out_dir", settings.output_dir)
    if args.save_draws:
        raw["save_draws"] = True
    return RunConfig.parse_obj(raw)


def cmd_fit(args: argparse.Namespace, settings: Settings) -> int:
    with _usage_stage():
        run = _build_run_config(args, settings)
        dataset = _load_dataset(run.data, run.data.standardize)
        density = build_density(run.model, dataset)

    out_dir = Path(run.out_dir)
    samples = nuts_sample(density, run.sampler, threads=args.threads or settings.threads)
    summary = samples.summary_frame()
    report = decide(samples, run.decision, target_sd=dataset.target_sd())

    out_dir.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out_dir / "summary.csv")
    _write_json(
        out_dir / "summary.json",
        {
            "parameters": json.loads(summary.reset_index().to_json(orient="records")),
            "chains": samples.chain_stats,
            "divergence_warning": samples.divergence_warning,
        },
    )
    for sink in build_report_sinks(logging.getLogger("cli.report"), out_dir):
        sink.send(report)
    if run.save_draws:
        samples.to_long_frame().to_csv(out_dir / "draws.csv", index=False)
        plot_data(samples, run.decision, target_sd=dataset.target_sd()).to_csv(
            out_dir / "plot_data.csv", index=False
        )

    if has_convergence_warning(summary):
        logger.warning("Convergence warning | out_dir=%s", out_dir)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_icp(args: argparse.Namespace, settings: Settings) -> int:
    with _usage_stage():
        data: Dict[str, Any] = {}
        _data_overrides(args, data)
        source = DataSource.parse_obj(data)
        dataset = _load_dataset(source, standardized=False)
        result = icp_fit(
            dataset,
            alpha=args.alpha,
            max_predictors=settings.icp_max_predictors,
            threads=args.threads or settings.threads,
        )

    out_dir = Path(args.out or settings.output_dir)
    _write_json(out_dir / "icp.json", json.loads(result.json()))
    logger.info("ICP report | table=%s", format_icp_table(result).replace("\n", " | "))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / timing
# ---------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace, settings: Settings) -> int:
    with _usage_stage():
        raw = _read_config(args.config)
        _set(raw, "nodes_list", args.nodes)
        _set(raw, "samples_list", args.samples)
        _set(raw, "envs_list", args.envs)
        _set(raw, "n_dags", args.n_dags)
        _set(raw, "methods", args.methods)
        raw["seed"] = _seed(args, settings, raw.get("seed"))
        cfg = BenchConfig.parse_obj(raw)

    result = run_grid(cfg, threads=args.threads or settings.threads)
    result.write(Path(args.out or settings.output_dir))
    return EXIT_OK


def cmd_timing(args: argparse.Namespace, settings: Settings) -> int:
    with _usage_stage():
        seed = _seed(args, settings)
        sampler_cfg = SamplerConfig(chains=1, warmup=args.warmup, draws=args.draws)
    result = run_timing(
        args.nodes,
        samples_per_env=args.samples,
        envs=args.envs,
        reps=args.reps,
        seed=seed,
        methods=args.methods,
        sampler_cfg=sampler_cfg,
        icp_max_predictors=settings.icp_max_predictors,
    )
    result.write(Path(args.out or settings.output_dir))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="defaults to BHIP_SEED")
    parser.add_argument("--threads", type=int, default=None, help="defaults to BHIP_THREADS")
    parser.add_argument("--out", default=None, help="output directory (defaults to BHIP_OUTPUT_DIR)")
    parser.add_argument("--log-level", default=None)


def _add_data_source(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--in", dest="input", default=None, help="input CSV")
    parser.add_argument("--target", default=None)
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--env", default=None, help="environment column")
    group.add_argument("--median-split", default=None, help="derive two environments from this column")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="bhip", description="Bayesian hierarchical invariant prediction")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    generate = commands.add_parser("generate", help="simulate datasets")
    kinds = generate.add_subparsers(dest="kind", required=True, parser_class=_ArgumentParser)

    scm = kinds.add_parser("scm", help="random linear-Gaussian SCM with interventions")
    scm.add_argument("--nodes", type=int, default=4)
    scm.add_argument("--samples", type=int, default=2000, help="samples per environment")
    scm.add_argument("--envs", type=int, default=3)
    scm.add_argument("--edge-prob", type=float, default=0.5)
    scm.add_argument("--target", type=int, default=None, help="defaults to the last node in topological order")
    scm.add_argument("--allow-target", action="store_true", help="allow interventions on the target")
    scm.add_argument("--positive-effects", action="store_true")
    _add_common(scm)
    scm.set_defaults(handler=cmd_generate_scm)

    bus = kinds.add_parser("bus", help="bus-stop dwelling scenario")
    bus.add_argument("--stops", type=int, default=2)
    bus.add_argument("--n", type=int, default=500, help="samples per stop")
    bus.add_argument("--params", default=None, help="JSON file with stop parameters")
    bus.add_argument("--per-stop-coefficients", action="store_true")
    _add_common(bus)
    bus.set_defaults(handler=cmd_generate_bus)

    fit = commands.add_parser("fit", help="fit a BHIP model and select invariant parents")
    _add_data_source(fit)
    fit.add_argument("--config", default=None, help="RunConfig JSON")
    fit.add_argument("--model", default=None, help="noncentered | horseshoe | spikeslab")
    fit.add_argument("--likelihood", default=None, choices=["gaussian", "bernoulli-logit"])
    fit.add_argument("--chains", type=int, default=None)
    fit.add_argument("--warmup", type=int, default=None)
    fit.add_argument("--draws", type=int, default=None)
    fit.add_argument("--target-accept", type=float, default=None)
    fit.add_argument("--max-tree-depth", type=int, default=None)
    fit.add_argument("--rope-mode", default=None, choices=["posterior-sd", "target-sd"])
    fit.add_argument("--hdi-threshold", type=float, default=None)
    fit.add_argument("--pooling-threshold", type=float, default=None)
    fit.add_argument("--save-draws", action="store_true")
    _add_common(fit)
    fit.set_defaults(handler=cmd_fit)

    icp = commands.add_parser("icp", help="invariant causal prediction baseline")
    _add_data_source(icp)
    icp.add_argument("--alpha", type=float, default=0.05)
    _add_common(icp)
    icp.set_defaults(handler=cmd_icp)

    bench = commands.add_parser("bench", help="parent-recovery benchmark grid")
    bench.add_argument("--config", default=None, help="BenchConfig JSON")
    bench.add_argument("--nodes", type=_int_list, default=None)
    bench.add_argument("--samples", type=_int_list, default=None)
    bench.add_argument("--envs", type=_int_list, default=None)
    bench.add_argument("--n-dags", type=int, default=None)
    bench.add_argument("--methods", type=_str_list, default=None)
    _add_common(bench)
    bench.set_defaults(handler=cmd_bench)

    timing = commands.add_parser("timing", help="runtime versus number of nodes")
    timing.add_argument("--nodes", type=_int_list, default=list(range(6, 15)))
    timing.add_argument("--samples", type=int, default=200, help="samples per environment")
    timing.add_argument("--envs", type=int, default=2)
    timing.add_argument("--reps", type=int, default=3)
    timing.add_argument("--warmup", type=int, default=200)
    timing.add_argument("--draws", type=int, default=200)
    timing.add_argument("--methods", type=_str_list, default=["bhip-noncentered", "icp"])
    _add_common(timing)
    timing.set_defaults(handler=cmd_timing)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # Handler before settings load; the configured level is applied once they are read.
    setup_logging(args.log_level or "INFO")
    try:
        settings = load_settings()
    except ValidationError as exc:
        logger.error("Invalid environment configuration | error=%s", exc)
        return EXIT_USAGE
    setup_logging(args.log_level or settings.log_level)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")

    logger.info("Command starting | command=%s", args.command)
    try:
        code = args.handler(args, settings)
    except UsageError as exc:
        logger.error("Invalid input | command=%s | error=%s", args.command, exc)
        return EXIT_USAGE
    except Exception as exc:
        logger.exception("Command failed | command=%s | error=%s", args.command, exc)
        return EXIT_RUNTIME
    logger.info("Command finished | command=%s | exit_code=%d", args.command, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
