"""Parent-set recovery benchmark over random linear-Gaussian SCMs, plus a timing study."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import graph_scm
from .data import EnvironmentDataset, standardize
from .decision import decide
from .icp import DEFAULT_MAX_PREDICTORS, icp_fit
from .model import build_density
from .models import METHOD_FAMILIES, BenchConfig, DecisionConfig, Metrics, ModelSpec, SamplerConfig
from .sampler import nuts_sample

logger = logging.getLogger("bench")

# Edge weights and noise variances of the benchmark LGANMs.
WEIGHT_RANGE = (1.0, 5.0)
NOISE_RANGE = (0.0, 0.3)

METRIC_CONVENTIONS = {
    "precision": "1 when predicted and truth are both empty; 0 when only predicted is empty",
    "recall": "1 when truth is empty",
    "f1": "0 when precision + recall is 0",
    "specificity": "1 when there are no true negatives or false positives to count",
}

METRIC_COLUMNS = ["precision", "recall", "f1", "specificity"]


class BenchError(ValueError):
    """Raised for invalid benchmark arguments."""


def score_parent_set(predicted: Iterable[int], truth: Iterable[int], d: int) -> Metrics:
    predicted, truth = set(predicted), set(truth)
    for idx in predicted | truth:
        if not 0 <= idx < d:
            raise BenchError(f"index {idx} out of range for {d} candidate predictors")
    tp = len(predicted & truth)
    fp = len(predicted - truth)
    fn = len(truth - predicted)
    tn = d - tp - fp - fn

    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if not truth else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    specificity = tn / (tn + fp) if tn + fp else 1.0
    return Metrics(precision=precision, recall=recall, f1=f1, specificity=specificity)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


def predict_parents(
    method: str,
    dataset: EnvironmentDataset,
    sampler_cfg: SamplerConfig,
    decision_cfg: DecisionConfig,
    icp_alpha: float = 0.05,
    icp_max_predictors: int = DEFAULT_MAX_PREDICTORS,
) -> FrozenSet[int]:
    """Predicted parent indices (positions in dataset.predictor_names)."""
    if method == "icp":
        return frozenset(icp_fit(dataset, icp_alpha, icp_max_predictors).intersection)
    standardized = standardize(dataset)
    density = build_density(ModelSpec(prior_family=METHOD_FAMILIES[method]), standardized)
    samples = nuts_sample(density, sampler_cfg)
    report = decide(samples, decision_cfg, target_sd=standardized.target_sd())
    return frozenset(report.selected_indices())


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    index: int
    nodes: int
    samples: int
    envs: int


def grid_cells(cfg: BenchConfig) -> List[GridCell]:
    return [
        GridCell(i, n, s, e)
        for i, (n, s, e) in enumerate(itertools.product(cfg.nodes_list, cfg.samples_list, cfg.envs_list))
    ]


def _format_set(indices: Iterable[int]) -> str:
    return " ".join(str(i) for i in sorted(indices))


def replicate_environments(
    cfg: BenchConfig, scm: graph_scm.LinearScm, cell: GridCell, rng: np.random.Generator
) -> Iterator[Tuple[int, List[np.ndarray]]]:
    """(target, environment blocks) for every benchmarked target of one DAG.

    With ``intervene_any_node`` the environments are drawn once and shared by
    all targets. Otherwise each target gets its own environments, none of
    which intervenes on it.
    """
    if not cfg.intervene_any_node:
        for target in range(cell.nodes):
            specs = graph_scm.make_benchmark_environments(
                scm, cell.envs, cell.samples, target=target, rng=rng, allow_target=False
            )
            yield target, graph_scm.sample_blocks(scm, specs, rng)
        return
    specs = graph_scm.make_benchmark_environments(
        scm, cell.envs, cell.samples, target=None, rng=rng, allow_target=True
    )
    blocks = graph_scm.sample_blocks(scm, specs, rng)
    intervened = frozenset().union(*(s.intervened_nodes() for s in specs))
    for target in range(cell.nodes):
        if target in intervened and not cfg.include_intervened_targets:
            continue
        yield target, blocks


def run_replicate(cfg: BenchConfig, cell: GridCell, replicate: int) -> List[Dict]:
    """All (target, method) runs for one random DAG; rows keep target then method order."""
    rng = np.random.default_rng([cfg.seed, cell.index, replicate])
    dag = graph_scm.random_dag(cell.nodes, cfg.edge_prob, rng)
    scm = graph_scm.random_lganm(dag, *WEIGHT_RANGE, *NOISE_RANGE, rng, positive_effects=cfg.positive_effects)

    rows = []
    for target, blocks in replicate_environments(cfg, scm, cell, rng):
        dataset = graph_scm.blocks_to_dataset(blocks, target)
        columns = graph_scm.predictor_nodes(cell.nodes, target)
        truth = {columns.index(p) for p in graph_scm.parents(dag, target)}
        for method in cfg.methods:
            sampler_cfg = cfg.sampler.copy(update={"seed": int(rng.integers(2**63))})
            row = {
                "cell": cell.index,
                "nodes": cell.nodes,
                "samples": cell.samples,
                "envs": cell.envs,
                "replicate": replicate,
                "target": target,
                "method": method,
                "truth": _format_set(truth),
            }
            started = time.perf_counter()
            try:
                predicted = predict_parents(
                    method, dataset, sampler_cfg, cfg.thresholds, cfg.icp_alpha
                )
            except Exception as exc:
                logger.exception(
                    "Run failed | cell=%d | replicate=%d | target=%d | method=%s",
                    cell.index,
                    replicate,
                    target,
                    method,
                )
                row.update(status="failed", error=str(exc), predicted="", seconds=time.perf_counter() - started)
                row.update({m: np.nan for m in METRIC_COLUMNS})
                rows.append(row)
                continue
            metrics = score_parent_set(predicted, truth, dataset.n_predictors)
            row.update(
                status="ok",
                error="",
                predicted=_format_set(predicted),
                seconds=time.perf_counter() - started,
                **metrics.dict(),
            )
            rows.append(row)
    return rows


@dataclass
class BenchResult:
    runs: pd.DataFrame
    summary: pd.DataFrame
    failures: Dict[str, int] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.runs.to_csv(out_dir / "runs.csv", index=False)
        self.summary.to_csv(out_dir / "summary.csv", index=False)
        payload = {
            "summary": self.summary.to_dict(orient="records"),
            "failures": self.failures,
            "metadata": self.metadata,
        }
        (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        logger.info("Benchmark written | out_dir=%s | runs=%d", out_dir, len(self.runs))


def summarize_runs(runs: pd.DataFrame) -> pd.DataFrame:
    keys = ["cell", "nodes", "samples", "envs", "method"]
    if runs.empty:
        return pd.DataFrame(columns=keys + METRIC_COLUMNS + ["runs", "failed"])
    # Failed runs carry NaN metrics, which mean() skips.
    frame = runs.assign(ok=(runs["status"] == "ok").astype(int))
    frame["failed"] = 1 - frame["ok"]
    grouped = frame.groupby(keys, sort=True)
    summary = grouped[METRIC_COLUMNS].mean()
    summary["runs"] = grouped["ok"].sum().astype(int)
    summary["failed"] = grouped["failed"].sum().astype(int)
    return summary.reset_index()


def run_grid(cfg: BenchConfig, threads: int = 1) -> BenchResult:
    cells = grid_cells(cfg)
    jobs = [(cell, r) for cell in cells for r in range(cfg.n_dags)]
    logger.info(
        "Benchmark started | cells=%d | dags_per_cell=%d | methods=%s | threads=%d",
        len(cells),
        cfg.n_dags,
        cfg.methods,
        threads,
    )
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(lambda job: run_replicate(cfg, *job), jobs))
    else:
        batches = [run_replicate(cfg, cell, r) for cell, r in jobs]

    runs = pd.DataFrame([row for batch in batches for row in batch])
    summary = summarize_runs(runs)
    failures: Dict[str, int] = {}
    if not runs.empty:
        failed = runs[runs["status"] != "ok"]
        failures = {str(k): int(v) for k, v in failed.groupby("method").size().items()}
    for _, row in summary.iterrows():
        logger.info(
            "Grid cell finished | nodes=%s | samples=%s | envs=%s | method=%s | f1=%.4f | runs=%d | failed=%d",
            row["nodes"],
            row["samples"],
            row["envs"],
            row["method"],
            row["f1"],
            row["runs"],
            row["failed"],
        )
    return BenchResult(
        runs=runs,
        summary=summary,
        failures=failures,
        metadata={"metric_conventions": METRIC_CONVENTIONS, "config": json.loads(cfg.json())},
    )


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class TimingResult:
    rows: pd.DataFrame
    summary: pd.DataFrame
    icp_log_slope: Optional[float] = None

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(out_dir / "timing.csv", index=False)
        self.summary.to_csv(out_dir / "timing_summary.csv", index=False)
        logger.info("Timing written | out_dir=%s | icp_log_slope=%s", out_dir, self.icp_log_slope)


def _timing_dataset(nodes: int, samples_per_env: int, envs: int, rng: np.random.Generator) -> EnvironmentDataset:
    dag = graph_scm.random_dag(nodes, 0.5, rng)
    scm = graph_scm.random_lganm(dag, *WEIGHT_RANGE, *NOISE_RANGE, rng)
    target = graph_scm.topological_order(dag)[-1]
    specs = graph_scm.make_benchmark_environments(scm, envs, samples_per_env, target, rng)
    return graph_scm.sample_environments(scm, specs, target, rng)


def log_time_slope(summary: pd.DataFrame, method: str = "icp") -> Optional[float]:
    rows = summary[summary["method"] == method]
    if len(rows) < 2:
        return None
    return float(np.polyfit(rows["nodes"].to_numpy(float), np.log(rows["median"].to_numpy(float)), 1)[0])


def run_timing(
    nodes_range: Sequence[int],
    samples_per_env: int = 200,
    envs: int = 2,
    reps: int = 3,
    seed: int = 0,
    methods: Sequence[str] = ("bhip-noncentered", "icp"),
    sampler_cfg: Optional[SamplerConfig] = None,
    icp_max_predictors: int = DEFAULT_MAX_PREDICTORS,
) -> TimingResult:
    if "icp" in methods and max(nodes_range) - 1 > icp_max_predictors:
        raise BenchError(
            f"timing with ICP is limited to {icp_max_predictors + 1} nodes, got {max(nodes_range)}"
        )
    sampler_cfg = sampler_cfg or SamplerConfig(chains=1, warmup=200, draws=200)
    decision_cfg = DecisionConfig()

    rows = []
    for nodes in nodes_range:
        for rep in range(reps):
            rng = np.random.default_rng([seed, nodes, rep])
            dataset = _timing_dataset(nodes, samples_per_env, envs, rng)
            for method in methods:
                cfg = sampler_cfg.copy(update={"seed": int(rng.integers(2**63))})
                started = time.perf_counter()
                predict_parents(method, dataset, cfg, decision_cfg, icp_max_predictors=icp_max_predictors)
                seconds = time.perf_counter() - started
                rows.append({"method": method, "nodes": nodes, "rep": rep, "seconds": seconds})
                logger.debug("Timed | method=%s | nodes=%d | rep=%d | seconds=%.3f", method, nodes, rep, seconds)

    frame = pd.DataFrame(rows)
    grouped = frame.groupby(["method", "nodes"], sort=True)["seconds"]
    summary = pd.DataFrame(
        {
            "median": grouped.median(),
            "q25": grouped.quantile(0.25),
            "q75": grouped.quantile(0.75),
        }
    ).reset_index()
    summary["iqr"] = summary["q75"] - summary["q25"]
    slope = log_time_slope(summary) if "icp" in methods else None
    logger.info("Timing finished | nodes=%s | reps=%d | icp_log_slope=%s", list(nodes_range), reps, slope)
    return TimingResult(rows=frame, summary=summary, icp_log_slope=slope)
