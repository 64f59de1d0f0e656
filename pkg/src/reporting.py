from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional

from .models import DecisionReport, IcpResult


def _format_fraction(value: Optional[float]) -> str:
    if value is None:
        return "N/A"
    return f"{value:.3f}"


def _format_mark(selected: bool) -> str:
    return "yes" if selected else "no"


def _report_title(report: DecisionReport) -> str:
    return f"BHIP {report.prior_family} | target={report.target_name}"


def format_report_table(report: DecisionReport) -> str:
    header = ["predictor", "hdi_global", "hdi_local_min", "pooling", "z_mean", "lambda_mean", "selected"]
    rows: List[List[str]] = [header]
    for p in report.predictors:
        rows.append(
            [
                p.name,
                _format_fraction(p.hdi_frac_global),
                _format_fraction(p.hdi_frac_local_min),
                _format_fraction(p.pooling_factor),
                _format_fraction(p.inclusion_prob),
                _format_fraction(p.lambda_mean),
                _format_mark(p.selected),
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [_report_title(report), ""]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())

    t = report.thresholds
    lines.extend(
        [
            "",
            f"thresholds: hdi_mass={t.hdi_mass} hdi>{t.hdi_threshold} pooling>{t.pooling_threshold} "
            f"rope={t.rope_mode} x{t.rope_multiplier}",
            f"selected: {', '.join(report.selected) or '(none)'}",
        ]
    )
    if report.selected_by_z is not None:
        lines.append(f"selected by z>{t.z_threshold}: {', '.join(report.selected_by_z) or '(none)'}")
    return "\n".join(lines)


def format_icp_table(result: IcpResult) -> str:
    lines = [f"ICP | alpha={result.alpha} | subsets={len(result.tests)}", ""]
    for name, p in zip(result.predictor_names, result.predictor_pvalues):
        lines.append(f"{name}  p={p:.4g}")
    estimate = ", ".join(result.intersection_names()) or "(none)"
    lines.extend(["", f"estimate: {estimate}"])
    if result.model_rejected:
        lines.append("every subset was rejected")
    return "\n".join(lines)


class ReportSink:
    def send(self, report: DecisionReport) -> None:
        raise NotImplementedError


class ConsoleReportSink(ReportSink):
    def __init__(self, logger: logging.Logger) -> None:
        self._logger = logger

    def send(self, report: DecisionReport) -> None:
        self._logger.info(
            "Report ready | family=%s | target=%s | selected=%s | table=%s",
            report.prior_family,
            report.target_name,
            report.selected,
            format_report_table(report).replace("\n", " | "),
        )


class FileReportSink(ReportSink):
    """Writes decision.json and a plain-text report.txt into ``out_dir``."""

    def __init__(self, out_dir: Path, logger: logging.Logger) -> None:
        self._out_dir = Path(out_dir)
        self._logger = logger

    def send(self, report: DecisionReport) -> None:
        self._out_dir.mkdir(parents=True, exist_ok=True)
        decision_path = self._out_dir / "decision.json"
        decision_path.write_text(json.dumps(json.loads(report.json()), indent=2, sort_keys=True))
        (self._out_dir / "report.txt").write_text(format_report_table(report) + "\n")
        self._logger.info(
            "Report sent via %s | path=%s", self.__class__.__name__, decision_path
        )


def build_report_sinks(
    logger: logging.Logger,
    out_dir: Optional[Path] = None,
) -> Iterable[ReportSink]:
    sinks: list[ReportSink] = [ConsoleReportSink(logger)]
    if out_dir is not None:
        sinks.append(FileReportSink(out_dir, logger))
    return sinks
