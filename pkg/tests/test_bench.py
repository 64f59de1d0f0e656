import json

import numpy as np
import pandas as pd
import pytest

from src import bench
from src.bench import BenchError, log_time_slope, run_grid, run_timing, score_parent_set
from src.models import BenchConfig, SamplerConfig


def _assert_identities(m):
    if m.precision + m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    for value in (m.precision, m.recall, m.f1, m.specificity):
        assert 0.0 <= value <= 1.0


class TestScoring:
    def test_exact_match(self):
        m = score_parent_set({1, 2}, {1, 2}, 4)
        assert (m.precision, m.recall, m.f1, m.specificity) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        m = score_parent_set(set(), {1}, 4)
        assert m.recall == 0.0
        assert m.specificity == 1.0
        assert m.precision == 0.0
        assert m.f1 == 0.0

    def test_partial_recovery(self):
        m = score_parent_set({1}, {1, 2}, 5)
        assert m.precision == 1.0
        assert m.recall == 0.5
        assert m.f1 == pytest.approx(2 / 3)
        assert m.specificity == 1.0

    def test_both_empty(self):
        m = score_parent_set(set(), set(), 3)
        assert (m.precision, m.recall) == (1.0, 1.0)

    def test_false_discovery_complements_precision(self):
        predicted, truth = {0, 1, 3}, {1, 2}
        m = score_parent_set(predicted, truth, 5)
        false_discovery = len(predicted - truth) / len(predicted)
        assert m.precision + false_discovery == pytest.approx(1.0)
        assert m.specificity == pytest.approx(1 / 2)
        _assert_identities(m)

    def test_out_of_range_index(self):
        with pytest.raises(BenchError):
            score_parent_set({5}, {0}, 5)


def _icp_config(**overrides) -> BenchConfig:
    values = dict(nodes_list=[3], samples_list=[80], envs_list=[2], n_dags=2, methods=["icp"], seed=4)
    values.update(overrides)
    return BenchConfig(**values)


def _comparable(runs: pd.DataFrame) -> pd.DataFrame:
    return runs.drop(columns=["seconds"]).reset_index(drop=True)


class TestGrid:
    def test_rows_per_target_and_method(self):
        result = run_grid(_icp_config())
        assert len(result.runs) == 2 * 3
        assert set(result.runs["status"]) == {"ok"}
        assert len(result.summary) == 1
        assert int(result.summary.loc[0, "runs"]) == 6
        for row in result.runs.itertuples():
            predicted = [int(i) for i in str(row.predicted).split()]
            truth = [int(i) for i in str(row.truth).split()]
            m = score_parent_set(predicted, truth, 2)
            assert m.f1 == pytest.approx(row.f1)
            _assert_identities(m)

    def test_deterministic_for_seed_and_threads(self):
        cfg = _icp_config(nodes_list=[3, 4])
        first = run_grid(cfg, threads=1)
        second = run_grid(cfg, threads=3)
        pd.testing.assert_frame_equal(_comparable(first.runs), _comparable(second.runs))

    def test_seed_changes_graphs(self):
        a = run_grid(_icp_config(seed=1)).runs
        b = run_grid(_icp_config(seed=2)).runs
        assert not _comparable(a).equals(_comparable(b))

    def test_excluding_intervened_targets(self):
        cfg = _icp_config(include_intervened_targets=False, envs_list=[3], nodes_list=[4])
        assert len(run_grid(cfg).runs) < 2 * 4

    def test_target_never_intervened_when_restricted(self, monkeypatch):
        seen = []
        original = bench.graph_scm.make_benchmark_environments

        def recording(scm, n_envs, n_samples, target, rng, allow_target=False):
            specs = original(scm, n_envs, n_samples, target, rng, allow_target=allow_target)
            seen.append((target, frozenset().union(*(s.intervened_nodes() for s in specs))))
            return specs

        monkeypatch.setattr(bench.graph_scm, "make_benchmark_environments", recording)
        cfg = _icp_config(intervene_any_node=False, include_intervened_targets=False, envs_list=[3], nodes_list=[4])
        runs = run_grid(cfg).runs
        # every target is kept and each has its own environments
        assert len(runs) == cfg.n_dags * 4
        assert sorted(t for t, _ in seen) == sorted(list(range(4)) * cfg.n_dags)
        assert all(target not in nodes for target, nodes in seen)

    def test_bhip_method_runs(self):
        cfg = _icp_config(
            methods=["bhip-noncentered", "icp"],
            n_dags=1,
            sampler=SamplerConfig(chains=1, warmup=40, draws=30),
        )
        runs = run_grid(cfg).runs
        assert list(runs["method"]) == ["bhip-noncentered", "icp"] * 3
        assert set(runs["status"]) == {"ok"}

    def test_failures_are_recorded(self, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(bench, "predict_parents", broken)
        result = run_grid(_icp_config(n_dags=1))
        assert set(result.runs["status"]) == {"failed"}
        assert result.failures == {"icp": 3}
        assert int(result.summary.loc[0, "failed"]) == 3

    def test_write(self, tmp_path):
        result = run_grid(_icp_config(n_dags=1))
        result.write(tmp_path)
        assert (tmp_path / "runs.csv").exists()
        assert (tmp_path / "summary.csv").exists()
        payload = json.loads((tmp_path / "summary.json").read_text())
        assert payload["metadata"]["config"]["methods"] == ["icp"]
        assert "precision" in payload["metadata"]["metric_conventions"]


class TestTiming:
    def test_small_study(self, tmp_path):
        result = run_timing([3, 4], samples_per_env=40, envs=2, reps=2, methods=("icp",))
        assert len(result.rows) == 4
        assert list(result.summary["nodes"]) == [3, 4]
        assert (result.summary["iqr"] >= 0).all()
        assert isinstance(result.icp_log_slope, float)
        result.write(tmp_path)
        assert (tmp_path / "timing.csv").exists()

    def test_icp_node_limit(self):
        with pytest.raises(BenchError):
            run_timing([6], methods=("icp",), icp_max_predictors=4)

    def test_log_slope_of_doubling_times(self):
        summary = pd.DataFrame(
            {"method": ["icp"] * 4, "nodes": [6, 7, 8, 9], "median": [0.01 * 2.0**k for k in range(4)]}
        )
        assert log_time_slope(summary) == pytest.approx(np.log(2.0))
        assert log_time_slope(summary.iloc[:1]) is None
