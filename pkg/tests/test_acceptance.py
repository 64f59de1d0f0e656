"""End-to-end statistical checks. Run with ``pytest -m slow``."""

import time

import arviz as az
import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from src import graph_scm
from src.bench import run_grid, run_timing
from src.data import EnvironmentDataset, standardize
from src.decision import decide, hdi
from src.icp import icp_fit
from src.model import ParamBlock, ParamLayout, build_density
from src.models import BenchConfig, DecisionConfig, Hyperparams, ModelSpec, SamplerConfig
from src.sampler import nuts_sample, nuts_within_gibbs
from src.scenarios import generate_bus_data, random_bus_stops

pytestmark = pytest.mark.slow

# Capped tree depth and draw counts keep the bus study inside its runtime budget.
BUS_SAMPLER = SamplerConfig(chains=2, warmup=300, draws=300, max_tree_depth=8)
BUS_BUDGET_SECONDS = 600.0


class ConjugateRegression:
    """y ~ N(X b, 1), b ~ N(0, prior_sd^2 I)."""

    prior_family = "conjugate"
    discrete_size = 0
    predictor_names: list = []

    def __init__(self, X, y, prior_sd=3.0):
        self.X, self.y = X, y
        self.prior_precision = 1.0 / prior_sd**2
        self.dimension = X.shape[1]
        self.layout = ParamLayout([ParamBlock("b", (self.dimension,))])

    def value_and_gradient(self, v, z=None):
        resid = self.y - self.X @ v
        value = -0.5 * resid @ resid - 0.5 * self.prior_precision * v @ v
        return float(value), self.X.T @ resid - self.prior_precision * v

    def constrained(self, draws, z_draws=None):
        return self.layout.constrain(draws)

    def posterior(self):
        cov = np.linalg.inv(self.X.T @ self.X + self.prior_precision * np.eye(self.dimension))
        return cov @ self.X.T @ self.y, cov


@pytest.mark.parametrize("seed", range(10))
def test_conjugate_regression_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, 2))
    y = X @ np.array([1.0, -0.5]) + rng.standard_normal(50)
    target = ConjugateRegression(X, y)
    mean, cov = target.posterior()

    samples = nuts_sample(target, SamplerConfig(chains=4, warmup=500, draws=1000, seed=seed))
    draws = samples.draws
    flat = draws.reshape(-1, 2)
    for k in range(2):
        ess = float(az.ess(draws[:, :, k], method="mean"))
        mcse = np.sqrt(cov[k, k] / ess)
        assert abs(flat[:, k].mean() - mean[k]) < 3 * mcse
        assert float(az.rhat(draws[:, :, k], method="rank")) <= 1.05
    assert np.allclose(np.cov(flat, rowvar=False), cov, rtol=0.15, atol=0.1 * np.abs(cov).max())


def test_hdi_matches_exhaustive_windows():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(10, 200))
        x = rng.standard_t(3, size=n)
        mass = float(rng.uniform(0.5, 0.99))
        xs = np.sort(x)
        k = int(np.ceil(mass * n - 1e-9))
        widths = [xs[i + k - 1] - xs[i] for i in range(n - k + 1)]
        best = int(np.argmin(widths))
        assert hdi(x, mass) == (xs[best], xs[best + k - 1])


def _bus_dataset(seed: int) -> EnvironmentDataset:
    rng = np.random.default_rng(seed)
    return standardize(generate_bus_data(random_bus_stops(2, rng), 500, rng))


def test_bus_reproduction_within_budget():
    started = time.perf_counter()

    cfg = DecisionConfig(hdi_threshold=0.85)
    exact, pooling = 0, []
    for seed in range(20):
        dataset = _bus_dataset(seed)
        density = build_density(ModelSpec(), dataset)
        samples = nuts_sample(density, BUS_SAMPLER.copy(update={"seed": seed}))
        report = decide(samples, cfg, target_sd=dataset.target_sd())
        exact += set(report.selected) == {"x3", "x4"}
        pooling.append([report.predictors[3].pooling_factor, report.predictors[4].pooling_factor])
    noncentered_seconds = time.perf_counter() - started

    for seed in range(3):
        dataset = _bus_dataset(seed)
        density = build_density(ModelSpec(prior_family="spike-and-slab"), dataset)
        samples = nuts_sample(density, BUS_SAMPLER.copy(update={"seed": seed}))
        inclusion = samples.discrete_draws.mean(axis=(0, 1))
        assert inclusion[3:].min() >= 0.95
        assert inclusion[:3].max() <= 0.10

    icp_hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        dataset = generate_bus_data(random_bus_stops(2, rng), 500, rng)
        icp_hits += icp_fit(dataset).intersection_names() == ["x3"]
    elapsed = time.perf_counter() - started

    assert exact >= 16
    assert np.median(np.asarray(pooling), axis=0).min() >= 0.90
    assert icp_hits > 10
    assert elapsed <= BUS_BUDGET_SECONDS, f"noncentered {noncentered_seconds:.0f}s, total {elapsed:.0f}s"


def _gaussian_evidence(x, y, slab_variance, scale_of_scale, sigma_scale):
    """log p(y) for y ~ N(b x, sigma^2), b ~ N(0, v(s)), s ~ HalfCauchy, sigma ~ HalfCauchy.

    Both scales are integrated on a log grid; b is integrated in closed form.
    """
    u = np.linspace(-14.0, 10.0, 961)
    du = u[1] - u[0]
    u_sigma, u_s = np.meshgrid(u, u, indexing="ij")
    var = np.exp(2.0 * u_sigma)
    v = slab_variance(np.exp(u_s))
    xx, xy, yy, n = x @ x, x @ y, y @ y, len(y)
    logdet = n * np.log(var) + np.log1p(v * xx / var)
    quad = (yy - v * xy**2 / (var + v * xx)) / var
    loglik = -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)
    prior_sigma = stats.halfcauchy.logpdf(np.exp(u_sigma), scale=sigma_scale) + u_sigma
    prior_s = stats.halfcauchy.logpdf(np.exp(u_s), scale=scale_of_scale) + u_s
    return float(logsumexp(loglik + prior_sigma + prior_s) + 2.0 * np.log(du))


def test_gibbs_inclusion_matches_enumeration():
    x = np.array([1.0, -0.6, 1.8, 0.3, -1.2])
    y = np.array([0.9, -0.2, 0.4, 0.5, -0.9])
    hyper = Hyperparams(mu_sd=1.0, slab_sd_scale=1.0, spike_scale_scale=0.1, sigma_obs_scale=1.0)
    log_slab = _gaussian_evidence(x, y, lambda tau: hyper.mu_sd**2 + tau**2, hyper.slab_sd_scale, hyper.sigma_obs_scale)
    log_spike = _gaussian_evidence(x, y, lambda ss: ss**2, hyper.spike_scale_scale, hyper.sigma_obs_scale)
    # Uniform p_slab gives prior inclusion 1/2, so the posterior odds are the evidence ratio.
    expected = float(np.exp(log_slab - np.logaddexp(log_slab, log_spike)))

    dataset = EnvironmentDataset(X=[x[:, None]], y=[y], predictor_names=["a"])
    density = build_density(ModelSpec(prior_family="spike-and-slab", hyperparams=hyper), dataset)
    cfg = SamplerConfig(chains=4, warmup=1000, draws=4000, target_accept=0.9, seed=17)
    samples = nuts_within_gibbs(density, cfg)
    assert samples.discrete_draws.mean() == pytest.approx(expected, abs=0.05)


def test_icp_coverage_on_invariant_scms():
    covered = 0
    for rep in range(200):
        rng = np.random.default_rng([7, rep])
        dag = graph_scm.random_dag(4, 0.5, rng)
        scm = graph_scm.random_lganm(dag, 1.0, 5.0, 0.0, 0.3, rng)
        target = int(rng.integers(4))
        specs = graph_scm.make_benchmark_environments(scm, 2, 500, target, rng)
        dataset = graph_scm.sample_environments(scm, specs, target, rng)
        result = icp_fit(dataset, alpha=0.05)
        accepted = [set(s) for s in result.accepted_sets]
        if accepted:
            assert set(result.intersection) == set.intersection(*accepted)
        columns = graph_scm.predictor_nodes(4, target)
        estimate = {columns[i] for i in result.intersection}
        covered += estimate <= graph_scm.parents(dag, target)
    assert covered / 200 >= 0.90


def test_null_target_selects_nothing():
    empty = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = [rng.standard_normal((200, 3)) + e for e in range(2)]
        y = [rng.standard_normal(200) for _ in range(2)]
        dataset = standardize(EnvironmentDataset(X=X, y=y, predictor_names=["a", "b", "c"]))
        density = build_density(ModelSpec(), dataset)
        samples = nuts_sample(density, SamplerConfig(chains=2, warmup=300, draws=300, seed=seed))
        empty += not decide(samples, DecisionConfig()).selected
    assert empty >= 48


def test_grid_trend_small_graphs():
    cfg = BenchConfig(nodes_list=[4], samples_list=[2000], envs_list=[3], n_dags=100, seed=1)
    summary = run_grid(cfg, threads=4).summary.set_index("method")
    bhip, icp = summary.loc["bhip-noncentered", "f1"], summary.loc["icp", "f1"]
    assert bhip > icp
    assert abs(bhip - 0.6411) <= 0.15


def test_grid_trend_few_samples():
    cfg = BenchConfig(nodes_list=[5], samples_list=[500], envs_list=[2], n_dags=100, seed=2)
    summary = run_grid(cfg, threads=4).summary.set_index("method")
    assert summary.loc["bhip-noncentered", "f1"] >= 1.5 * summary.loc["icp", "f1"]


def test_timing_growth():
    result = run_timing(list(range(6, 15)), samples_per_env=200, envs=2, reps=3, seed=0)
    assert result.icp_log_slope == pytest.approx(np.log(2.0), rel=0.3)
    medians = result.summary.set_index(["method", "nodes"])["median"]
    assert medians[("bhip-noncentered", 14)] <= 8 * medians[("bhip-noncentered", 6)]
