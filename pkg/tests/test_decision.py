from dataclasses import replace

import numpy as np
import pytest

from conftest import make_linear_dataset
from src.data import standardize
from src.decision import (
    DecisionError,
    decide,
    hdi,
    hdi_rope_fraction,
    plot_data,
    pooling_factor,
    pooling_factor_from_moments,
    rope,
)
from src.model import build_density
from src.models import DecisionConfig, ModelSpec
from src.sampler import PosteriorSamples, nuts_sample

CHAINS, DRAWS = 2, 400


def crafted_samples(density, blocks, z=None) -> PosteriorSamples:
    """PosteriorSamples from unconstrained block values shaped [chains, draws, *block]."""
    parts = [np.asarray(blocks[b.name], dtype=float).reshape(CHAINS, DRAWS, -1) for b in density.layout.blocks]
    return PosteriorSamples(draws=np.concatenate(parts, axis=2), density=density, discrete_draws=z)


def _noncentered_samples(n_envs=3, mu=(3.0, 0.0), tau=(0.01, 0.01), eta=None, seed=0):
    rng = np.random.default_rng(seed)
    dataset = make_linear_dataset(rng, n_envs=n_envs, n=20)
    density = build_density(ModelSpec(), dataset)
    lead = (CHAINS, DRAWS)
    if eta is None:
        eta = rng.standard_normal(lead + (n_envs, 2))
    blocks = {
        "mu": np.asarray(mu) + 0.05 * rng.standard_normal(lead + (2,)),
        "tau": np.broadcast_to(np.log(tau), lead + (2,)),
        "beta_decentered": np.broadcast_to(eta, lead + (n_envs, 2)),
        "sigma_obs": np.zeros(lead),
    }
    return crafted_samples(density, blocks)


class TestHdi:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        x = rng.gamma(2.0, size=301)
        xs = np.sort(x)
        k = int(np.ceil(0.9 * xs.size))
        widths = [xs[i + k - 1] - xs[i] for i in range(xs.size - k + 1)]
        best = int(np.argmin(widths))
        assert hdi(x, 0.9) == (xs[best], xs[best + k - 1])

    def test_normal_quantiles(self):
        x = np.random.default_rng(0).standard_normal(200_000)
        lower, upper = hdi(x, 0.95)
        assert lower == pytest.approx(-1.96, abs=0.03)
        assert upper == pytest.approx(1.96, abs=0.03)

    def test_constant_draws(self):
        assert hdi(np.full(50, 2.5), 0.9) == (2.5, 2.5)

    def test_invalid_arguments(self):
        with pytest.raises(DecisionError):
            hdi(np.arange(9.0), 0.9)
        with pytest.raises(DecisionError):
            hdi(np.arange(20.0), 1.0)


class TestRope:
    def test_interval(self):
        assert rope(DecisionConfig(), 2.0) == pytest.approx((-0.2, 0.2))
        assert rope(DecisionConfig(rope_multiplier=0.5), 1.0) == pytest.approx((-0.5, 0.5))

    def test_non_positive_scale(self):
        with pytest.raises(DecisionError):
            rope(DecisionConfig(), 0.0)

    def test_fraction_extremes(self):
        assert hdi_rope_fraction(np.full(100, 5.0), (-0.1, 0.1), 0.95) == 1.0
        assert hdi_rope_fraction(np.zeros(100), (-0.1, 0.1), 0.95) == 0.0

    def test_fraction_counts_window_draws(self):
        x = np.concatenate([np.linspace(-0.05, 0.05, 50), np.linspace(1.0, 1.1, 50)])
        assert hdi_rope_fraction(x, (-0.1, 0.1), 0.5) in (0.0, 1.0)
        assert hdi_rope_fraction(x, (-0.1, 0.1), 0.99) == pytest.approx(0.5, abs=0.02)


class TestPooling:
    def test_no_spread_is_complete_pooling(self):
        mu = np.random.default_rng(0).standard_normal(100)
        assert pooling_factor(mu, np.tile(mu[:, None], (1, 3))) == 1.0

    def test_iid_deviations_pool_completely(self):
        rng = np.random.default_rng(1)
        mu = rng.standard_normal(4000)
        beta = mu[:, None] + 0.3 * rng.standard_normal((4000, 4))
        assert pooling_factor(mu, beta) == pytest.approx(1.0, abs=0.01)

    def test_fixed_offsets_do_not_pool(self):
        rng = np.random.default_rng(2)
        mu = rng.standard_normal(4000)
        beta = mu[:, None] + np.array([-2.0, 0.0, 2.0]) + 0.01 * rng.standard_normal((4000, 3))
        assert pooling_factor(mu, beta) == pytest.approx(0.0, abs=0.01)

    def test_lower_bound_from_moments(self):
        assert pooling_factor_from_moments(2.0, 1.0) == -1.0
        assert pooling_factor_from_moments(0.0, 0.0) == 1.0
        with pytest.raises(DecisionError):
            pooling_factor_from_moments(1.0, 0.0)

    def test_shape_errors(self):
        mu = np.zeros(20)
        with pytest.raises(DecisionError):
            pooling_factor(mu, np.zeros((20, 1)))
        with pytest.raises(DecisionError):
            pooling_factor(mu, np.zeros((19, 2)))


class TestDecide:
    def test_selects_invariant_nonzero_predictor(self):
        report = decide(_noncentered_samples(), DecisionConfig())
        assert report.selected == ["x0"]
        x0, x1 = report.predictors
        assert x0.hdi_frac_global == 1.0
        assert x0.hdi_frac_local_min == 1.0
        assert x0.pooling_factor > 0.85
        assert x1.hdi_frac_global < 0.95
        assert len(x0.hdi_frac_local) == 3
        assert report.selected_indices() == [0]

    def test_heterogeneous_effect_is_not_selected(self):
        # Environment effects of x0 sit near 0, 3 and 6.
        eta = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        report = decide(_noncentered_samples(tau=(3.0, 0.01), eta=eta), DecisionConfig())
        assert "x0" not in report.selected
        assert report.predictors[0].hdi_frac_local_min < 0.5
        assert report.predictors[0].pooling_factor < 0.1

    def test_stricter_thresholds_select_subsets(self):
        samples = _noncentered_samples(mu=(0.25, 3.0), tau=(0.01, 0.01), seed=3)
        previous = None
        for threshold in (0.5, 0.8, 0.95, 0.99):
            selected = set(decide(samples, DecisionConfig(hdi_threshold=threshold)).selected)
            if previous is not None:
                assert selected <= previous
            previous = selected

    def test_pooling_threshold_sweep_is_monotone(self):
        rng = np.random.default_rng(5)
        eta = rng.standard_normal((CHAINS, DRAWS, 3, 2))
        # x0 carries a fixed environment offset, pooling near 0.5; x1 pools almost fully.
        eta[..., 0] += np.array([-1.0, 0.0, 1.0])
        samples = _noncentered_samples(mu=(3.0, 2.0), tau=(0.01, 0.01), eta=eta, seed=5)
        sweep = [
            set(decide(samples, DecisionConfig(pooling_threshold=t)).selected)
            for t in (0.05, 0.2, 0.5, 0.8, 0.95)
        ]
        assert sweep[0] == {"x0", "x1"}
        assert sweep[-1] == {"x1"}
        for looser, stricter in zip(sweep, sweep[1:]):
            assert stricter <= looser

    def test_single_environment_skips_pooling(self):
        report = decide(_noncentered_samples(n_envs=1), DecisionConfig())
        assert all(p.pooling_factor is None for p in report.predictors)
        assert report.selected == ["x0"]

    def test_rope_from_target_scale(self):
        report = decide(_noncentered_samples(), DecisionConfig(), target_sd=40.0)
        # ROPE of +-4 swallows an effect of 3.
        assert report.selected == []
        assert report.predictors[0].rope_halfwidth == pytest.approx(4.0)

    def test_spike_and_slab_inclusion(self, rng):
        dataset = make_linear_dataset(rng, n_envs=2, n=20)
        density = build_density(ModelSpec(prior_family="spike-and-slab"), dataset)
        lead = (CHAINS, DRAWS)
        blocks = {
            "p_slab": np.zeros(lead + (2,)),
            "tau": np.full(lead + (2,), np.log(0.01)),
            "mu": np.array([2.0, 0.0]) + 0.05 * rng.standard_normal(lead + (2,)),
            "slabBeta": np.zeros(lead + (2, 2)),
            "spikeBeta": np.zeros(lead + (2, 2)),
            "spike_scale": np.zeros(lead + (2,)),
            "sigma_obs": np.zeros(lead),
        }
        blocks["slabBeta"] = blocks["mu"][:, :, None, :] + 0.01 * rng.standard_normal(lead + (2, 2))
        z = np.zeros(lead + (2,), dtype=int)
        z[..., 0] = 1
        z[:, :100, 1] = 1
        report = decide(crafted_samples(density, blocks, z), DecisionConfig())
        assert report.prior_family == "spike-and-slab"
        assert report.predictors[0].inclusion_prob == 1.0
        assert report.predictors[1].inclusion_prob == pytest.approx(0.25)
        assert report.selected_by_z == ["x0"]
        assert report.selected == ["x0"]

    def test_spike_draws_do_not_select(self, rng):
        dataset = make_linear_dataset(rng, n_envs=2, n=20)
        density = build_density(ModelSpec(prior_family="spike-and-slab"), dataset)
        lead = (CHAINS, DRAWS)
        mu = np.array([2.0, 2.0]) + 0.05 * rng.standard_normal(lead + (2,))
        blocks = {
            "p_slab": np.zeros(lead + (2,)),
            "tau": np.full(lead + (2,), np.log(0.01)),
            "mu": mu,
            "slabBeta": mu[:, :, None, :] + 0.01 * rng.standard_normal(lead + (2, 2)),
            "spikeBeta": 0.001 * rng.standard_normal(lead + (2, 2)),
            "spike_scale": np.full(lead + (2,), np.log(0.01)),
            "sigma_obs": np.zeros(lead),
        }
        # x1 keeps a slab far from zero but spends every draw in the spike.
        z = np.zeros(lead + (2,), dtype=int)
        z[..., 0] = 1
        report = decide(crafted_samples(density, blocks, z), DecisionConfig())
        assert report.predictors[1].inclusion_prob == 0.0
        assert report.predictors[1].hdi_frac_local_min == 0.0
        assert report.selected == ["x0"]
        assert report.selected_by_z == ["x0"]

    def test_horseshoe_local_rule(self, rng):
        dataset = make_linear_dataset(rng, n_envs=2, n=20)
        density = build_density(ModelSpec(prior_family="horseshoe"), dataset)
        lead = (CHAINS, DRAWS)
        blocks = {
            "lambda_local": np.zeros(lead + (2,)),
            "tau_global": np.zeros(lead),
            "beta": np.array([1.5, 0.0]) + 0.02 * rng.standard_normal(lead + (2, 2)),
            "sigma_obs": np.zeros(lead),
        }
        report = decide(crafted_samples(density, blocks), DecisionConfig())
        assert report.selected == ["x0"]
        assert report.predictors[0].hdi_frac_global is None
        assert report.predictors[0].lambda_mean == pytest.approx(1.0)


def test_plot_data_rows():
    frame = plot_data(_noncentered_samples(), DecisionConfig())
    # one global row and three local rows per predictor
    assert len(frame) == 8
    assert set(frame["parameter"]) >= {"mu[0]", "beta[2,1]"}
    assert (frame["hdi_lower"] <= frame["hdi_upper"]).all()
    assert (frame["rope_upper"] == -frame["rope_lower"]).all()


def test_selection_is_scale_equivariant(quick_sampler):
    base = make_linear_dataset(np.random.default_rng(21), n_envs=3, n=60)
    fits = {}
    for c in (1.0, 10.0):
        scaled = standardize(replace(base, y=[c * ye for ye in base.y]))
        samples = nuts_sample(build_density(ModelSpec(), scaled), quick_sampler)
        fits[c] = (scaled, decide(samples, DecisionConfig(), target_sd=scaled.target_sd()))
    (small, small_report), (large, large_report) = fits[1.0], fits[10.0]
    assert all(np.allclose(a, b) for a, b in zip(small.y, large.y))
    assert large.standardization.target_sd == pytest.approx(10.0 * small.standardization.target_sd)
    assert small_report.selected == large_report.selected
    assert "x1" not in small_report.selected
