import json

import numpy as np
import pytest

from src.models import BusStopParams
from src.scenarios import (
    BUS_PARENTS,
    ScenarioError,
    generate_bus_data,
    load_bus_stops,
    random_bus_stops,
    stops_to_dict,
)


def _partial_corr(a: np.ndarray, b: np.ndarray, controls: np.ndarray) -> float:
    design = np.column_stack([np.ones(len(a)), controls])
    ra = a - design @ np.linalg.lstsq(design, a, rcond=None)[0]
    rb = b - design @ np.linalg.lstsq(design, b, rcond=None)[0]
    return float(np.corrcoef(ra, rb)[0, 1])


def test_needs_two_stops(rng):
    with pytest.raises(ScenarioError):
        generate_bus_data([BusStopParams()], 10, rng)
    with pytest.raises(ScenarioError):
        generate_bus_data([BusStopParams(), BusStopParams()], 0, rng)


def test_noiseless_identity(rng):
    params = BusStopParams(
        daily_amplitude=0.0, weekly_amplitude=0.0, noise_sd=0.0, boarding_coeff=1.0, alighting_coeff=1.0
    )
    dataset = generate_bus_data([params, params], 200, rng)
    for xe, ye in zip(dataset.X, dataset.y):
        assert np.array_equal(ye, xe[:, 3] + xe[:, 4])


def test_column_structure(rng):
    dataset = generate_bus_data(random_bus_stops(3, rng), 300, rng)
    assert dataset.predictor_names == ["x0", "x1", "x2", "x3", "x4"]
    assert dataset.n_environments == 3
    X, _ = dataset.pooled()
    assert np.all((X[:, 0] >= 0) & (X[:, 0] < 24))
    assert set(np.unique(X[:, 1])) <= set(range(7))
    assert np.array_equal(X[:, 3], np.round(X[:, 3]))
    assert np.array_equal(X[:, 4], np.round(X[:, 4]))
    assert np.all(X[:, 3:5] >= 0)
    # traffic is continuous
    assert len(np.unique(X[:, 2])) == len(X)


def test_counts_follow_weekly_cycle(rng):
    params = BusStopParams(daily_amplitude=0.0, weekly_amplitude=0.5, peak_day=4)
    dataset = generate_bus_data([params, params], 20_000, rng)
    X, _ = dataset.pooled()
    peak, trough = X[:, 1] == 4, np.isin(X[:, 1], [0, 1])
    for col, base in ((3, params.boarding_base_rate), (4, params.alighting_base_rate)):
        assert X[peak, col].mean() == pytest.approx(1.5 * base, rel=0.05)
        assert X[trough, col].mean() < 0.7 * base


def test_per_stop_ols_recovers_shared_coefficients():
    rng = np.random.default_rng(2024)
    dataset = generate_bus_data(random_bus_stops(2, rng), 500, rng)
    for coef, se in dataset.per_environment_ols(columns=[3, 4]):
        assert abs(coef[0] - 2.0) < 4 * se[0]
        assert abs(coef[1] - 1.0) < 4 * se[1]


def test_traffic_is_not_a_parent():
    rng = np.random.default_rng(11)
    dataset = generate_bus_data(random_bus_stops(4, rng), 25_000, rng)
    X, y = dataset.pooled()
    assert abs(_partial_corr(y, X[:, 2], X[:, 3:5])) < 0.02


def test_deterministic_for_seed():
    a = generate_bus_data(random_bus_stops(2, np.random.default_rng(1)), 50, np.random.default_rng(2))
    b = generate_bus_data(random_bus_stops(2, np.random.default_rng(1)), 50, np.random.default_rng(2))
    assert all(np.array_equal(x, z) for x, z in zip(a.X, b.X))


class TestStopParameters:
    def test_shared_coefficients_by_default(self, rng):
        stops = random_bus_stops(5, rng)
        assert len({(s.boarding_coeff, s.alighting_coeff) for s in stops}) == 1
        assert len({s.peak_hour for s in stops}) == 5

    def test_per_stop_coefficients(self, rng):
        stops = random_bus_stops(5, rng, per_stop_coefficients=True)
        assert len({s.boarding_coeff for s in stops}) == 5

    def test_load_round_trip(self, tmp_path, rng):
        stops = random_bus_stops(3, rng)
        path = tmp_path / "stops.json"
        path.write_text(json.dumps(stops_to_dict(stops)))
        assert load_bus_stops(path) == stops

    def test_load_plain_list(self, tmp_path):
        path = tmp_path / "stops.json"
        path.write_text(json.dumps([{"peak_hour": 7.5}, {"peak_hour": 17.0, "noise_sd": 2.0}]))
        stops = load_bus_stops(path)
        assert [s.peak_hour for s in stops] == [7.5, 17.0]
        assert stops[1].noise_sd == 2.0

    def test_load_rejects_bad_values(self, tmp_path):
        path = tmp_path / "stops.json"
        path.write_text(json.dumps([{"boarding_base_rate": -1.0}]))
        with pytest.raises(ScenarioError):
            load_bus_stops(path)
        with pytest.raises(ScenarioError):
            load_bus_stops(tmp_path / "missing.json")

    def test_truth_names_parents(self, rng):
        payload = stops_to_dict(random_bus_stops(2, rng))
        assert payload["true_parents"] == sorted(BUS_PARENTS) == ["x3", "x4"]
