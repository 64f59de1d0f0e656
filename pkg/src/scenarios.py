"""Bus-stop dwelling simulator.

Each stop is one environment. Time of day (x0) and day of week (x1) drive a
traffic state (x2) and Poisson boarding/alighting counts (x3, x4); the dwell
outcome y depends on x3 and x4 only.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np
from pydantic.v1 import ValidationError, parse_obj_as

from .data import EnvironmentDataset
from .models import BusStopParams

logger = logging.getLogger("scenarios")

BUS_PREDICTORS = ["x0", "x1", "x2", "x3", "x4"]
BUS_PARENTS = frozenset({"x3", "x4"})
RATE_FLOOR = 1e-3


class ScenarioError(ValueError):
    """Raised for invalid scenario arguments or parameter files."""


def _daily(hours: np.ndarray, peak_hour: float) -> np.ndarray:
    return np.cos(2.0 * np.pi * (hours - peak_hour) / 24.0)


def _weekly(days: np.ndarray, peak_day: int) -> np.ndarray:
    return np.cos(2.0 * np.pi * (days - peak_day) / 7.0)


def simulate_stop(params: BusStopParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of (x0, x1, x2, x3, x4, y) for one stop."""
    t = rng.uniform(0.0, params.horizon_days * 24.0, size=n)
    hour = np.mod(t, 24.0)
    day = np.mod(np.floor(t / 24.0), 7.0)

    daily = _daily(hour, params.peak_hour)
    weekly = _weekly(day, params.peak_day)

    traffic = (
        params.traffic_base * (1.0 + params.daily_amplitude * daily)
        + params.traffic_base * params.weekly_amplitude * weekly
        + params.traffic_noise_sd * rng.standard_normal(n)
    )
    # Both counts follow the daily and weekly cycles; y sees only the counts.
    seasonal = 1.0 + params.daily_amplitude * daily + params.weekly_amplitude * weekly
    boarding_rate = np.maximum(params.boarding_base_rate * seasonal, RATE_FLOOR)
    alighting_rate = np.maximum(params.alighting_base_rate * seasonal, RATE_FLOOR)
    boarding = rng.poisson(boarding_rate).astype(float)
    alighting = rng.poisson(alighting_rate).astype(float)

    y = (
        params.boarding_coeff * boarding
        + params.alighting_coeff * alighting
        + params.noise_sd * rng.standard_normal(n)
    )
    return np.column_stack([hour, day, traffic, boarding, alighting, y])


def generate_bus_data(
    stops: Sequence[BusStopParams], n_per_stop: int, rng: np.random.Generator
) -> EnvironmentDataset:
    if len(stops) < 2:
        raise ScenarioError(f"at least 2 stops are required, got {len(stops)}")
    if n_per_stop < 1:
        raise ScenarioError(f"n_per_stop must be >= 1, got {n_per_stop}")

    streams = rng.spawn(len(stops))
    blocks = [simulate_stop(params, n_per_stop, stream) for params, stream in zip(stops, streams)]
    logger.info("Bus data generated | stops=%d | n_per_stop=%d", len(stops), n_per_stop)
    return EnvironmentDataset(
        X=[b[:, :5] for b in blocks],
        y=[b[:, 5] for b in blocks],
        predictor_names=list(BUS_PREDICTORS),
        target_name="y",
        target_kind="continuous",
    )


def random_bus_stops(
    n_stops: int, rng: np.random.Generator, per_stop_coefficients: bool = False
) -> List[BusStopParams]:
    """Randomized stop profiles; coefficients of y are shared unless asked otherwise."""
    if n_stops < 1:
        raise ScenarioError(f"n_stops must be >= 1, got {n_stops}")
    defaults = BusStopParams()
    stops = []
    for _ in range(n_stops):
        fields = dict(
            peak_hour=float(rng.uniform(6.0, 20.0)),
            daily_amplitude=float(rng.uniform(0.2, 0.8)),
            peak_day=int(rng.integers(0, 7)),
            weekly_amplitude=float(rng.uniform(0.1, 0.5)),
            boarding_base_rate=float(rng.uniform(3.0, 15.0)),
            alighting_base_rate=float(rng.uniform(2.0, 12.0)),
            traffic_base=float(rng.uniform(0.5, 2.0)),
        )
        if per_stop_coefficients:
            fields["boarding_coeff"] = float(rng.uniform(0.5, 3.0))
            fields["alighting_coeff"] = float(rng.uniform(0.5, 3.0))
        else:
            fields["boarding_coeff"] = defaults.boarding_coeff
            fields["alighting_coeff"] = defaults.alighting_coeff
        stops.append(BusStopParams(**fields))
    return stops


def load_bus_stops(path: Path) -> List[BusStopParams]:
    """Read a JSON list of stop parameter objects (or {"stops": [...]})."""
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ScenarioError(f"stop parameter file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"stop parameter file is not valid JSON: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get("stops", [])
    try:
        return parse_obj_as(List[BusStopParams], payload)
    except ValidationError as exc:
        raise ScenarioError(f"invalid stop parameters in {path}: {exc}") from exc


def stops_to_dict(stops: Sequence[BusStopParams]) -> dict:
    return {
        "stops": [s.dict() for s in stops],
        "true_parents": sorted(BUS_PARENTS),
        "predictor_names": list(BUS_PREDICTORS),
    }
