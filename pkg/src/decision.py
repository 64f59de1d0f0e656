"""Posterior summaries and parent selection: HDI, ROPE, pooling and inclusion."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .models import DecisionConfig, DecisionReport, PredictorDecision
from .sampler import PosteriorSamples

logger = logging.getLogger("decision")

MIN_HDI_SAMPLES = 10
DEGENERATE_VARIANCE = 1e-12


class DecisionError(ValueError):
    """Raised for too few samples, bad ROPE scales or degenerate pooling."""


@dataclass(frozen=True)
class SelectionThresholds:
    hdi_mass: float
    hdi_threshold: float
    pooling_threshold: float
    z_threshold: float


def _get_thresholds(cfg: DecisionConfig) -> SelectionThresholds:
    return SelectionThresholds(
        hdi_mass=cfg.hdi_mass,
        hdi_threshold=cfg.hdi_threshold,
        pooling_threshold=cfg.pooling_threshold,
        z_threshold=cfg.z_threshold,
    )


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------


def _hdi_window(samples: np.ndarray, mass: float) -> Tuple[np.ndarray, int, int]:
    """Sorted draws plus start index and length of the narrowest window."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < MIN_HDI_SAMPLES:
        raise DecisionError(f"HDI needs at least {MIN_HDI_SAMPLES} samples, got {n}")
    if not 0.0 < mass < 1.0:
        raise DecisionError(f"HDI mass must be in (0, 1), got {mass}")
    k = min(n, max(1, math.ceil(mass * n - 1e-9)))
    widths = x[k - 1 :] - x[: n - k + 1]
    # argmin keeps the first minimum, i.e. the lowest lower endpoint.
    start = int(np.argmin(widths))
    return x, start, k


def hdi(samples: np.ndarray, mass: float) -> Tuple[float, float]:
    x, start, k = _hdi_window(samples, mass)
    return float(x[start]), float(x[start + k - 1])


def rope(cfg: DecisionConfig, sd: float) -> Tuple[float, float]:
    if not sd > 0:
        raise DecisionError(f"ROPE scale must be positive, got {sd}")
    epsilon = cfg.rope_multiplier * float(sd)
    return -epsilon, epsilon


def hdi_rope_fraction(samples: np.ndarray, rope_interval: Tuple[float, float], mass: float) -> float:
    """Share of the draws inside the HDI window that fall outside the ROPE."""
    x, start, k = _hdi_window(samples, mass)
    window = x[start : start + k]
    lower, upper = rope_interval
    return float(np.mean((window < lower) | (window > upper)))


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def pooling_factor_from_moments(between_var: float, within_var: float) -> float:
    """1 - (variance of mean deviations) / (mean of per-draw deviation variances)."""
    if between_var < DEGENERATE_VARIANCE and within_var < DEGENERATE_VARIANCE:
        return 1.0
    if within_var < DEGENERATE_VARIANCE:
        raise DecisionError("pooling factor is undefined: deviations have no per-draw spread")
    return float(1.0 - between_var / within_var)


def pooling_factor(mu_draws: np.ndarray, beta_draws: np.ndarray) -> float:
    mu = np.asarray(mu_draws, dtype=float).ravel()
    beta = np.asarray(beta_draws, dtype=float)
    if beta.ndim != 2 or beta.shape[0] != mu.size:
        raise DecisionError(f"beta draws must be [S x E] with S={mu.size}, got {beta.shape}")
    if beta.shape[1] < 2:
        raise DecisionError("pooling factor needs at least 2 environments")
    if mu.size < MIN_HDI_SAMPLES:
        raise DecisionError(f"pooling factor needs at least {MIN_HDI_SAMPLES} draws, got {mu.size}")
    delta = beta - mu[:, None]
    between = float(np.var(delta.mean(axis=0), ddof=1))
    within = float(np.mean(np.var(delta, axis=1, ddof=1)))
    return pooling_factor_from_moments(between, within)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def _rope_for(draws: np.ndarray, cfg: DecisionConfig, target_sd: float) -> Tuple[float, float]:
    if cfg.rope_mode == "posterior-sd":
        return rope(cfg, float(np.std(draws)))
    return rope(cfg, target_sd)


def _pooled_draws(samples: PosteriorSamples) -> Dict[str, np.ndarray]:
    """Constrained blocks with chains folded into one draw axis."""
    return {
        name: values.reshape((-1,) + values.shape[2:]) for name, values in samples.constrained().items()
    }


def _required(blocks: Dict[str, np.ndarray], *names: str) -> List[np.ndarray]:
    missing = [n for n in names if n not in blocks]
    if missing:
        raise DecisionError(f"posterior is missing parameter blocks: {', '.join(missing)}")
    return [blocks[n] for n in names]


def _local_fractions(beta: np.ndarray, d: int, cfg: DecisionConfig, target_sd: float) -> List[float]:
    return [
        hdi_rope_fraction(beta[:, e, d], _rope_for(beta[:, e, d], cfg, target_sd), cfg.hdi_mass)
        for e in range(beta.shape[1])
    ]


def decide(samples: PosteriorSamples, cfg: DecisionConfig, target_sd: float = 1.0) -> DecisionReport:
    family = samples.density.prior_family
    thresholds = _get_thresholds(cfg)
    blocks = _pooled_draws(samples)
    names = samples.density.predictor_names
    predictors: List[PredictorDecision] = []
    selected_by_z: Optional[List[str]] = None

    if family == "horseshoe":
        beta, lam = _required(blocks, "beta", "lambda_local")
        for d, name in enumerate(names):
            local = _local_fractions(beta, d, cfg, target_sd)
            # Local-only rule: the horseshoe has no global mean to pool toward.
            selected = min(local) > thresholds.hdi_threshold
            predictors.append(
                PredictorDecision(
                    index=d,
                    name=name,
                    hdi_frac_local=local,
                    hdi_frac_local_min=min(local),
                    lambda_mean=float(np.mean(lam[:, d])),
                    rope_halfwidth=_rope_for(beta[:, :, d], cfg, target_sd)[1],
                    selected=selected,
                )
            )
    else:
        if family == "spike-and-slab":
            # Effective beta: slab where z = 1, spike where z = 0.
            mu, beta, z = _required(blocks, "mu", "beta", "z")
        else:
            mu, beta = _required(blocks, "mu", "beta")
            z = None
        n_envs = beta.shape[1]
        if n_envs < 2:
            logger.warning("Pooling factor skipped | environments=%d", n_envs)

        for d, name in enumerate(names):
            rope_global = _rope_for(mu[:, d], cfg, target_sd)
            global_frac = hdi_rope_fraction(mu[:, d], rope_global, cfg.hdi_mass)
            local = _local_fractions(beta, d, cfg, target_sd)
            gamma = pooling_factor(mu[:, d], beta[:, :, d]) if n_envs >= 2 else None
            selected = (
                global_frac > thresholds.hdi_threshold
                and min(local) > thresholds.hdi_threshold
                and (gamma is None or gamma > thresholds.pooling_threshold)
                and (z is None or float(np.mean(z[:, d])) > thresholds.z_threshold)
            )
            predictors.append(
                PredictorDecision(
                    index=d,
                    name=name,
                    hdi_frac_global=global_frac,
                    hdi_frac_local=local,
                    hdi_frac_local_min=min(local),
                    pooling_factor=gamma,
                    inclusion_prob=float(np.mean(z[:, d])) if z is not None else None,
                    rope_halfwidth=rope_global[1],
                    selected=selected,
                )
            )
        if z is not None:
            selected_by_z = [
                p.name for p in predictors if p.inclusion_prob > thresholds.z_threshold
            ]

    report = DecisionReport(
        prior_family=family,
        target_name=samples.density.target_name,
        predictors=predictors,
        selected=[p.name for p in predictors if p.selected],
        selected_by_z=selected_by_z,
        thresholds=cfg,
    )
    logger.info(
        "Decision made | family=%s | selected=%s | selected_by_z=%s",
        family,
        report.selected,
        report.selected_by_z,
    )
    return report


def plot_data(samples: PosteriorSamples, cfg: DecisionConfig, target_sd: float = 1.0) -> pd.DataFrame:
    """Per-parameter interval and ROPE endpoints for external plotting."""
    blocks = _pooled_draws(samples)
    local_block = "beta" if "beta" in blocks else "slabBeta"
    rows = []

    def _row(parameter: str, predictor: str, draws: np.ndarray) -> None:
        lower, upper = hdi(draws, cfg.hdi_mass)
        rope_lower, rope_upper = _rope_for(draws, cfg, target_sd)
        rows.append(
            {
                "parameter": parameter,
                "predictor": predictor,
                "mean": float(np.mean(draws)),
                "sd": float(np.std(draws)),
                "hdi_lower": lower,
                "hdi_upper": upper,
                "rope_lower": rope_lower,
                "rope_upper": rope_upper,
                "frac_outside_rope": hdi_rope_fraction(draws, (rope_lower, rope_upper), cfg.hdi_mass),
            }
        )

    for d, name in enumerate(samples.density.predictor_names):
        if "mu" in blocks:
            _row(f"mu[{d}]", name, blocks["mu"][:, d])
        if local_block in blocks:
            for e in range(blocks[local_block].shape[1]):
                _row(f"{local_block}[{e},{d}]", name, blocks[local_block][:, e, d])
    return pd.DataFrame(rows)
