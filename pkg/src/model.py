"""Unconstrained log-joint densities for the BHIP model families.

All densities work on a flat real vector. Positive parameters are stored on
the log scale and probabilities on the logit scale; the matching Jacobian
terms are part of the density. Gradients are analytic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import EnvironmentDataset
from .models import ModelSpec

logger = logging.getLogger("model")

LOG_2PI = float(np.log(2.0 * np.pi))

Transform = Literal["identity", "log", "logit"]


class ModelError(ValueError):
    """Raised for likelihood/target mismatches and non-finite conditionals."""


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: Tuple[int, ...]
    transform: Transform = "identity"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def element_names(name: str, shape: Tuple[int, ...]) -> List[str]:
    """``mu[0]``, ``beta_decentered[1,4]``; scalars keep the bare name."""
    if not shape:
        return [name]
    return [f"{name}[{','.join(str(i) for i in idx)}]" for idx in np.ndindex(*shape)]


class ParamLayout:
    def __init__(self, blocks: Sequence[ParamBlock]):
        self.blocks: Tuple[ParamBlock, ...] = tuple(blocks)
        self._slices: Dict[str, slice] = {}
        offset = 0
        for block in self.blocks:
            if block.name in self._slices:
                raise ModelError(f"duplicate parameter block {block.name!r}")
            self._slices[block.name] = slice(offset, offset + block.size)
            offset += block.size
        self.dimension = offset

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def block(self, name: str) -> ParamBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def unpack(self, v: np.ndarray) -> Dict[str, np.ndarray]:
        """Unconstrained values per block; leading axes of ``v`` are kept."""
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-1]
        return {
            b.name: v[..., self._slices[b.name]].reshape(lead + b.shape) for b in self.blocks
        }

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.dimension)
        for block in self.blocks:
            arr = np.asarray(values[block.name], dtype=float)
            if arr.size != block.size:
                raise ModelError(
                    f"block {block.name!r} expects {block.size} values, got {arr.size}"
                )
            out[self._slices[block.name]] = arr.reshape(-1)
        return out

    def constrain(self, draws: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        for name, value in self.unpack(draws).items():
            transform = self.block(name).transform
            if transform == "log":
                value = np.exp(value)
            elif transform == "logit":
                value = expit(value)
            out[name] = value
        return out

    def flat_names(self) -> List[str]:
        names: List[str] = []
        for block in self.blocks:
            names.extend(element_names(block.name, block.shape))
        return names


# ---------------------------------------------------------------------------
# Scalar density helpers
# ---------------------------------------------------------------------------


def _normal_log_prob(x: np.ndarray, mean, sd) -> np.ndarray:
    z = (x - mean) / sd
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z


def _half_cauchy_log_prob_unconstrained(u: np.ndarray, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """HalfCauchy(scale) density of exp(u) plus the log Jacobian, and its derivative in u."""
    u = np.asarray(u, dtype=float)
    ratio2 = np.exp(2.0 * u) / (scale * scale)
    value = np.log(2.0 / (np.pi * scale)) - np.log1p(ratio2) + u
    grad = 1.0 - 2.0 * ratio2 / (1.0 + ratio2)
    return value, grad


def _log1m_expit(u: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, u)


def _log_expit(u: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -u)


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


class GaussianLikelihood:
    """Per-environment y ~ N(X beta_e, sigma^2) through sufficient statistics."""

    has_sigma = True

    def __init__(self, dataset: EnvironmentDataset):
        self.XtX = np.stack([x.T @ x for x in dataset.X])
        self.Xty = np.stack([x.T @ y for x, y in zip(dataset.X, dataset.y)])
        self.yty = np.array([y @ y for y in dataset.y])
        self.n = np.array([len(y) for y in dataset.y], dtype=float)

    def value_and_grad(
        self, beta: np.ndarray, log_sigma: float
    ) -> Tuple[float, np.ndarray, float]:
        XtX_beta = (self.XtX @ beta[:, :, None])[:, :, 0]
        ssr = self.yty + np.sum(beta * (XtX_beta - 2.0 * self.Xty), axis=1)
        ssr = np.maximum(ssr, 0.0)
        inv_var = np.exp(-2.0 * log_sigma)
        value = float(np.sum(-0.5 * self.n * LOG_2PI - self.n * log_sigma - 0.5 * ssr * inv_var))
        grad_beta = (self.Xty - XtX_beta) * inv_var
        grad_log_sigma = float(np.sum(-self.n + ssr * inv_var))
        return value, grad_beta, grad_log_sigma

    def value(self, beta: np.ndarray, log_sigma: float) -> float:
        return self.value_and_grad(beta, log_sigma)[0]


class BernoulliLogitLikelihood:
    has_sigma = False

    def __init__(self, dataset: EnvironmentDataset):
        self.X = list(dataset.X)
        self.y = list(dataset.y)

    def value_and_grad(
        self, beta: np.ndarray, log_sigma: float = 0.0
    ) -> Tuple[float, np.ndarray, float]:
        value = 0.0
        grad = np.zeros_like(beta)
        for e, (x, y) in enumerate(zip(self.X, self.y)):
            eta = x @ beta[e]
            value += float(np.sum(y * eta - np.logaddexp(0.0, eta)))
            grad[e] = x.T @ (y - expit(eta))
        return value, grad, 0.0

    def value(self, beta: np.ndarray, log_sigma: float = 0.0) -> float:
        return self.value_and_grad(beta, log_sigma)[0]


def _build_likelihood(spec: ModelSpec, dataset: EnvironmentDataset):
    likelihood = spec.likelihood
    if likelihood is None:
        likelihood = "bernoulli-logit" if dataset.target_kind == "binary" else "gaussian"
    if likelihood == "gaussian" and dataset.target_kind != "continuous":
        raise ModelError("gaussian likelihood requires a continuous target")
    if likelihood == "bernoulli-logit" and dataset.target_kind != "binary":
        raise ModelError("bernoulli-logit likelihood requires a binary 0/1 target")
    if likelihood == "gaussian":
        return likelihood, GaussianLikelihood(dataset)
    return likelihood, BernoulliLogitLikelihood(dataset)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


class PosteriorDensity:
    """Base class: layout bookkeeping and the sampler-facing API.

    Instances are immutable after construction; the discrete state ``z`` is
    passed in by the caller.
    """

    prior_family: str = ""

    def __init__(self, spec: ModelSpec, dataset: EnvironmentDataset, blocks: Sequence[ParamBlock]):
        self.spec = spec
        self.hyper = spec.hyperparams
        self.likelihood_name, self.likelihood = _build_likelihood(spec, dataset)
        self.n_environments = dataset.n_environments
        self.n_predictors = dataset.n_predictors
        self.predictor_names = list(dataset.predictor_names)
        self.target_name = dataset.target_name
        if self.likelihood.has_sigma:
            blocks = list(blocks) + [ParamBlock("sigma_obs", (), "log")]
        self.layout = ParamLayout(blocks)

    @property
    def dimension(self) -> int:
        return self.layout.dimension

    @property
    def discrete_size(self) -> int:
        return 0

    def _log_sigma(self, params: Dict[str, np.ndarray]) -> float:
        return float(params["sigma_obs"]) if self.likelihood.has_sigma else 0.0

    def _sigma_terms(self, params: Dict[str, np.ndarray], grad_ll_sigma: float) -> Tuple[float, float]:
        if not self.likelihood.has_sigma:
            return 0.0, 0.0
        value, grad = _half_cauchy_log_prob_unconstrained(params["sigma_obs"], self.hyper.sigma_obs_scale)
        return float(value), float(grad) + grad_ll_sigma

    def value_and_gradient(
        self, v: np.ndarray, z: Optional[np.ndarray] = None
    ) -> Tuple[float, np.ndarray]:
        raise NotImplementedError

    def log_density(self, v: np.ndarray, z: Optional[np.ndarray] = None) -> float:
        return self.value_and_gradient(v, z)[0]

    def gradient(self, v: np.ndarray, z: Optional[np.ndarray] = None) -> np.ndarray:
        return self.value_and_gradient(v, z)[1]

    def effective_beta(self, params: Dict[str, np.ndarray], z: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, v: np.ndarray, z: Optional[np.ndarray] = None) -> float:
        params = self.layout.unpack(v)
        return self.likelihood.value(self.effective_beta(params, z), self._log_sigma(params))

    def constrained(
        self, draws: np.ndarray, z_draws: Optional[np.ndarray] = None
    ) -> Dict[str, np.ndarray]:
        """Constrained blocks plus deterministic quantities for an array of draws."""
        return self.layout.constrain(draws)

    def _check_z(self, z: Optional[np.ndarray]) -> None:
        if self.discrete_size and (z is None or len(z) != self.discrete_size):
            raise ModelError(f"{self.prior_family} needs a discrete state of length {self.discrete_size}")


class HierNormalNonCentered(PosteriorDensity):
    """beta_e = mu + tau * eta_e with eta ~ N(0, 1)."""

    prior_family = "hier-normal-noncentered"

    def __init__(self, spec: ModelSpec, dataset: EnvironmentDataset):
        E, D = dataset.n_environments, dataset.n_predictors
        super().__init__(
            spec,
            dataset,
            [
                ParamBlock("mu", (D,)),
                ParamBlock("tau", (D,), "log"),
                ParamBlock("beta_decentered", (E, D)),
            ],
        )

    def effective_beta(self, params, z=None):
        return params["mu"] + np.exp(params["tau"]) * params["beta_decentered"]

    def value_and_gradient(self, v, z=None):
        h = self.hyper
        p = self.layout.unpack(v)
        mu, log_tau, eta = p["mu"], p["tau"], p["beta_decentered"]
        tau = np.exp(log_tau)
        beta = mu + tau * eta

        ll, g_beta, g_ll_sigma = self.likelihood.value_and_grad(beta, self._log_sigma(p))
        tau_value, tau_grad = _half_cauchy_log_prob_unconstrained(log_tau, h.tau_scale)
        sigma_value, sigma_grad = self._sigma_terms(p, g_ll_sigma)

        value = (
            float(np.sum(_normal_log_prob(mu, h.mu0, h.mu_sd)))
            + float(np.sum(tau_value))
            + float(np.sum(_normal_log_prob(eta, 0.0, 1.0)))
            + sigma_value
            + ll
        )
        grads = {
            "mu": -(mu - h.mu0) / h.mu_sd**2 + g_beta.sum(axis=0),
            "tau": tau_grad + tau * np.sum(g_beta * eta, axis=0),
            "beta_decentered": -eta + tau * g_beta,
        }
        if self.likelihood.has_sigma:
            grads["sigma_obs"] = sigma_grad
        return value, self.layout.pack(grads)

    def constrained(self, draws, z_draws=None):
        out = self.layout.constrain(draws)
        out["beta"] = out["mu"][..., None, :] + out["tau"][..., None, :] * out["beta_decentered"]
        return out


class Horseshoe(PosteriorDensity):
    """beta_{e,d} ~ N(0, (lambda_d * tau_global)^2) with half-Cauchy scales."""

    prior_family = "horseshoe"

    def __init__(self, spec: ModelSpec, dataset: EnvironmentDataset):
        E, D = dataset.n_environments, dataset.n_predictors
        super().__init__(
            spec,
            dataset,
            [
                ParamBlock("lambda_local", (D,), "log"),
                ParamBlock("tau_global", (), "log"),
                ParamBlock("beta", (E, D)),
            ],
        )

    def effective_beta(self, params, z=None):
        return params["beta"]

    def value_and_gradient(self, v, z=None):
        p = self.layout.unpack(v)
        log_lam, log_tg, beta = p["lambda_local"], float(p["tau_global"]), p["beta"]

        ll, g_beta, g_ll_sigma = self.likelihood.value_and_grad(beta, self._log_sigma(p))
        lam_value, lam_grad = _half_cauchy_log_prob_unconstrained(log_lam, 1.0)
        tg_value, tg_grad = _half_cauchy_log_prob_unconstrained(log_tg, self.hyper.tau_scale)
        sigma_value, sigma_grad = self._sigma_terms(p, g_ll_sigma)

        log_scale = log_lam + log_tg
        inv_var = np.exp(-2.0 * log_scale)
        std2 = beta * beta * inv_var
        prior_beta = -0.5 * LOG_2PI - log_scale - 0.5 * std2
        # d/d(log scale) of the normal log density, per (e, d)
        d_log_scale = -1.0 + std2

        value = float(np.sum(prior_beta)) + float(np.sum(lam_value)) + float(tg_value) + sigma_value + ll
        grads = {
            "lambda_local": lam_grad + d_log_scale.sum(axis=0),
            "tau_global": float(tg_grad) + float(d_log_scale.sum()),
            "beta": -beta * inv_var + g_beta,
        }
        if self.likelihood.has_sigma:
            grads["sigma_obs"] = sigma_grad
        return value, self.layout.pack(grads)


class SpikeAndSlab(PosteriorDensity):
    """Per-predictor inclusion z_d selects slab (hierarchical) or spike coefficients."""

    prior_family = "spike-and-slab"

    def __init__(self, spec: ModelSpec, dataset: EnvironmentDataset):
        E, D = dataset.n_environments, dataset.n_predictors
        super().__init__(
            spec,
            dataset,
            [
                ParamBlock("p_slab", (D,), "logit"),
                ParamBlock("tau", (D,), "log"),
                ParamBlock("mu", (D,)),
                ParamBlock("slabBeta", (E, D)),
                ParamBlock("spikeBeta", (E, D)),
                ParamBlock("spike_scale", (D,), "log"),
            ],
        )

    @property
    def discrete_size(self) -> int:
        return self.n_predictors

    def effective_beta(self, params, z=None):
        self._check_z(z)
        zf = np.asarray(z, dtype=float)
        return zf * params["slabBeta"] + (1.0 - zf) * params["spikeBeta"]

    def value_and_gradient(self, v, z=None):
        self._check_z(z)
        h = self.hyper
        zf = np.asarray(z, dtype=float)
        p = self.layout.unpack(v)
        u_p, log_tau, mu = p["p_slab"], p["tau"], p["mu"]
        slab, spike, log_ss = p["slabBeta"], p["spikeBeta"], p["spike_scale"]
        tau = np.exp(log_tau)
        ss = np.exp(log_ss)
        prob = expit(u_p)
        beta = zf * slab + (1.0 - zf) * spike

        ll, g_beta, g_ll_sigma = self.likelihood.value_and_grad(beta, self._log_sigma(p))
        tau_value, tau_grad = _half_cauchy_log_prob_unconstrained(log_tau, h.slab_sd_scale)
        ss_value, ss_grad = _half_cauchy_log_prob_unconstrained(log_ss, h.spike_scale_scale)
        sigma_value, sigma_grad = self._sigma_terms(p, g_ll_sigma)

        # Uniform(0, 1) prior on p_slab contributes only the logit Jacobian.
        log_p, log_1mp = _log_expit(u_p), _log1m_expit(u_p)
        p_value = log_p + log_1mp
        z_value = zf * log_p + (1.0 - zf) * log_1mp

        slab_std = (slab - mu) / tau
        spike_std = spike / ss
        value = (
            float(np.sum(p_value + z_value))
            + float(np.sum(tau_value))
            + float(np.sum(_normal_log_prob(mu, h.mu0, h.mu_sd)))
            + float(np.sum(-0.5 * LOG_2PI - log_tau - 0.5 * slab_std**2))
            + float(np.sum(-0.5 * LOG_2PI - log_ss - 0.5 * spike_std**2))
            + float(np.sum(ss_value))
            + sigma_value
            + ll
        )
        grads = {
            "p_slab": (1.0 - 2.0 * prob) + (zf - prob),
            "tau": tau_grad + np.sum(-1.0 + slab_std**2, axis=0),
            "mu": -(mu - h.mu0) / h.mu_sd**2 + np.sum(slab_std / tau, axis=0),
            "slabBeta": -slab_std / tau + zf * g_beta,
            "spikeBeta": -spike_std / ss + (1.0 - zf) * g_beta,
            "spike_scale": ss_grad + np.sum(-1.0 + spike_std**2, axis=0),
        }
        if self.likelihood.has_sigma:
            grads["sigma_obs"] = sigma_grad
        return value, self.layout.pack(grads)

    def gibbs_z_conditional(self, v: np.ndarray, z: np.ndarray, d: int) -> float:
        """P(z_d = 1 | everything else), computed in log space."""
        self._check_z(z)
        p = self.layout.unpack(v)
        log_sigma = self._log_sigma(p)
        z_on = np.array(z, dtype=float)
        z_off = z_on.copy()
        z_on[d], z_off[d] = 1.0, 0.0
        ll_slab = self.likelihood.value(self.effective_beta(p, z_on), log_sigma)
        ll_spike = self.likelihood.value(self.effective_beta(p, z_off), log_sigma)
        if not (np.isfinite(ll_slab) and np.isfinite(ll_spike)):
            raise ModelError(f"non-finite likelihood in inclusion update for predictor {d}")
        u = float(p["p_slab"][d])
        log_on = float(_log_expit(u)) + ll_slab
        log_off = float(_log1m_expit(u)) + ll_spike
        return float(np.exp(log_on - np.logaddexp(log_on, log_off)))

    def swap_log_ratio(self, v: np.ndarray, z: np.ndarray, d: int) -> float:
        """Log acceptance ratio of flipping z_d while exchanging slab and spike coefficients of d.

        The effective coefficients are unchanged by the move, so only prior terms enter.
        """
        self._check_z(z)
        p = self.layout.unpack(v)
        slab, spike = p["slabBeta"][:, d], p["spikeBeta"][:, d]
        mu, tau, ss = p["mu"][d], np.exp(p["tau"][d]), np.exp(p["spike_scale"][d])
        # log p - log(1 - p) is the logit itself.
        z_term = float(p["p_slab"][d]) * (1.0 if z[d] == 0 else -1.0)
        slab_term = np.sum(_normal_log_prob(spike, mu, tau) - _normal_log_prob(slab, mu, tau))
        spike_term = np.sum(_normal_log_prob(slab, 0.0, ss) - _normal_log_prob(spike, 0.0, ss))
        return float(z_term + slab_term + spike_term)

    def swap(self, v: np.ndarray, d: int) -> np.ndarray:
        params = self.layout.unpack(v)
        slab, spike = params["slabBeta"].copy(), params["spikeBeta"].copy()
        slab[:, d], spike[:, d] = params["spikeBeta"][:, d], params["slabBeta"][:, d]
        params["slabBeta"], params["spikeBeta"] = slab, spike
        return self.layout.pack(params)

    def constrained(self, draws, z_draws=None):
        out = self.layout.constrain(draws)
        if z_draws is not None:
            zf = np.asarray(z_draws, dtype=float)
            out["z"] = zf
            out["beta"] = zf[..., None, :] * out["slabBeta"] + (1.0 - zf[..., None, :]) * out["spikeBeta"]
        return out


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _check_dataset(dataset: EnvironmentDataset) -> None:
    if dataset.n_environments < 1 or dataset.n_predictors < 1:
        raise ModelError("dataset needs at least one environment and one predictor")


def build_hier_normal(spec: ModelSpec, dataset: EnvironmentDataset) -> HierNormalNonCentered:
    _check_dataset(dataset)
    return HierNormalNonCentered(spec, dataset)


def build_horseshoe(spec: ModelSpec, dataset: EnvironmentDataset) -> Horseshoe:
    _check_dataset(dataset)
    return Horseshoe(spec, dataset)


def build_spike_slab(spec: ModelSpec, dataset: EnvironmentDataset) -> SpikeAndSlab:
    _check_dataset(dataset)
    return SpikeAndSlab(spec, dataset)


_BUILDERS = {
    "hier-normal-noncentered": build_hier_normal,
    "horseshoe": build_horseshoe,
    "spike-and-slab": build_spike_slab,
}


def build_density(spec: ModelSpec, dataset: EnvironmentDataset) -> PosteriorDensity:
    density = _BUILDERS[spec.prior_family](spec, dataset)
    logger.info(
        "Density built | family=%s | likelihood=%s | dimension=%d | environments=%d | predictors=%d",
        density.prior_family,
        density.likelihood_name,
        density.dimension,
        density.n_environments,
        density.n_predictors,
    )
    return density
