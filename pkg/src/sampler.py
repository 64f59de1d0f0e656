"""No-U-Turn sampling with windowed warmup, Gibbs interleaving and diagnostics.

The tree is built recursively with multinomial selection: biased progressive
sampling when a new subtree joins the trajectory, uniform sampling inside
subtrees. Step size follows dual averaging; the diagonal metric is estimated
in doubling warmup windows.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import arviz as az
import numpy as np
import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from .model import PosteriorDensity, element_names
from .models import SamplerConfig

logger = logging.getLogger("sampler")

DIVERGENCE_THRESHOLD = 1000.0
DIVERGENCE_WARNING_FRACTION = 0.2
RHAT_WARNING = 1.05
INIT_ATTEMPTS = 100
INIT_RADIUS = 2.0

# Dual-averaging constants.
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75

# Warmup windows: initial fast buffer, doubling slow windows, terminal fast buffer.
INIT_FRACTION = 0.15
TERM_FRACTION = 0.10
BASE_WINDOW = 25

LogDensityFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class SamplerInitializationError(RuntimeError):
    """Raised when no finite initial point is found."""


class _NonFiniteInitialPoint(Exception):
    pass


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------


def kinetic_energy(r: np.ndarray, inv_metric: np.ndarray) -> float:
    return 0.5 * float(np.dot(r, inv_metric * r))


def leapfrog(
    fn: LogDensityFn,
    theta: np.ndarray,
    r: np.ndarray,
    grad: np.ndarray,
    epsilon: float,
    inv_metric: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    r_new = r + 0.5 * epsilon * grad
    theta_new = theta + epsilon * inv_metric * r_new
    logp_new, grad_new = fn(theta_new)
    r_new = r_new + 0.5 * epsilon * grad_new
    return theta_new, r_new, logp_new, grad_new


def _sample_momentum(rng: np.random.Generator, inv_metric: np.ndarray) -> np.ndarray:
    return rng.standard_normal(len(inv_metric)) / np.sqrt(inv_metric)


def _log_accept(logp0: float, r0: np.ndarray, logp1: float, r1: np.ndarray, inv_metric: np.ndarray) -> float:
    delta = (logp1 - kinetic_energy(r1, inv_metric)) - (logp0 - kinetic_energy(r0, inv_metric))
    return float(delta) if np.isfinite(delta) else -np.inf


def find_reasonable_epsilon(
    fn: LogDensityFn,
    theta: np.ndarray,
    logp: float,
    grad: np.ndarray,
    inv_metric: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Double or halve a trial step until one-step acceptance crosses 0.5."""
    epsilon = 1.0
    r = _sample_momentum(rng, inv_metric)
    _, r1, logp1, _ = leapfrog(fn, theta, r, grad, epsilon, inv_metric)
    log_ratio = _log_accept(logp, r, logp1, r1, inv_metric)
    direction = 1 if log_ratio > np.log(0.5) else -1
    for _ in range(100):
        if direction * log_ratio <= -direction * np.log(2.0):
            break
        epsilon *= 2.0**direction
        _, r1, logp1, _ = leapfrog(fn, theta, r, grad, epsilon, inv_metric)
        log_ratio = _log_accept(logp, r, logp1, r1, inv_metric)
    return float(epsilon)


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------


@dataclass
class _Tree:
    theta_minus: np.ndarray
    r_minus: np.ndarray
    grad_minus: np.ndarray
    theta_plus: np.ndarray
    r_plus: np.ndarray
    grad_plus: np.ndarray
    theta: np.ndarray
    logp: float
    grad: np.ndarray
    log_weight: float
    r_sum: np.ndarray
    valid: bool
    accept_sum: float
    n_steps: int
    divergent: bool
    logp_minus: float = 0.0
    logp_plus: float = 0.0

    @classmethod
    def leaf(cls, theta, r, logp, grad, log_weight, accept, divergent) -> "_Tree":
        return cls(
            theta_minus=theta,
            r_minus=r,
            grad_minus=grad,
            theta_plus=theta,
            r_plus=r,
            grad_plus=grad,
            theta=theta,
            logp=logp,
            grad=grad,
            log_weight=log_weight,
            r_sum=r.copy(),
            valid=not divergent,
            accept_sum=accept,
            n_steps=1,
            divergent=divergent,
            logp_minus=logp,
            logp_plus=logp,
        )


def _no_u_turn(r_sum: np.ndarray, r_left: np.ndarray, r_right: np.ndarray, inv_metric: np.ndarray) -> bool:
    return (
        float(np.dot(r_sum, inv_metric * r_left)) > 0.0
        and float(np.dot(r_sum, inv_metric * r_right)) > 0.0
    )


def _log_add(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


def _merge(
    tree: _Tree,
    other: _Tree,
    direction: int,
    inv_metric: np.ndarray,
    rng: np.random.Generator,
    root: bool,
) -> None:
    """Join ``other`` onto the ``direction`` end of ``tree`` in place."""
    left, right = (other, tree) if direction == -1 else (tree, other)
    # Inner endpoints of the two halves, read before the ends are replaced.
    inner_left_r = left.r_plus
    inner_right_r = right.r_minus
    left_sum, right_sum = left.r_sum, right.r_sum

    if direction == -1:
        tree.theta_minus, tree.r_minus = other.theta_minus, other.r_minus
        tree.grad_minus, tree.logp_minus = other.grad_minus, other.logp_minus
    else:
        tree.theta_plus, tree.r_plus = other.theta_plus, other.r_plus
        tree.grad_plus, tree.logp_plus = other.grad_plus, other.logp_plus

    tree.accept_sum += other.accept_sum
    tree.n_steps += other.n_steps
    tree.divergent = tree.divergent or other.divergent
    tree.valid = tree.valid and other.valid
    if not tree.valid:
        return

    if root:
        # Biased progressive sampling toward the new subtree.
        diff = other.log_weight - tree.log_weight
        accept_prob = 1.0 if diff >= 0.0 else math.exp(diff)
        tree.log_weight = _log_add(tree.log_weight, other.log_weight)
    else:
        tree.log_weight = _log_add(tree.log_weight, other.log_weight)
        accept_prob = math.exp(other.log_weight - tree.log_weight)
    if rng.uniform() < accept_prob:
        tree.theta, tree.logp, tree.grad = other.theta, other.logp, other.grad

    tree.r_sum = left_sum + right_sum
    tree.valid = (
        _no_u_turn(tree.r_sum, tree.r_minus, tree.r_plus, inv_metric)
        and _no_u_turn(left_sum + inner_right_r, tree.r_minus, inner_right_r, inv_metric)
        and _no_u_turn(right_sum + inner_left_r, inner_left_r, tree.r_plus, inv_metric)
    )


def _build_tree(
    fn: LogDensityFn,
    tree: _Tree,
    direction: int,
    depth: int,
    epsilon: float,
    inv_metric: np.ndarray,
    h0: float,
    rng: np.random.Generator,
) -> _Tree:
    if depth == 0:
        if direction == -1:
            theta, r, grad = tree.theta_minus, tree.r_minus, tree.grad_minus
        else:
            theta, r, grad = tree.theta_plus, tree.r_plus, tree.grad_plus
        theta1, r1, logp1, grad1 = leapfrog(fn, theta, r, grad, direction * epsilon, inv_metric)
        h1 = logp1 - kinetic_energy(r1, inv_metric)
        log_weight = float(h1 - h0) if math.isfinite(h1) else -math.inf
        divergent = -log_weight > DIVERGENCE_THRESHOLD
        accept = 1.0 if log_weight >= 0.0 else math.exp(log_weight)
        return _Tree.leaf(theta1, r1, logp1, grad1, log_weight, accept, divergent)

    first = _build_tree(fn, tree, direction, depth - 1, epsilon, inv_metric, h0, rng)
    if not first.valid:
        return first
    second = _build_tree(fn, first, direction, depth - 1, epsilon, inv_metric, h0, rng)
    _merge(first, second, direction, inv_metric, rng, root=False)
    return first


@dataclass(frozen=True)
class Transition:
    theta: np.ndarray
    logp: float
    grad: np.ndarray
    accept_stat: float
    n_leapfrog: int
    tree_depth: int
    divergent: bool


def nuts_transition(
    fn: LogDensityFn,
    theta: np.ndarray,
    logp: float,
    grad: np.ndarray,
    epsilon: float,
    inv_metric: np.ndarray,
    max_tree_depth: int,
    rng: np.random.Generator,
) -> Transition:
    r0 = _sample_momentum(rng, inv_metric)
    h0 = logp - kinetic_energy(r0, inv_metric)
    tree = _Tree.leaf(theta, r0, logp, grad, 0.0, 0.0, False)
    tree.n_steps = 0

    depth = 0
    while depth < max_tree_depth and tree.valid:
        direction = 1 if rng.integers(0, 2) else -1
        subtree = _build_tree(fn, tree, direction, depth, epsilon, inv_metric, h0, rng)
        _merge(tree, subtree, direction, inv_metric, rng, root=True)
        depth += 1

    n = max(tree.n_steps, 1)
    return Transition(
        theta=tree.theta,
        logp=tree.logp,
        grad=tree.grad,
        accept_stat=tree.accept_sum / n,
        n_leapfrog=tree.n_steps,
        tree_depth=depth,
        divergent=tree.divergent,
    )


# ---------------------------------------------------------------------------
# Adaptation
# ---------------------------------------------------------------------------


class DualAveraging:
    def __init__(self, epsilon0: float, target_accept: float):
        self.target = target_accept
        self.restart(epsilon0)

    def restart(self, epsilon0: float) -> None:
        self.mu = float(np.log(10.0 * epsilon0))
        self.h_bar = 0.0
        self.log_epsilon = float(np.log(epsilon0))
        self.log_epsilon_bar = 0.0
        self.t = 0

    @property
    def epsilon(self) -> float:
        return float(np.exp(self.log_epsilon))

    @property
    def final_epsilon(self) -> float:
        return float(np.exp(self.log_epsilon_bar))

    def update(self, accept_stat: float) -> None:
        self.t += 1
        eta = 1.0 / (self.t + DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_epsilon = self.mu - np.sqrt(self.t) / DA_GAMMA * self.h_bar
        weight = self.t ** (-DA_KAPPA)
        self.log_epsilon_bar = weight * self.log_epsilon + (1.0 - weight) * self.log_epsilon_bar


def warmup_windows(n_warmup: int) -> Tuple[int, int, List[int]]:
    """(slow_start, slow_end, window_ends) for metric adaptation.

    The first 15% of warmup is a fast buffer, the middle 75% holds doubling
    slow windows and the last 10% is a terminal fast buffer. Window ends are
    iteration indices (exclusive). With fewer than 20 warmup iterations only
    the step size is adapted.
    """
    if n_warmup < 20:
        return n_warmup, n_warmup, []
    init = int(round(INIT_FRACTION * n_warmup))
    term = int(round(TERM_FRACTION * n_warmup))
    slow_end = n_warmup - term
    ends = []
    start, size = init, min(BASE_WINDOW, slow_end - init)
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start, size = end, 2 * size
    return init, slow_end, ends


def regularized_variance(window: np.ndarray) -> np.ndarray:
    n = window.shape[0]
    var = np.var(window, axis=0, ddof=1) if n > 1 else np.ones(window.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


# ---------------------------------------------------------------------------
# Single chain
# ---------------------------------------------------------------------------


@dataclass
class ChainResult:
    draws: np.ndarray
    discrete_draws: Optional[np.ndarray]
    stats: Dict[str, float] = field(default_factory=dict)


def _log_density_fn(density: PosteriorDensity, z: Optional[np.ndarray]) -> LogDensityFn:
    return lambda v: density.value_and_gradient(v, z)


def initial_point(
    density: PosteriorDensity, rng: np.random.Generator, z: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, float, np.ndarray]:
    """Uniform(-2, 2) jitter in unconstrained space, retried until finite."""
    attempts = {"n": 0}

    @retry(
        retry=retry_if_exception_type(_NonFiniteInitialPoint),
        stop=stop_after_attempt(INIT_ATTEMPTS),
        reraise=True,
    )
    def _draw() -> Tuple[np.ndarray, float, np.ndarray]:
        attempts["n"] += 1
        v = rng.uniform(-INIT_RADIUS, INIT_RADIUS, size=density.dimension)
        logp, grad = density.value_and_gradient(v, z)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            raise _NonFiniteInitialPoint(f"log density {logp} at attempt {attempts['n']}")
        return v, float(logp), grad

    try:
        return _draw()
    except _NonFiniteInitialPoint as exc:
        raise SamplerInitializationError(
            f"no finite initial point after {INIT_ATTEMPTS} attempts: {exc}"
        ) from exc


def _gibbs_sweep(
    density: PosteriorDensity, theta: np.ndarray, z: np.ndarray, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Conditional update of each z_d, then a Metropolis slab/spike swap for it."""
    z = z.copy()
    for d in range(len(z)):
        prob = density.gibbs_z_conditional(theta, z, d)
        z[d] = 1 if rng.uniform() < prob else 0
        log_ratio = density.swap_log_ratio(theta, z, d)
        if math.isfinite(log_ratio) and rng.uniform() < math.exp(min(0.0, log_ratio)):
            theta = density.swap(theta, d)
            z[d] = 1 - z[d]
    return theta, z


def run_chain(
    density: PosteriorDensity,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    chain: int = 0,
    gibbs: bool = False,
) -> ChainResult:
    dim = density.dimension
    z: Optional[np.ndarray] = np.ones(density.discrete_size, dtype=int) if gibbs else None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        theta, logp, grad = initial_point(density, rng, z)
        fn = _log_density_fn(density, z)

        inv_metric = np.ones(dim)
        epsilon = find_reasonable_epsilon(fn, theta, logp, grad, inv_metric, rng)
        adapter = DualAveraging(epsilon, cfg.target_accept)
        adapt_metric = cfg.mass_matrix == "diagonal"
        slow_start, _, window_ends = warmup_windows(cfg.warmup)
        window_start = slow_start
        window: List[np.ndarray] = []

        draws = np.empty((cfg.draws, dim))
        z_draws = np.empty((cfg.draws, density.discrete_size), dtype=int) if gibbs else None
        accept_stats, depths, leapfrogs = [], [], []
        divergences = 0

        for it in range(cfg.warmup + cfg.draws):
            warming = it < cfg.warmup
            step = adapter.epsilon if warming else epsilon
            tr = nuts_transition(fn, theta, logp, grad, step, inv_metric, cfg.max_tree_depth, rng)
            theta, logp, grad = tr.theta, tr.logp, tr.grad

            # z is held at 1 through the initial fast buffer.
            if gibbs and it >= slow_start:
                theta, z = _gibbs_sweep(density, theta, z, rng)
                fn = _log_density_fn(density, z)
                logp, grad = fn(theta)

            if warming:
                adapter.update(tr.accept_stat)
                if adapt_metric and window_ends:
                    if it >= window_start:
                        window.append(theta)
                    if it + 1 == window_ends[0]:
                        inv_metric = regularized_variance(np.asarray(window))
                        window_ends.pop(0)
                        window_start, window = it + 1, []
                        adapter.restart(find_reasonable_epsilon(fn, theta, logp, grad, inv_metric, rng))
                        logger.debug("Metric updated | chain=%d | iteration=%d", chain, it + 1)
                if it + 1 == cfg.warmup:
                    epsilon = adapter.final_epsilon
                continue

            i = it - cfg.warmup
            draws[i] = theta
            if gibbs:
                z_draws[i] = z
            accept_stats.append(tr.accept_stat)
            depths.append(tr.tree_depth)
            leapfrogs.append(tr.n_leapfrog)
            divergences += int(tr.divergent)

    stats = {
        "chain": chain,
        "mean_accept_stat": float(np.mean(accept_stats)),
        "divergences": int(divergences),
        "step_size": float(epsilon),
        "mean_tree_depth": float(np.mean(depths)),
        "n_leapfrog": int(np.sum(leapfrogs)),
    }
    logger.info(
        "Chain finished | chain=%d | accept=%.3f | divergences=%d | step_size=%.4g | depth=%.2f",
        chain,
        stats["mean_accept_stat"],
        divergences,
        epsilon,
        stats["mean_tree_depth"],
    )
    return ChainResult(draws=draws, discrete_draws=z_draws, stats=stats)


# ---------------------------------------------------------------------------
# Multi-chain drivers
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSamples:
    draws: np.ndarray
    density: PosteriorDensity
    discrete_draws: Optional[np.ndarray] = None
    chain_stats: List[Dict[str, float]] = field(default_factory=list)
    divergence_warning: bool = False

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def layout(self):
        return self.density.layout

    def constrained(self) -> Dict[str, np.ndarray]:
        """Constrained parameter arrays shaped [chains, draws, *block]."""
        return self.density.constrained(self.draws, self.discrete_draws)

    def flat_constrained(self) -> Tuple[List[str], np.ndarray]:
        names: List[str] = []
        columns: List[np.ndarray] = []
        lead = (self.n_chains, self.n_draws)
        for name, values in self.constrained().items():
            shape = values.shape[2:]
            names.extend(element_names(name, shape))
            columns.append(values.reshape(lead + (-1,)))
        return names, np.concatenate(columns, axis=2)

    def to_long_frame(self) -> pd.DataFrame:
        names, values = self.flat_constrained()
        chains, draws, k = values.shape
        return pd.DataFrame(
            {
                "chain": np.repeat(np.arange(chains), draws * k),
                "iter": np.tile(np.repeat(np.arange(draws), k), chains),
                "name": np.tile(np.asarray(names, dtype=object), chains * draws),
                "value": values.reshape(-1),
            }
        )

    def summary_frame(self) -> pd.DataFrame:
        return diagnostics(self)

    @property
    def total_divergences(self) -> int:
        return int(sum(s["divergences"] for s in self.chain_stats))


def _chain_rngs(seed: int, chains: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(chains)]


def _run_chains(density: PosteriorDensity, cfg: SamplerConfig, threads: int, gibbs: bool) -> PosteriorSamples:
    if density.dimension < 1:
        raise ValueError("density has no continuous parameters")
    rngs = _chain_rngs(cfg.seed, cfg.chains)
    workers = max(1, min(threads, cfg.chains))
    logger.info(
        "Sampling started | family=%s | chains=%d | warmup=%d | draws=%d | threads=%d | gibbs=%s",
        density.prior_family,
        cfg.chains,
        cfg.warmup,
        cfg.draws,
        workers,
        gibbs,
    )
    if workers == 1:
        results = [run_chain(density, cfg, rng, c, gibbs) for c, rng in enumerate(rngs)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_chain, density, cfg, rng, c, gibbs) for c, rng in enumerate(rngs)]
            results = [f.result() for f in futures]

    draws = np.stack([r.draws for r in results])
    discrete = np.stack([r.discrete_draws for r in results]) if gibbs else None
    stats = [r.stats for r in results]
    total = cfg.chains * cfg.draws
    divergent = sum(s["divergences"] for s in stats)
    warning = divergent / total > DIVERGENCE_WARNING_FRACTION
    if warning:
        logger.warning("High divergence rate | divergent=%d | transitions=%d", divergent, total)
    return PosteriorSamples(
        draws=draws,
        density=density,
        discrete_draws=discrete,
        chain_stats=stats,
        divergence_warning=warning,
    )


def nuts_sample(density: PosteriorDensity, cfg: SamplerConfig, threads: int = 1) -> PosteriorSamples:
    if density.discrete_size:
        return nuts_within_gibbs(density, cfg, threads)
    return _run_chains(density, cfg, threads, gibbs=False)


def nuts_within_gibbs(density: PosteriorDensity, cfg: SamplerConfig, threads: int = 1) -> PosteriorSamples:
    if not hasattr(density, "gibbs_z_conditional") or not density.discrete_size:
        raise ValueError(f"{density.prior_family} has no discrete state to update")
    return _run_chains(density, cfg, threads, gibbs=True)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ["mean", "std", "median", "5.0%", "95.0%", "n_eff", "r_hat"]


def _diagnose(values: np.ndarray) -> Dict[str, Optional[float]]:
    """Summary of one scalar over draws shaped [chains, draws]."""
    chains, n = values.shape
    flat = values.reshape(-1)
    row: Dict[str, Optional[float]] = {
        "mean": float(np.mean(flat)),
        "std": float(np.std(flat)),
        "median": float(np.median(flat)),
        "5.0%": float(np.quantile(flat, 0.05)),
        "95.0%": float(np.quantile(flat, 0.95)),
    }
    if np.ptp(flat) == 0.0:
        row["n_eff"] = float(chains * n)
        row["r_hat"] = 1.0 if chains >= 2 else None
        return row
    row["n_eff"] = float(az.ess(values, method="mean"))
    row["r_hat"] = float(az.rhat(values, method="rank")) if chains >= 2 else None
    return row


def summarize_array(values: np.ndarray, names: List[str]) -> pd.DataFrame:
    """Diagnostics for an array shaped [chains, draws, k]."""
    rows = [_diagnose(values[:, :, k]) for k in range(values.shape[2])]
    frame = pd.DataFrame(rows, index=pd.Index(names, name="name"), columns=SUMMARY_COLUMNS)
    return frame


def diagnostics(samples: PosteriorSamples) -> pd.DataFrame:
    names, values = samples.flat_constrained()
    frame = summarize_array(values, names)
    worst = frame["r_hat"].dropna()
    if len(worst) and float(worst.max()) > RHAT_WARNING:
        logger.warning("Chains have not converged | max_r_hat=%.3f | parameter=%s", worst.max(), worst.idxmax())
    return frame


def has_convergence_warning(summary: pd.DataFrame) -> bool:
    r_hat = summary["r_hat"].dropna()
    return bool(len(r_hat)) and float(r_hat.max()) > RHAT_WARNING
