"""Random DAGs, linear-Gaussian SCMs, interventions and multi-environment sampling.

Every random operation takes an explicit ``numpy.random.Generator``; nothing
touches global RNG state, so identical (scm, specs, seed) give bit-identical
data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .data import EnvironmentDataset

logger = logging.getLogger("graph_scm")

# Near-zero U(0, 0.3) noise variances break likelihood evaluation downstream.
NOISE_VARIANCE_FLOOR = 1e-3

Edge = Tuple[int, int]


class ScmError(ValueError):
    """Raised for invalid graphs, SCMs, interventions or arguments."""


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dag:
    n_nodes: int
    edges: FrozenSet[Edge] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise ScmError(f"n_nodes must be positive, got {self.n_nodes}")
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        for i, j in edges:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ScmError(f"edge {i}->{j} out of range for {self.n_nodes} nodes")
            if i == j:
                raise ScmError(f"self-loop on node {i}")
        if not nx.is_directed_acyclic_graph(self.to_networkx()):
            raise ScmError("graph contains a cycle")

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(sorted(self.edges))
        return graph

    def sorted_edges(self) -> List[Edge]:
        return sorted(self.edges)


def topological_order(dag: Dag) -> List[int]:
    """Kahn peel with smallest-index tie-breaking, so the order is deterministic."""
    return list(nx.lexicographical_topological_sort(dag.to_networkx()))


def _check_node(dag: Dag, node: int) -> int:
    if not isinstance(node, (int, np.integer)) or not 0 <= int(node) < dag.n_nodes:
        raise ScmError(f"invalid node index {node!r} for {dag.n_nodes} nodes")
    return int(node)


def parents(dag: Dag, node: int) -> FrozenSet[int]:
    node = _check_node(dag, node)
    return frozenset(i for i, j in dag.edges if j == node)


def random_dag(n_nodes: int, edge_prob: float, rng: np.random.Generator) -> Dag:
    """Erdos-Renyi DAG over the upper triangle of a random node permutation."""
    if n_nodes < 2:
        raise ScmError(f"n_nodes must be >= 2, got {n_nodes}")
    if not 0.0 <= edge_prob <= 1.0:
        raise ScmError(f"edge_prob must be in [0, 1], got {edge_prob}")

    order = rng.permutation(n_nodes)
    edges = []
    for a in range(n_nodes):
        for b in range(a + 1, n_nodes):
            if rng.random() < edge_prob:
                edges.append((int(order[a]), int(order[b])))
    return Dag(n_nodes=n_nodes, edges=frozenset(edges))


# ---------------------------------------------------------------------------
# Linear SCM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mechanism:
    """X_node := mean + sum_i weights[i] * X_i + N(0, noise_var)."""

    node: int
    weights: Mapping[int, float]
    mean: float = 0.0
    noise_var: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_var < 0 or not np.isfinite(self.noise_var):
            raise ScmError(f"noise variance for node {self.node} must be >= 0")
        object.__setattr__(self, "weights", dict(sorted(self.weights.items())))


@dataclass(frozen=True)
class LinearScm:
    dag: Dag
    mechanisms: Tuple[Mechanism, ...]

    def __post_init__(self) -> None:
        if len(self.mechanisms) != self.dag.n_nodes:
            raise ScmError("one mechanism per node is required")
        keys = set()
        for node, mech in enumerate(self.mechanisms):
            if mech.node != node:
                raise ScmError(f"mechanism at position {node} is for node {mech.node}")
            keys.update((i, node) for i in mech.weights)
        if keys != set(self.dag.edges):
            raise ScmError("weights must be keyed exactly by the DAG edges")

    @property
    def n_nodes(self) -> int:
        return self.dag.n_nodes

    @property
    def weights(self) -> Dict[Edge, float]:
        return {
            (i, mech.node): w for mech in self.mechanisms for i, w in mech.weights.items()
        }

    @property
    def noise_vars(self) -> np.ndarray:
        return np.array([m.noise_var for m in self.mechanisms])

    @property
    def node_means(self) -> np.ndarray:
        return np.array([m.mean for m in self.mechanisms])

    @classmethod
    def from_arrays(
        cls,
        dag: Dag,
        weights: Mapping[Edge, float],
        noise_vars: Sequence[float],
        node_means: Optional[Sequence[float]] = None,
    ) -> "LinearScm":
        if set(weights) != set(dag.edges):
            raise ScmError("weights must be keyed exactly by the DAG edges")
        means = np.zeros(dag.n_nodes) if node_means is None else np.asarray(node_means, float)
        mechanisms = tuple(
            Mechanism(
                node=d,
                weights={i: float(w) for (i, j), w in weights.items() if j == d},
                mean=float(means[d]),
                noise_var=float(noise_vars[d]),
            )
            for d in range(dag.n_nodes)
        )
        return cls(dag=dag, mechanisms=mechanisms)


def random_lganm(
    dag: Dag,
    weight_low: float,
    weight_high: float,
    noise_low: float,
    noise_high: float,
    rng: np.random.Generator,
    positive_effects: bool = False,
) -> LinearScm:
    """Draw weights ~ +/-U(weight_low, weight_high) and variances ~ U(noise_low, noise_high)."""
    if weight_low > weight_high:
        raise ScmError(f"empty weight range [{weight_low}, {weight_high}]")
    if noise_low < 0 or noise_low > noise_high:
        raise ScmError(f"invalid noise range [{noise_low}, {noise_high}]")

    weights: Dict[Edge, float] = {}
    for edge in dag.sorted_edges():
        magnitude = rng.uniform(weight_low, weight_high)
        sign = 1.0 if positive_effects else rng.choice((-1.0, 1.0))
        weights[edge] = float(sign * magnitude)
    noise_vars = np.maximum(rng.uniform(noise_low, noise_high, size=dag.n_nodes), NOISE_VARIANCE_FLOOR)
    return LinearScm.from_arrays(dag, weights, noise_vars)


def sample(scm: LinearScm, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n i.i.d. rows (n x n_nodes) by ancestral sampling."""
    if n < 1:
        raise ScmError(f"n must be >= 1, got {n}")
    data = np.zeros((n, scm.n_nodes))
    # Noise is drawn for every node, zero-variance ones included.
    noise = rng.standard_normal((n, scm.n_nodes))
    for d in topological_order(scm.dag):
        mech = scm.mechanisms[d]
        column = np.full(n, mech.mean)
        for i, w in mech.weights.items():
            column = column + w * data[:, i]
        data[:, d] = column + np.sqrt(mech.noise_var) * noise[:, d]
    return data


# ---------------------------------------------------------------------------
# Interventions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intervention:
    node: int
    kind: Literal["do-constant", "do-distribution"]
    mean: float = 0.0
    variance: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("do-constant", "do-distribution"):
            raise ScmError(f"unknown intervention kind {self.kind!r}")
        if self.variance < 0:
            raise ScmError("intervention variance must be >= 0")
        if self.kind == "do-constant" and self.variance != 0:
            raise ScmError("do-constant interventions have zero variance")

    @classmethod
    def do_constant(cls, node: int, value: float) -> "Intervention":
        return cls(node=node, kind="do-constant", mean=float(value), variance=0.0)

    @classmethod
    def do_distribution(cls, node: int, mean: float, variance: float) -> "Intervention":
        return cls(node=node, kind="do-distribution", mean=float(mean), variance=float(variance))

    def to_dict(self) -> dict:
        return {"node": self.node, "kind": self.kind, "mean": self.mean, "variance": self.variance}


def intervene(scm: LinearScm, iv: Intervention) -> LinearScm:
    """Sever the node's incoming edges and replace its mechanism; everything else is shared."""
    node = _check_node(scm.dag, iv.node)
    dag = Dag(
        n_nodes=scm.n_nodes,
        edges=frozenset(e for e in scm.dag.edges if e[1] != node),
    )
    replaced = Mechanism(node=node, weights={}, mean=iv.mean, noise_var=iv.variance)
    mechanisms = tuple(replaced if m.node == node else m for m in scm.mechanisms)
    return LinearScm(dag=dag, mechanisms=mechanisms)


def random_intervention(
    scm: LinearScm,
    target: Optional[int],
    rng: np.random.Generator,
    allow_target: bool = False,
    mean_range: Tuple[float, float] = (-4.0, 4.0),
    variance: float = 1.0,
) -> Intervention:
    """Single-node do-distribution on a uniformly chosen node."""
    candidates = [
        d for d in range(scm.n_nodes) if allow_target or target is None or d != target
    ]
    if not candidates:
        raise ScmError("no node is available for intervention")
    node = int(candidates[rng.integers(len(candidates))])
    return Intervention.do_distribution(node, rng.uniform(*mean_range), variance)


@dataclass(frozen=True)
class EnvironmentSpec:
    interventions: Tuple[Intervention, ...] = ()
    n_samples: int = 100

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ScmError(f"n_samples must be >= 1, got {self.n_samples}")
        object.__setattr__(self, "interventions", tuple(self.interventions))

    def intervened_nodes(self) -> FrozenSet[int]:
        return frozenset(iv.node for iv in self.interventions)


def make_benchmark_environments(
    scm: LinearScm,
    n_envs: int,
    n_samples: int,
    target: Optional[int],
    rng: np.random.Generator,
    allow_target: bool = False,
) -> List[EnvironmentSpec]:
    """One observational environment followed by n_envs - 1 single-node interventions."""
    if n_envs < 1:
        raise ScmError(f"n_envs must be >= 1, got {n_envs}")
    specs = [EnvironmentSpec(interventions=(), n_samples=n_samples)]
    for _ in range(n_envs - 1):
        iv = random_intervention(scm, target, rng, allow_target=allow_target)
        specs.append(EnvironmentSpec(interventions=(iv,), n_samples=n_samples))
    return specs


def apply_interventions(scm: LinearScm, interventions: Iterable[Intervention]) -> LinearScm:
    for iv in interventions:
        scm = intervene(scm, iv)
    return scm


def sample_blocks(
    scm: LinearScm, specs: Sequence[EnvironmentSpec], rng: np.random.Generator
) -> List[np.ndarray]:
    """Full node matrices, one per environment, each from its own child stream."""
    if not specs:
        raise ScmError("at least one environment spec is required")
    streams = rng.spawn(len(specs))
    blocks = []
    for spec, stream in zip(specs, streams):
        blocks.append(sample(apply_interventions(scm, spec.interventions), spec.n_samples, stream))
    return blocks


def predictor_nodes(n_nodes: int, target: int) -> List[int]:
    return [d for d in range(n_nodes) if d != target]


def blocks_to_dataset(blocks: Sequence[np.ndarray], target: int) -> EnvironmentDataset:
    n_nodes = blocks[0].shape[1]
    if not 0 <= target < n_nodes:
        raise ScmError(f"invalid target {target} for {n_nodes} nodes")
    cols = predictor_nodes(n_nodes, target)
    return EnvironmentDataset(
        X=[b[:, cols] for b in blocks],
        y=[b[:, target] for b in blocks],
        predictor_names=[f"x{d}" for d in cols],
        target_name="y",
        target_kind="continuous",
    )


def sample_environments(
    scm: LinearScm,
    specs: Sequence[EnvironmentSpec],
    target: int,
    rng: np.random.Generator,
) -> EnvironmentDataset:
    _check_node(scm.dag, target)
    intervened = [s for s in specs if target in s.intervened_nodes()]
    if intervened:
        logger.debug("Target is intervened in %d environment(s) | target=%s", len(intervened), target)
    return blocks_to_dataset(sample_blocks(scm, specs, rng), target)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scm_to_dict(scm: LinearScm) -> dict:
    return {
        "nodes": scm.n_nodes,
        "edges": [
            {"from": i, "to": j, "weight": w} for (i, j), w in sorted(scm.weights.items())
        ],
        "noise_vars": [float(v) for v in scm.noise_vars],
        "means": [float(m) for m in scm.node_means],
    }


def scm_from_dict(payload: Mapping) -> LinearScm:
    try:
        n_nodes = int(payload["nodes"])
        edges = [(int(e["from"]), int(e["to"])) for e in payload["edges"]]
        weights = {(int(e["from"]), int(e["to"])): float(e["weight"]) for e in payload["edges"]}
        noise_vars = [float(v) for v in payload["noise_vars"]]
        means = [float(m) for m in payload.get("means", [0.0] * n_nodes)]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScmError(f"malformed SCM payload: {exc}") from exc
    if len(noise_vars) != n_nodes or len(means) != n_nodes:
        raise ScmError("noise_vars and means need one entry per node")
    dag = Dag(n_nodes=n_nodes, edges=frozenset(edges))
    return LinearScm.from_arrays(dag, weights, noise_vars, means)


def save_scm(scm: LinearScm, path: Path) -> None:
    Path(path).write_text(json.dumps(scm_to_dict(scm), indent=2, sort_keys=True))


def load_scm(path: Path) -> LinearScm:
    return scm_from_dict(json.loads(Path(path).read_text()))
