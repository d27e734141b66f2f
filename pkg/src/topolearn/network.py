"""Multi-stage networks whose stages are weighted DAGs.

Each internal node aggregates its predecessors with learnable edge weights and
applies ReLU -> Linear -> BatchNorm. The input node only distributes the stage
input; the output node only aggregates. Stage ``k`` has width ``C * 2**k``.
The first internal node of a stage changes the width; every other consumer of
the stage input sees it zero-padded on the right to the new width.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DEFAULT_DTYPE, Parameter, RunningStats, Tensor
from .graph import AlphaMatrix, Graph, GraphError, make_topology, residual_graph
from .prng import Rng


class ArchitectureError(ValueError):
    pass


@dataclass
class NodeParams:
    weight: Parameter
    bias: Parameter | None
    scale: Parameter | None
    shift: Parameter | None
    stats: RunningStats | None

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias, self.scale, self.shift) if p is not None]


@dataclass
class StageSpec:
    graph: Graph
    alpha: Parameter
    nodes: list[NodeParams]
    width_in: int
    width_out: int
    topology: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def alpha_matrix(self) -> AlphaMatrix:
        return AlphaMatrix(np.where(self.graph.mask(), self.alpha.data, 0).astype(np.float32))

    def install(self, graph: Graph, alpha: AlphaMatrix) -> None:
        """Replace topology and edge weights in place (same node count)."""
        if graph.n_nodes != self.graph.n_nodes:
            raise ArchitectureError(
                f"stage has {self.graph.n_nodes} nodes, snapshot has {graph.n_nodes}"
            )
        if not alpha.conforms_to(graph):
            raise ArchitectureError("alpha matrix does not conform to graph")
        self.graph = graph
        self.alpha.data = alpha.values.astype(self.alpha.dtype)
        self.alpha.zero_grad()


@dataclass
class Network:
    head_weight: Parameter
    head_bias: Parameter | None
    stages: list[StageSpec]
    cls_weight: Parameter
    cls_bias: Parameter | None
    arch: dict

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[1]

    @property
    def input_dim(self) -> int:
        return self.head_weight.shape[0]

    @property
    def use_norm(self) -> bool:
        return bool(self.arch.get("norm", True))

    def parameters(self) -> list[Parameter]:
        params = [self.head_weight]
        if self.head_bias is not None:
            params.append(self.head_bias)
        for st in self.stages:
            params.append(st.alpha)
            for node in st.nodes:
                params.extend(node.parameters())
        params.append(self.cls_weight)
        if self.cls_bias is not None:
            params.append(self.cls_bias)
        return params

    def alpha_parameters(self) -> list[Parameter]:
        return [st.alpha for st in self.stages]

    def weight_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.role != "edge-weight"]

    def graphs(self) -> list[Graph]:
        return [st.graph for st in self.stages]

    def alpha_matrices(self) -> list[AlphaMatrix]:
        return [st.alpha_matrix() for st in self.stages]

    def edge_alphas(self) -> np.ndarray:
        """Edge weights of every existing edge, stage by stage."""
        parts = [st.alpha_matrix().edge_values(st.graph) for st in self.stages]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)

    def running_stats(self) -> list[RunningStats]:
        return [n.stats for st in self.stages for n in st.nodes if n.stats is not None]

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def astype(self, dtype) -> Network:
        """Deep copy with every parameter and running statistic cast to ``dtype``."""
        net = self.copy()
        for p in net.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for s in net.running_stats():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return net

    def state_digest(self) -> str:
        """SHA-256 over topology, parameters and running statistics."""
        h = hashlib.sha256()
        for st in self.stages:
            h.update(repr(st.graph.edges).encode())
        for p in self.parameters():
            h.update(p.data.tobytes())
        for s in self.running_stats():
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.hexdigest()


def stage_widths(n_stages: int, base_width: int) -> list[tuple[int, int]]:
    widths = []
    w_in = base_width
    for k in range(n_stages):
        w_out = base_width * 2**k
        widths.append((w_in, w_out))
        w_in = w_out
    return widths


def _he_normal(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal_array((fan_in, fan_out), std=float(np.sqrt(2.0 / fan_in)))


def _node_params(rng: Rng, fan_in: int, width: int, norm: bool, bias: bool) -> NodeParams:
    return NodeParams(
        weight=Parameter(_he_normal(rng, fan_in, width), "node-weight"),
        bias=Parameter(np.zeros(width), "node-weight") if bias else None,
        scale=Parameter(np.ones(width), "norm-scale") if norm else None,
        shift=Parameter(np.zeros(width), "norm-shift") if norm else None,
        stats=RunningStats.fresh(width) if norm else None,
    )


def normalize_topologies(topology, n_stages: int) -> list[dict]:
    if isinstance(topology, dict):
        return [dict(topology) for _ in range(n_stages)]
    topologies = [dict(t) for t in topology]
    if len(topologies) != n_stages:
        raise ArchitectureError(f"{len(topologies)} topology specs for {n_stages} stages")
    return topologies


def build_network(
    stage_sizes: list[int],
    topology: dict | list[dict],
    base_width: int,
    input_dim: int,
    num_classes: int,
    seed: int,
    norm: bool = True,
    bias: bool = True,
) -> Network:
    """Build a network with all edge weights 1 and He-normal linear layers.

    ``topology`` is one spec for every stage or a list with one per stage,
    e.g. ``{"type": "complete"}`` or ``{"type": "residual", "interval": 2}``.
    """
    if not stage_sizes:
        raise ArchitectureError("need at least one stage")
    if base_width < 1 or input_dim < 1 or num_classes < 2:
        raise ArchitectureError("base_width, input_dim must be >= 1 and num_classes >= 2")
    topologies = normalize_topologies(topology, len(stage_sizes))
    arch = {
        "stage_sizes": [int(n) for n in stage_sizes],
        "topology": topologies,
        "base_width": int(base_width),
        "input_dim": int(input_dim),
        "num_classes": int(num_classes),
        "seed": int(seed),
        "norm": bool(norm),
        "bias": bool(bias),
    }
    rng = Rng.derive(seed, "init")
    head_weight = Parameter(_he_normal(rng, input_dim, base_width), "head")
    head_bias = Parameter(np.zeros(base_width), "head") if bias else None
    stages = []
    for k, ((w_in, w_out), n, spec) in enumerate(
        zip(stage_widths(len(stage_sizes), base_width), stage_sizes, topologies)
    ):
        try:
            graph = make_topology(spec, int(n), Rng.derive(seed, "graph", k).next_u64())
        except (GraphError, KeyError, TypeError, ValueError) as exc:
            raise ArchitectureError(f"stage {k}: {exc}") from exc
        nodes = [
            _node_params(rng, w_in if i == 1 else w_out, w_out, norm, bias)
            for i in range(1, graph.n_nodes - 1)
        ]
        alpha = Parameter(AlphaMatrix.ones(graph).values, "edge-weight")
        stages.append(StageSpec(graph, alpha, nodes, w_in, w_out, spec))
    final = stages[-1].width_out
    cls_weight = Parameter(_he_normal(rng, final, num_classes), "classifier")
    cls_bias = Parameter(np.zeros(num_classes), "classifier") if bias else None
    return Network(head_weight, head_bias, stages, cls_weight, cls_bias, arch)


# -- forward --------------------------------------------------------------------


def node_transform(node: NodeParams, x: Tensor, mode: str) -> Tensor:
    """ReLU -> Linear -> BatchNorm."""
    h = ad.linear(ad.relu(x), node.weight, node.bias)
    if node.scale is not None:
        h = ad.batch_norm(h, node.scale, node.shift, node.stats, mode)
    return h


def _zeros(batch: int, width: int, dtype) -> Tensor:
    return Tensor(np.zeros((batch, width), dtype=dtype), dtype=dtype)


def stage_forward(
    stage: StageSpec, x: Tensor, mode: str, aggregates: dict[int, Tensor] | None = None
) -> Tensor:
    """Run one stage in topological order, memoising node outputs.

    When ``aggregates`` is given it receives each node's pre-transform sum.
    """
    if x.shape[1] != stage.width_in:
        raise ArchitectureError(f"stage expects width {stage.width_in}, got {x.shape[1]}")
    n = stage.n_nodes
    if n < 2:
        raise ArchitectureError("empty graph stage")
    rev_adj = stage.graph.predecessors()
    batch, dtype = x.shape[0], x.dtype
    memory: dict[int, Tensor] = {0: x}
    padded_input: Tensor | None = None

    def fetch(j: int, consumer: int) -> Tensor:
        nonlocal padded_input
        if j != 0 or (consumer == 1 and n > 2):
            return memory[j]
        if padded_input is None:
            padded_input = ad.pad_cols(x, stage.width_out)
        return padded_input

    for i in range(1, n):
        preds = rev_adj[i]
        width = stage.width_in if i == 1 and n > 2 else stage.width_out
        if preds:
            weights = ad.take(stage.alpha, [i] * len(preds), preds)
            agg = ad.weighted_sum([fetch(j, i) for j in preds], weights)
        else:
            agg = _zeros(batch, width, dtype)
        if aggregates is not None:
            aggregates[i] = agg
        memory[i] = agg if i == n - 1 else node_transform(stage.nodes[i - 1], agg, mode)
    return memory[n - 1]


def features(net: Network, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
    """Pre-classifier representation: head then every stage in series."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=net.head_weight.dtype)
    if x.data.ndim != 2 or x.shape[1] != net.input_dim:
        raise ArchitectureError(f"batch must have {net.input_dim} columns, got shape {x.shape}")
    h = ad.linear(x, net.head_weight, net.head_bias)
    for stage in net.stages:
        h = stage_forward(stage, h, mode)
    return h


def forward(net: Network, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
    return ad.linear(features(net, batch, mode), net.cls_weight, net.cls_bias)


# -- natural-perspective oracle -------------------------------------------------------


def residual_interval(stage: StageSpec) -> int:
    """Interval of a residual/complete stage, or raise if the stage is anything else."""
    kind = stage.topology.get("type")
    if kind == "complete":
        interval = 1
    elif kind == "residual":
        interval = int(stage.topology["interval"])
    else:
        raise ArchitectureError(f"stage topology {kind!r} is not residual")
    if stage.n_nodes > 2 and stage.graph != residual_graph(stage.n_nodes, interval):
        raise ArchitectureError("stage graph no longer matches its residual construction")
    if not np.array_equal(stage.alpha.data, stage.graph.mask().astype(stage.alpha.dtype)):
        raise ArchitectureError("natural residual form requires every edge weight to be 1")
    return interval


def natural_residual_stage(stage: StageSpec, x: Tensor, mode: str) -> Tensor:
    """``s_b = s_{b-1} + block_b(s_{b-1})`` with blocks of ``interval`` chained nodes."""
    interval = residual_interval(stage)
    s = x
    for start in range(1, stage.n_nodes - 1, interval):
        h = s
        for m in range(start, start + interval):
            h = node_transform(stage.nodes[m - 1], h, mode)
        s = ad.add(ad.pad_cols(s, stage.width_out), h)
    return ad.pad_cols(s, stage.width_out)


def natural_residual_features(net: Network, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=net.head_weight.dtype)
    h = ad.linear(x, net.head_weight, net.head_bias)
    for stage in net.stages:
        h = natural_residual_stage(stage, h, mode)
    return h


def natural_residual_forward(net: Network, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
    """Residual network evaluated as explicit running sums; same parameters as :func:`forward`."""
    return ad.linear(natural_residual_features(net, batch, mode), net.cls_weight, net.cls_bias)


def predict(net: Network, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    preds = []
    for start in range(0, len(x), batch_size):
        logits = forward(net, x[start : start + batch_size], "eval")
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(predict(net, x) == y))

