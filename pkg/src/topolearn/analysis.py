"""Damage, distribution and topology-evolution studies on trained networks."""
from __future__ import annotations

import contextlib
import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .graph import AlphaMatrix, dumps_graph, prune_edges
from .network import ArchitectureError, Network, accuracy, build_network
from .trainer import Dataset, Snapshot, TrainConfig, train


class AnalysisError(ValueError):
    pass


@dataclass
class SweepResult:
    """One metric table along an ordered axis, plus free-form metadata."""

    axis: str
    values: list
    columns: dict[str, list] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise AnalysisError(f"{self.axis} values must be strictly increasing")
        for name, col in self.columns.items():
            if len(col) != len(self.values):
                raise AnalysisError(f"column {name!r} has {len(col)} entries for {len(self.values)} points")

    def column(self, name: str) -> list:
        return self.columns[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, *self.columns])
        for k, v in enumerate(self.values):
            w.writerow([_fmt(v), *(_fmt(c[k]) for c in self.columns.values())])
        return buf.getvalue()

    def sidecar(self) -> str:
        return json.dumps({"axis": self.axis, "points": len(self.values), **self.metadata}, sort_keys=True, indent=2) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def evaluate(net: Network, data: Dataset) -> float:
    return accuracy(net, data.x.astype(net.head_weight.dtype, copy=False), data.y)


@contextlib.contextmanager
def masked_node(net: Network, stage: int, node: int) -> Iterator[None]:
    """Zero every outgoing edge weight of ``node``; restore the exact bytes on exit."""
    alpha = net.stages[stage].alpha
    saved = alpha.data[node + 1 :, node].copy()
    alpha.data[node + 1 :, node] = 0
    try:
        yield
    finally:
        alpha.data[node + 1 :, node] = saved


def node_ablation_sweep(net: Network, eval_set: Dataset, metadata: dict | None = None) -> SweepResult:
    """Accuracy with each internal node removed in turn, without retraining.

    The axis is a running index over internal nodes in stage order; ``stage``
    and ``node`` columns give the local position.
    """
    digest = net.state_digest()
    baseline = evaluate(net, eval_set)
    idx, stages, nodes, accs = [], [], [], []
    for k, st in enumerate(net.stages):
        for i in range(1, st.n_nodes - 1):
            with masked_node(net, k, i):
                acc = evaluate(net, eval_set)
            idx.append(len(idx))
            stages.append(k)
            nodes.append(i)
            accs.append(acc)
    if net.state_digest() != digest:
        raise AnalysisError("node ablation failed to restore the network")
    return SweepResult(
        "position",
        idx,
        {
            "stage": stages,
            "node": nodes,
            "accuracy": accs,
            "drop": [baseline - a for a in accs],
        },
        {"baseline_accuracy": baseline, **(metadata or {})},
    )


def pruned_copy(net: Network, threshold: float) -> tuple[Network, int, int]:
    """Copy of ``net`` with every edge of |alpha| < threshold removed; also (removed, total)."""
    out = net.copy()
    removed = total = 0
    for st in out.stages:
        g, a = prune_edges(st.graph, st.alpha_matrix(), threshold)
        removed += len(st.graph.edges) - len(g.edges)
        total += len(st.graph.edges)
        st.install(g, a)
    return out, removed, total


def quantile_threshold(net: Network, fraction: float) -> float:
    """Threshold that prunes the ``fraction`` smallest-|alpha| edges (ties may prune more)."""
    if not 0.0 <= fraction <= 1.0:
        raise AnalysisError(f"fraction must lie in [0, 1], got {fraction}")
    mags = np.sort(np.abs(net.edge_alphas()).astype(np.float64))
    k = int(round(fraction * mags.size))
    if k == 0:
        return 0.0
    if k >= mags.size:
        return float(np.nextafter(mags[-1], np.inf))
    return float(mags[k])


def retrain_frozen(
    arch: dict,
    graphs,
    alphas,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
) -> Network:
    """Fresh weights from ``arch['seed']``, the given topology installed, alpha frozen."""
    net = build_network(**arch)
    if len(graphs) != len(net.stages):
        raise ArchitectureError(f"{len(graphs)} stage graphs for {len(net.stages)} stages")
    for st, g, a in zip(net.stages, graphs, alphas):
        st.install(g, a)
    train(net, train_set, val_set, replace(config, freeze_alpha=True, snapshot_epochs=[]))
    return net


def edge_pruning_sweep(
    net: Network,
    eval_set: Dataset,
    thresholds,
    retrain: bool = False,
    retrain_config: TrainConfig | None = None,
    train_set: Dataset | None = None,
    metadata: dict | None = None,
) -> SweepResult:
    """Prune edges below each threshold, optionally retrain W with alpha fixed, evaluate."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise AnalysisError("thresholds must be ascending")
    if retrain and (retrain_config is None or train_set is None):
        raise AnalysisError("retrain requested without retrain_config and train_set")
    digest = net.state_digest()
    fracs, accs = [], []
    for t in thresholds:
        pruned, removed, total = pruned_copy(net, t)
        if retrain:
            pruned = retrain_frozen(
                net.arch, pruned.graphs(), pruned.alpha_matrices(), train_set, eval_set, retrain_config
            )
        fracs.append(removed / total if total else 0.0)
        accs.append(evaluate(pruned, eval_set))
    if net.state_digest() != digest:
        raise AnalysisError("edge pruning modified the source network")
    # duplicate thresholds collapse to one point
    keep = [k for k in range(len(thresholds)) if k == 0 or thresholds[k] != thresholds[k - 1]]
    return SweepResult(
        "threshold",
        [thresholds[k] for k in keep],
        {"pruned_fraction": [fracs[k] for k in keep], "accuracy": [accs[k] for k in keep]},
        {"retrain": retrain, **(metadata or {})},
    )


@dataclass
class AlphaHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    matrices: list[AlphaMatrix]

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"{lo:.6g},{hi:.6g},{int(c)}")
        return "\n".join(lines) + "\n"


def alpha_histogram(net: Network, num_bins: int) -> AlphaHistogram:
    """Histogram of existing-edge alpha values over [min, max], plus every stage's matrix."""
    if num_bins < 2:
        raise AnalysisError("num_bins must be >= 2")
    values = net.edge_alphas().astype(np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        edges = np.full(num_bins + 1, lo)
        counts = np.zeros(num_bins, dtype=np.int64)
        counts[-1] = values.size
    else:
        counts, edges = np.histogram(values, bins=num_bins, range=(lo, hi))
    return AlphaHistogram(edges, counts.astype(np.int64), net.alpha_matrices())


def adjacency_exports(net: Network) -> list[str]:
    """Per-stage graph text with alpha values."""
    return [dumps_graph(st.graph, st.alpha_matrix()) for st in net.stages]


def snapshot_retrain_study(
    snapshots: list[Snapshot],
    train_set: Dataset,
    val_set: Dataset,
    arch: dict,
    retrain_config: TrainConfig,
    metadata: dict | None = None,
) -> SweepResult:
    """Retrain each snapshot's topology from scratch with alpha frozen; report final val accuracy."""
    if len(snapshots) < 2:
        raise AnalysisError("need at least two snapshots")
    snaps = sorted(snapshots, key=lambda s: s.epoch)
    accs = []
    for snap in snaps:
        net = retrain_frozen(arch, snap.graphs, snap.alphas, train_set, val_set, retrain_config)
        accs.append(evaluate(net, val_set))
    return SweepResult("epoch", [s.epoch for s in snaps], {"accuracy": accs}, dict(metadata or {}))
