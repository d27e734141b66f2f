"""Joint optimisation of node weights and edge weights with L1 sparsity on edges."""
from __future__ import annotations

import csv
import io
import math
from collections.abc import Callable
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .graph import AlphaMatrix, Graph
from .network import Network, forward, predict
from .prng import Rng

SPARSITY_TYPES = ("none", "uniform", "adaptive")

METRICS_HEADER = (
    "epoch",
    "train_loss",
    "task_loss",
    "l1_alpha",
    "train_acc",
    "val_acc",
    "frac_alpha_small",
    "lr",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    schedule: dict = field(default_factory=lambda: {"type": "cosine"})
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lam: float = 1e-4
    sparsity_type: str = "adaptive"
    label_smoothing: float = 0.0
    seed: int = 0
    snapshot_epochs: list[int] = field(default_factory=list)
    freeze_alpha: bool = False

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.sparsity_type not in SPARSITY_TYPES:
            raise ValueError(f"sparsity_type must be one of {SPARSITY_TYPES}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        kind = self.schedule.get("type")
        if kind not in ("step", "cosine", "constant"):
            raise ValueError(f"unknown schedule {kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    task_loss: float
    l1_alpha: float
    train_acc: float
    val_acc: float
    frac_alpha_small: float
    lr: float


@dataclass
class Metrics:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def last(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [f"{getattr(r, k):.6g}" for k in METRICS_HEADER[1:]])
        return buf.getvalue()


@dataclass(frozen=True)
class Snapshot:
    epoch: int
    graphs: tuple[Graph, ...]
    alphas: tuple[AlphaMatrix, ...]


def take_snapshot(net: Network, epoch: int) -> Snapshot:
    return Snapshot(epoch, tuple(net.graphs()), tuple(net.alpha_matrices()))


# -- loss and sparsity ----------------------------------------------------------------


def l1_norm(net: Network) -> float:
    return float(np.sum(np.abs(net.edge_alphas()), dtype=np.float64))


def total_loss(
    logits: Tensor,
    labels: np.ndarray,
    alphas: np.ndarray,
    lam: float,
    sparsity_type: str = "uniform",
    smoothing: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """Return ``(task + lam * ||alphas||_1, task)``.

    The L1 term only shifts the value; its gradient is applied separately by
    :func:`sparsity_subgradient`.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    task = ad.softmax_cross_entropy(logits, labels, smoothing)
    if sparsity_type == "none" or lam == 0:
        return task, task
    penalty = lam * float(np.sum(np.abs(np.asarray(alphas, dtype=np.float64))))
    return ad.add_scalar(task, penalty), task


def sparsity_subgradient(alpha: float, lam: float, sparsity_type: str, in_degree: int) -> float:
    """Per-edge L1 subgradient: ``lam*sign`` (uniform) or ``lam*ln(in_degree)*sign`` (adaptive)."""
    if in_degree < 1:
        raise ValueError(f"existing edge needs in-degree >= 1, got {in_degree}")
    if sparsity_type == "none":
        return 0.0
    sign = float(np.sign(alpha))
    if sparsity_type == "uniform":
        return lam * sign
    if sparsity_type == "adaptive":
        return lam * math.log(in_degree) * sign
    raise ValueError(f"unknown sparsity type {sparsity_type!r}")


def sparsity_coefficients(graph: Graph, lam: float, sparsity_type: str, dtype=np.float32) -> np.ndarray:
    """Matrix of per-edge penalty weights (0 off-graph) built from the static in-degrees."""
    coef = np.zeros((graph.n_nodes, graph.n_nodes), dtype=np.float64)
    if sparsity_type == "none" or lam == 0:
        return coef.astype(dtype)
    indeg = graph.in_degrees()
    for j, i in graph.edges:
        coef[i, j] = lam if sparsity_type == "uniform" else lam * math.log(indeg[i])
    return coef.astype(dtype)


# -- optimiser -------------------------------------------------------------------------


class SGD:
    """SGD with (Nesterov) momentum, no dampening, weight decay on non-edge params only."""

    def __init__(
        self,
        params: list[Parameter],
        momentum: float = 0.9,
        nesterov: bool = True,
        weight_decay: float = 0.0,
    ) -> None:
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for p in params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float, extra_grads: dict[int, np.ndarray] | None = None) -> None:
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                bad = int(np.count_nonzero(~np.isfinite(g)))
                raise TrainingError(f"non-finite gradient in {p.role} parameter {p.shape}: {bad} entries")
            if p.role != "edge-weight" and self.weight_decay:
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            if extra_grads and id(p) in extra_grads:
                g = g + extra_grads[id(p)]
            v = self.velocity[id(p)]
            if self.momentum:
                v = p.data.dtype.type(self.momentum) * v + g
                self.velocity[id(p)] = v
                update = g + p.data.dtype.type(self.momentum) * v if self.nesterov else v
            else:
                update = g
            p.data = p.data - p.data.dtype.type(lr) * update


def sgd_step(
    params: list[Parameter],
    lr: float,
    momentum: float,
    nesterov: bool,
    weight_decay: float,
    state: SGD | None = None,
) -> SGD:
    """One update using the gradients already in ``params``; returns the optimiser state."""
    opt = state or SGD(params, momentum, nesterov, weight_decay)
    opt.step(lr)
    return opt


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    sched = config.schedule
    kind = sched.get("type", "cosine")
    if kind == "constant":
        return config.lr
    if kind == "step":
        passed = sum(1 for m in sched.get("milestones", []) if epoch >= m)
        return config.lr * float(sched.get("factor", 0.1)) ** passed
    if kind == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    raise ValueError(f"unknown schedule {kind!r}")


# -- training loop ---------------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("features must be (n, d) with one label per row")

    def __len__(self) -> int:
        return len(self.y)


def batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Mini-batches over ``order``; a trailing batch of one sample is dropped (batch norm)."""
    out = [order[s : s + batch_size] for s in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def frac_small(alphas: np.ndarray, cutoff: float = 0.1) -> float:
    return float(np.mean(np.abs(alphas) < cutoff)) if alphas.size else 0.0


def train(
    net: Network,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    on_epoch_end: Callable[[Network, EpochRecord], None] | None = None,
) -> tuple[Network, Metrics, list[Snapshot]]:
    """Train ``net`` in place: one backward per batch, W and alpha updated in the same step.

    Epoch ``e`` in metrics and snapshots means the state after ``e`` completed
    epochs; a snapshot at epoch 0 is the initial state.
    """
    if len(train_set) < 2 or len(val_set) == 0:
        raise TrainingError("training needs at least 2 samples and a non-empty validation set")
    if train_set.x.shape[1] != net.input_dim:
        raise TrainingError(f"data has {train_set.x.shape[1]} features, network expects {net.input_dim}")
    metrics = Metrics()
    snapshots: list[Snapshot] = []
    wanted = set(config.snapshot_epochs)
    if 0 in wanted:
        snapshots.append(take_snapshot(net, 0))

    params = net.parameters()
    for st in net.stages:
        st.alpha.frozen = config.freeze_alpha
    opt = SGD(params, config.momentum, config.nesterov, config.weight_decay)
    sparsity_on = not config.freeze_alpha and config.sparsity_type != "none" and config.lam > 0
    dtype = net.head_weight.dtype
    coefs = [sparsity_coefficients(st.graph, config.lam, config.sparsity_type, dtype) for st in net.stages]

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = Rng.derive(config.seed, "shuffle", epoch).permutation(len(train_set))
        loss_sum = task_sum = 0.0
        correct = seen = 0
        for idx in batches(len(train_set), config.batch_size, order):
            xb, yb = train_set.x[idx], train_set.y[idx]
            opt.zero_grad()
            with Tape() as tape:
                logits = forward(net, xb.astype(dtype, copy=False), "train")
                loss, task = total_loss(
                    logits,
                    yb,
                    net.edge_alphas(),
                    config.lam,
                    config.sparsity_type,
                    config.label_smoothing,
                )
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {int(idx[0])}")
            tape.backward(loss)
            extra = None
            if sparsity_on:
                extra = {id(st.alpha): c * np.sign(st.alpha.data) for st, c in zip(net.stages, coefs)}
            opt.step(lr, extra)
            loss_sum += value * len(idx)
            task_sum += float(task.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            seen += len(idx)

        alphas = net.edge_alphas()
        rec = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / seen,
            task_loss=task_sum / seen,
            l1_alpha=float(np.sum(np.abs(alphas), dtype=np.float64)),
            train_acc=correct / seen,
            val_acc=float(np.mean(predict(net, val_set.x.astype(dtype, copy=False)) == val_set.y)),
            frac_alpha_small=frac_small(alphas),
            lr=lr,
        )
        metrics.append(rec)
        if epoch + 1 in wanted:
            snapshots.append(take_snapshot(net, epoch + 1))
        if on_epoch_end is not None:
            on_epoch_end(net, rec)
    for st in net.stages:
        st.alpha.frozen = False
    return net, metrics, snapshots
