"""End-to-end experiment runs: data, training, checkpoints, sweeps and a manifest."""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import platform
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__, checkpoint
from .analysis import (
    adjacency_exports,
    alpha_histogram,
    edge_pruning_sweep,
    node_ablation_sweep,
    quantile_threshold,
    snapshot_retrain_study,
)
from .config import ExperimentConfig
from .data import load_dataset
from .graph import dumps_graph
from .network import Network, build_network
from .trainer import Dataset, train

LOCK_NAME = ".lock"
DEFAULT_PRUNE_FRACTIONS = [0.0, 0.2, 0.4, 0.6, 0.8]


class ExperimentError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(out_dir: Path) -> Iterator[None]:
    """Exclusive lock file; a second run on the same directory fails immediately."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ExperimentError(f"output directory {out_dir} is locked by another run") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class ArtifactWriter:
    """Writes files into the run directory and remembers their SHA-256."""

    def __init__(self, out_dir: Path) -> None:
        self.out_dir = out_dir
        self.digests: dict[str, str] = {}

    def write(self, name: str, data: str | bytes) -> Path:
        blob = data.encode() if isinstance(data, str) else data
        path = self.out_dir / name
        path.write_bytes(blob)
        self.digests[name] = hashlib.sha256(blob).hexdigest()
        return path

    def manifest(self, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
        doc = {
            "config_hash": cfg.hash,
            "seed": cfg.seed,
            "config": cfg.raw,
            "versions": {
                "topolearn": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "artifacts": dict(sorted(self.digests.items())),
            **(extra or {}),
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def build_from_config(cfg: ExperimentConfig, input_dim: int) -> Network:
    arch = cfg.arch
    if "input_dim" in arch and arch["input_dim"] != input_dim:
        raise ExperimentError(f"arch.input_dim={arch['input_dim']} but data has {input_dim} features")
    return build_network(
        arch["stage_sizes"],
        arch["topology"],
        arch["base_width"],
        input_dim,
        arch["num_classes"],
        cfg.seed,
        norm=arch.get("norm", True),
        bias=arch.get("bias", True),
    )


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train_set, val_set = load_dataset(cfg.data, cfg.seed)
    if train_set.num_classes != cfg.arch["num_classes"]:
        raise ExperimentError(
            f"data has {train_set.num_classes} classes, arch.num_classes={cfg.arch['num_classes']}"
        )
    return train_set, val_set


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_e{epoch:04d}.tpnc"


def run_analysis(
    cfg: ExperimentConfig,
    net: Network,
    train_set: Dataset,
    val_set: Dataset,
    writer: ArtifactWriter,
    snapshots=(),
) -> None:
    spec = cfg.analysis
    meta = {"seed": cfg.seed, "config_hash": cfg.hash}

    hist = alpha_histogram(net, spec.get("histogram_bins", 20))
    writer.write("alpha_histogram.csv", hist.to_csv())
    for k, text in enumerate(adjacency_exports(net)):
        writer.write(f"topology_stage{k}.txt", text)

    if spec.get("node_ablation", True):
        r = node_ablation_sweep(net, val_set, meta)
        writer.write("node_ablation.csv", r.to_csv())
        writer.write("node_ablation.json", r.sidecar())

    pruning = spec.get("edge_pruning", {})
    if pruning is not False:
        if "thresholds" in pruning:
            thresholds = sorted(float(t) for t in pruning["thresholds"])
        else:
            fractions = sorted(pruning.get("fractions", DEFAULT_PRUNE_FRACTIONS))
            thresholds = [quantile_threshold(net, f) for f in fractions]
        retrain = bool(pruning.get("retrain", False))
        r = edge_pruning_sweep(
            net,
            val_set,
            thresholds,
            retrain=retrain,
            retrain_config=cfg.retrain_config() if retrain else None,
            train_set=train_set,
            metadata=meta,
        )
        writer.write("edge_pruning.csv", r.to_csv())
        writer.write("edge_pruning.json", r.sidecar())

    if spec.get("snapshot_retrain", False) and len(snapshots) >= 2:
        r = snapshot_retrain_study(list(snapshots), train_set, val_set, net.arch, cfg.retrain_config(), meta)
        writer.write("snapshot_retrain.csv", r.to_csv())
        writer.write("snapshot_retrain.json", r.sidecar())
        for snap in snapshots:
            for k, (g, a) in enumerate(zip(snap.graphs, snap.alphas)):
                writer.write(f"topology_stage{k}_e{snap.epoch:04d}.txt", dumps_graph(g, a))


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Execute one configured run; returns the manifest path."""
    out = cfg.output_dir
    with output_lock(out):
        writer = ArtifactWriter(out)
        train_set, val_set = load_data(cfg)
        net = build_from_config(cfg, train_set.x.shape[1])
        tc = cfg.train_config()

        if tc.epochs == 0:
            writer.write(checkpoint_name(0), checkpoint.dumps(net, 0, cfg.hash))
            return writer.manifest(cfg, {"epochs": 0})

        if 0 in tc.snapshot_epochs:
            writer.write(checkpoint_name(0), checkpoint.dumps(net, 0, cfg.hash))

        def on_epoch_end(n: Network, rec) -> None:
            if rec.epoch in tc.snapshot_epochs:
                writer.write(checkpoint_name(rec.epoch), checkpoint.dumps(n, rec.epoch, cfg.hash))

        _, metrics, snapshots = train(net, train_set, val_set, tc, on_epoch_end)
        writer.write("metrics.csv", metrics.to_csv())
        writer.write("checkpoint_final.tpnc", checkpoint.dumps(net, tc.epochs, cfg.hash))
        run_analysis(cfg, net, train_set, val_set, writer, snapshots)
        last = metrics.last()
        return writer.manifest(cfg, {"epochs": tc.epochs, "final_val_acc": last.val_acc})


def analyze_checkpoint(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Re-run the configured sweeps on a stored checkpoint."""
    out = cfg.output_dir
    with output_lock(out):
        train_set, val_set = load_data(cfg)
        expected = {
            "stage_sizes": cfg.arch["stage_sizes"],
            "base_width": cfg.arch["base_width"],
            "num_classes": cfg.arch["num_classes"],
            "input_dim": train_set.x.shape[1],
        }
        ck = checkpoint.load(path, expected)
        if ck.config_hash and ck.config_hash != cfg.hash:
            raise ExperimentError(f"checkpoint config hash {ck.config_hash[:12]} differs from {cfg.hash[:12]}")
        writer = ArtifactWriter(out)
        run_analysis(cfg, ck.net, train_set, val_set, writer)
        path = out / "analysis_manifest.json"
        doc = {
            "config_hash": cfg.hash,
            "seed": cfg.seed,
            "checkpoint_epoch": ck.epoch,
            "artifacts": dict(sorted(writer.digests.items())),
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def inspect_checkpoint(path: str | Path) -> dict:
    ck = checkpoint.load(path)
    net = ck.net
    alphas = net.edge_alphas()
    return {
        "epoch": ck.epoch,
        "config_hash": ck.config_hash,
        "arch": net.arch,
        "stages": [
            {"nodes": st.n_nodes, "edges": len(st.graph.edges), "width_in": st.width_in, "width_out": st.width_out}
            for st in net.stages
        ],
        "l1_alpha": float(np.sum(np.abs(alphas), dtype=np.float64)),
        "frac_alpha_small": float(np.mean(np.abs(alphas) < 0.1)) if alphas.size else 0.0,
        "state_digest": net.state_digest(),
    }
