"""Experiment configuration: strict JSON loading, defaults and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


TOP_KEYS = {"arch", "data", "train", "analysis", "output_dir", "seed"}
REQUIRED_TOP = {"arch", "data", "train", "output_dir", "seed"}
ARCH_KEYS = {"stage_sizes", "topology", "base_width", "num_classes", "input_dim", "norm", "bias"}
REQUIRED_ARCH = {"stage_sizes", "topology", "base_width", "num_classes"}
DATA_KEYS = {
    "synthetic-spirals": {"n", "noise", "turns", "val_fraction"},
    "synthetic-blobs": {"n", "k", "dim", "spread", "val_fraction"},
    "csv": {"path", "val_path", "num_classes", "val_fraction"},
    "idx": {"images", "labels", "val_images", "val_labels", "num_classes", "val_fraction"},
}
DATA_REQUIRED = {
    "synthetic-spirals": set(),
    "synthetic-blobs": set(),
    "csv": {"path", "num_classes"},
    "idx": {"images", "labels", "num_classes"},
}
ANALYSIS_KEYS = {
    "node_ablation",
    "edge_pruning",
    "histogram_bins",
    "snapshot_retrain",
    "retrain",
}
PRUNING_KEYS = {"thresholds", "fractions", "retrain"}


def _check_keys(section: str, got: dict, allowed: set, required: set = frozenset()) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(got) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    missing = set(required) - set(got)
    if missing:
        raise ConfigError(f"missing key(s) in {section}: {', '.join(sorted(missing))}")


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        out = Path(self.raw["output_dir"])
        return out if out.is_absolute() else self.base_dir / out

    @property
    def arch(self) -> dict:
        return self.raw["arch"]

    @property
    def data(self) -> dict:
        """Data section with relative file paths resolved against the config's directory."""
        d = dict(self.raw["data"])
        for key in ("path", "val_path", "images", "labels", "val_images", "val_labels"):
            if key in d and not Path(d[key]).is_absolute():
                d[key] = str(self.base_dir / d[key])
        return d

    @property
    def analysis(self) -> dict:
        return self.raw.get("analysis", {})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["train"], "seed": self.seed})

    def retrain_config(self) -> TrainConfig:
        """Training settings for frozen-alpha retraining; ``analysis.retrain`` overrides ``train``."""
        merged = {**self.raw["train"], **self.analysis.get("retrain", {}), "seed": self.seed}
        merged.pop("snapshot_epochs", None)
        return TrainConfig.from_dict(merged)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON; ``output_dir`` is excluded since it does not affect results."""
    body = {k: v for k, v in raw.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def validate(raw: dict) -> None:
    _check_keys("config", raw, TOP_KEYS, REQUIRED_TOP)
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
        raise ConfigError("output_dir must be a non-empty string")

    arch = raw["arch"]
    _check_keys("arch", arch, ARCH_KEYS, REQUIRED_ARCH)
    sizes = arch["stage_sizes"]
    if not isinstance(sizes, list) or not sizes or not all(isinstance(n, int) and n >= 2 for n in sizes):
        raise ConfigError("arch.stage_sizes must be a non-empty list of integers >= 2")
    topo = arch["topology"]
    topos = topo if isinstance(topo, list) else [topo]
    if isinstance(topo, list) and len(topo) != len(sizes):
        raise ConfigError(f"arch.topology lists {len(topo)} stages, stage_sizes has {len(sizes)}")
    for t in topos:
        if not isinstance(t, dict) or "type" not in t:
            raise ConfigError("each topology must be an object with a 'type'")

    data = raw["data"]
    if not isinstance(data, dict) or data.get("source") not in DATA_KEYS:
        raise ConfigError(f"data.source must be one of {sorted(DATA_KEYS)}")
    source = data["source"]
    _check_keys("data", data, DATA_KEYS[source] | {"source"}, DATA_REQUIRED[source])

    train = raw["train"]
    if not isinstance(train, dict):
        raise ConfigError("train must be an object")
    if "seed" in train:
        raise ConfigError("train.seed is not allowed; use the top-level seed")
    try:
        tc = TrainConfig.from_dict({**train, "seed": raw["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    if any(e < 0 or e > tc.epochs for e in tc.snapshot_epochs):
        raise ConfigError("train.snapshot_epochs must lie in [0, epochs]")

    analysis = raw.get("analysis", {})
    _check_keys("analysis", analysis, ANALYSIS_KEYS)
    if "edge_pruning" in analysis:
        _check_keys("analysis.edge_pruning", analysis["edge_pruning"], PRUNING_KEYS)
    if "retrain" in analysis:
        retrain = analysis["retrain"]
        if not isinstance(retrain, dict) or "seed" in retrain:
            raise ConfigError("analysis.retrain must be an object of train settings without seed")
        try:
            TrainConfig.from_dict({**train, **retrain, "seed": raw["seed"]})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"analysis.retrain: {exc}") from exc
    bins = analysis.get("histogram_bins", 20)
    if not isinstance(bins, int) or bins < 2:
        raise ConfigError("analysis.histogram_bins must be an integer >= 2")


def parse_config(
    raw: dict,
    base_dir: str | Path = ".",
    output_dir: str | None = None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Validate ``raw``; only ``output_dir`` and ``seed`` may be overridden."""
    raw = copy.deepcopy(raw)
    if output_dir is not None:
        raw["output_dir"] = output_dir
    if seed is not None:
        raw["seed"] = seed
    validate(raw)
    return ExperimentConfig(raw, Path(base_dir))


def load_config(path: str | Path, output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(raw, path.parent, output_dir, seed)
