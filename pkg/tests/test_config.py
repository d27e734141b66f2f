import json

import pytest

from topolearn.config import ConfigError, config_hash, load_config, parse_config


def base_config(**overrides):
    cfg = {
        "seed": 3,
        "output_dir": "out",
        "arch": {"stage_sizes": [4, 4], "topology": {"type": "complete"}, "base_width": 4, "num_classes": 2},
        "data": {"source": "synthetic-spirals", "n": 60, "noise": 0.05},
        "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "snapshot_epochs": [0, 2]},
        "analysis": {"node_ablation": True, "histogram_bins": 5},
    }
    cfg.update(overrides)
    return cfg


def test_parse_valid():
    cfg = parse_config(base_config())
    tc = cfg.train_config()
    assert tc.seed == 3 and tc.epochs == 2 and tc.sparsity_type == "adaptive"
    assert len(cfg.hash) == 64


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda c: c.update(extra=1), "unknown key"),
        (lambda c: c.pop("seed"), "missing key"),
        (lambda c: c["arch"].update(depth=3), "unknown key.*arch"),
        (lambda c: c["arch"].pop("base_width"), "missing key.*arch"),
        (lambda c: c["data"].update(path="x.csv"), "unknown key.*data"),
        (lambda c: c["data"].update(source="tape"), "data.source"),
        (lambda c: c["train"].update(seed=1), "top-level seed"),
        (lambda c: c["train"].update(optimizer="adam"), "unknown train keys"),
        (lambda c: c["train"].update(momentum=1.0), "momentum"),
        (lambda c: c["train"].update(snapshot_epochs=[5]), "snapshot_epochs"),
        (lambda c: c["analysis"].update(plots=True), "unknown key.*analysis"),
        (lambda c: c["analysis"].update(histogram_bins=1), "histogram_bins"),
        (lambda c: c.update(seed=-1), "seed"),
        (lambda c: c["arch"].update(topology=[{"type": "complete"}]), "topology lists"),
    ],
)
def test_rejections(mutate, message):
    cfg = base_config()
    mutate(cfg)
    with pytest.raises(ConfigError, match=message):
        parse_config(cfg)


def test_lambda_key_accepted():
    cfg = base_config()
    cfg["train"]["lambda"] = 0.0
    assert parse_config(cfg).train_config().lam == 0.0


def test_hash_canonical_and_sensitive():
    a = base_config()
    b = json.loads(json.dumps(a, sort_keys=True))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) == config_hash(base_config(output_dir="elsewhere"))
    assert config_hash(a) != config_hash(base_config(seed=4))


def test_overrides_limited_to_output_and_seed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(base_config()))
    cfg = load_config(p, output_dir=str(tmp_path / "o2"), seed=9)
    assert cfg.seed == 9 and cfg.output_dir == tmp_path / "o2"
    assert cfg.hash == config_hash(base_config(seed=9))
    assert load_config(p).output_dir == tmp_path / "out"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_retrain_section_overrides_train():
    cfg = parse_config(base_config(analysis={"retrain": {"epochs": 7}}))
    rc = cfg.retrain_config()
    assert rc.epochs == 7 and rc.snapshot_epochs == [] and rc.lr == 0.05
