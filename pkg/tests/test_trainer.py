import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topolearn import autodiff as ad
from topolearn.autodiff import Parameter, Tape, Tensor
from topolearn.graph import build_graph
from topolearn.network import build_network, forward
from topolearn.trainer import (
    SGD,
    Dataset,
    Metrics,
    TrainConfig,
    TrainingError,
    lr_at,
    sgd_step,
    sparsity_coefficients,
    sparsity_subgradient,
    total_loss,
    train,
)


def blobs(n=120, seed=0, dim=2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 0.6, (n, dim)) + np.where(y[:, None] == 1, 1.0, -1.0)
    return Dataset(x, y, 2)


# -- total_loss / subgradient ----------------------------------------------------


def test_total_loss_lambda_zero_is_task():
    logits = Tensor([[0.3, -0.2], [1.0, 0.5]])
    loss, task = total_loss(logits, [0, 1], np.array([1.0, -2.0]), 0.0, "uniform")
    assert loss.item() == task.item()


def test_total_loss_adds_l1():
    logits = Tensor(np.zeros((1, 2)))
    task = math.log(2)
    loss, _ = total_loss(logits, [0], np.array([1.0, -2.0]), 1e-4, "uniform")
    assert loss.item() == pytest.approx(task + 3e-4, rel=1e-9)


def test_total_loss_zero_alphas_and_none_type():
    logits = Tensor([[0.3, -0.2]])
    base = ad.softmax_cross_entropy(logits, [1]).item()
    assert total_loss(logits, [1], np.zeros(3), 1e-4, "uniform")[0].item() == base
    assert total_loss(logits, [1], np.ones(3), 1e-4, "none")[0].item() == base


def test_subgradient_examples():
    assert sparsity_subgradient(0.5, 1e-4, "uniform", 3) == 1e-4
    assert sparsity_subgradient(0.7, 1e-4, "adaptive", 1) == 0.0
    assert sparsity_subgradient(-0.7, 1e-4, "adaptive", 1) == 0.0
    assert sparsity_subgradient(-0.3, 1e-4, "adaptive", 8) == pytest.approx(-3 * math.log(2) * 1e-4)
    assert sparsity_subgradient(-0.3, 1e-4, "adaptive", 8) == pytest.approx(-2.079e-4, rel=1e-3)
    assert sparsity_subgradient(0.0, 1e-4, "uniform", 3) == 0.0
    with pytest.raises(ValueError):
        sparsity_subgradient(0.5, 1e-4, "uniform", 0)


def test_coefficient_matrix_matches_scalar_rule():
    g = build_graph(5, [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3), (3, 4)])
    coef = sparsity_coefficients(g, 1e-4, "adaptive", np.float64)
    indeg = g.in_degrees()
    for j, i in g.edges:
        assert coef[i, j] == sparsity_subgradient(1.0, 1e-4, "adaptive", indeg[i])
    assert coef[~g.mask()].sum() == 0


# -- sgd ----------------------------------------------------------------------


def test_sgd_plain_step():
    w = Parameter(np.array([1.0]), "node-weight")
    w.grad = np.array([0.5], dtype=np.float32)
    sgd_step([w], lr=0.1, momentum=0.0, nesterov=False, weight_decay=0.0)
    assert float(w.data[0]) == pytest.approx(0.95)


def test_sgd_momentum_recurrence():
    w = Parameter(np.array([0.0]), "node-weight")
    opt = SGD([w], momentum=0.9, nesterov=False)
    for _ in range(2):
        w.grad = np.array([1.0], dtype=np.float32)
        opt.step(1.0)
    assert float(w.data[0]) == pytest.approx(-2.9)


def test_sgd_nesterov_recurrence():
    w = Parameter(np.array([0.0]), "node-weight")
    opt = SGD([w], momentum=0.9, nesterov=True)
    for _ in range(2):
        w.grad = np.array([1.0], dtype=np.float32)
        opt.step(1.0)
    # step 1: v=1, update 1+0.9; step 2: v=1.9, update 1+1.71
    assert float(w.data[0]) == pytest.approx(-(1.9 + 2.71))


def test_alpha_skips_weight_decay():
    a1 = Parameter(np.array([0.8]), "edge-weight")
    a2 = Parameter(np.array([0.8]), "edge-weight")
    w = Parameter(np.array([0.8]), "node-weight")
    for p in (a1, a2, w):
        p.grad = np.array([0.25], dtype=np.float32)
    SGD([a1, w], momentum=0.9, weight_decay=1e-4).step(0.1)
    SGD([a2], momentum=0.9, weight_decay=0.0).step(0.1)
    assert a1.data.tobytes() == a2.data.tobytes()
    assert w.data[0] != a1.data[0]


def test_sgd_rejects_non_finite_gradient():
    w = Parameter(np.array([0.0, 1.0]), "node-weight")
    w.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(TrainingError, match="non-finite"):
        SGD([w]).step(0.1)


# -- schedules ---------------------------------------------------------------


def test_step_schedule():
    cfg = TrainConfig(epochs=200, lr=0.1, schedule={"type": "step", "milestones": [60, 120, 160], "factor": 0.2})
    assert lr_at(cfg, 130) == pytest.approx(0.004)
    assert lr_at(cfg, 0) == 0.1


def test_cosine_schedule():
    cfg = TrainConfig(epochs=100, lr=0.4, schedule={"type": "cosine"})
    assert lr_at(cfg, 0) == 0.4
    assert lr_at(cfg, 50) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        lr_at(cfg, 100)


@given(
    epochs=st.integers(1, 300),
    kind=st.sampled_from(["step", "cosine"]),
    milestones=st.lists(st.integers(0, 300), max_size=4),
)
def test_schedules_non_increasing(epochs, kind, milestones):
    cfg = TrainConfig(epochs=epochs, lr=0.3, schedule={"type": kind, "milestones": milestones, "factor": 0.2})
    values = [lr_at(cfg, e) for e in range(epochs)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    assert TrainConfig.from_dict({"lambda": 0.5}).lam == 0.5


# -- train -------------------------------------------------------------------


def small_net(seed=0, topo=None, sizes=(5, 5)):
    return build_network(list(sizes), topo or {"type": "complete"}, 6, 2, 2, seed=seed)


def test_zero_epochs_changes_nothing():
    net = small_net()
    before = net.state_digest()
    _, metrics, snaps = train(net, blobs(), blobs(40, 1), TrainConfig(epochs=0, lam=0, sparsity_type="none"))
    assert net.state_digest() == before
    assert len(metrics) == 0 and snaps == []


def test_zero_lr_keeps_parameters_bit_identical():
    net = small_net()
    before = [p.data.tobytes() for p in net.parameters()]
    train(net, blobs(), blobs(40, 1), TrainConfig(epochs=3, lr=0.0, batch_size=16))
    assert [p.data.tobytes() for p in net.parameters()] == before


def test_training_reduces_loss_and_is_deterministic():
    cfg = TrainConfig(epochs=8, lr=0.05, batch_size=16, snapshot_epochs=[0, 4, 8], seed=3)
    a, ma, sa = train(small_net(), blobs(), blobs(60, 1), cfg)
    b, mb, sb = train(small_net(), blobs(), blobs(60, 1), cfg)
    assert ma.to_csv() == mb.to_csv()
    assert a.state_digest() == b.state_digest()
    assert ma.records[-1].task_loss < ma.records[0].task_loss
    assert ma.records[-1].val_acc > 0.85
    assert [r.epoch for r in ma.records] == list(range(1, 9))
    assert [s.epoch for s in sa] == [0, 4, 8]
    assert sa == sb


def test_snapshot_equals_live_state():
    cfg = TrainConfig(epochs=3, lr=0.05, batch_size=16, snapshot_epochs=[2])
    live = {}

    def grab(net, rec):
        live[rec.epoch] = (net.graphs(), net.alpha_matrices())

    _, _, snaps = train(small_net(), blobs(), blobs(40, 1), cfg, on_epoch_end=grab)
    assert list(snaps[0].graphs) == live[2][0]
    assert list(snaps[0].alphas) == live[2][1]


def test_snapshot_is_a_deep_copy():
    cfg = TrainConfig(epochs=2, lr=0.05, batch_size=16, snapshot_epochs=[0])
    net = small_net()
    _, _, snaps = train(net, blobs(), blobs(40, 1), cfg)
    assert all(np.all(a.values[g.mask()] == 1) for g, a in zip(snaps[0].graphs, snaps[0].alphas))
    assert not np.all(net.edge_alphas() == 1)


def test_joint_update_changes_weights_and_alphas_in_one_step():
    net = small_net()
    w_before = net.stages[0].nodes[0].weight.data.copy()
    a_before = net.stages[0].alpha.data.copy()
    data = blobs(8)
    train(net, data, data, TrainConfig(epochs=1, batch_size=8, lr=0.05))
    assert not np.array_equal(net.stages[0].nodes[0].weight.data, w_before)
    assert not np.array_equal(net.stages[0].alpha.data, a_before)


def test_frozen_alpha_never_moves():
    net = small_net()
    a_before = [a.data.tobytes() for a in net.alpha_parameters()]
    train(net, blobs(), blobs(40, 1), TrainConfig(epochs=2, batch_size=16, freeze_alpha=True))
    assert [a.data.tobytes() for a in net.alpha_parameters()] == a_before


def test_alpha_gradient_matches_finite_differences_of_task_loss():
    net = small_net().astype(np.float64)
    data = blobs(16)
    x, y = data.x.astype(np.float64), data.y

    def task():
        return ad.softmax_cross_entropy(forward(net, x, "train"), y)

    alphas = net.alpha_parameters()
    # small step: at 1e-3 the difference quotient straddles ReLU kinks in this batch
    err = ad.grad_check(task, alphas, eps=1e-5, max_coords=None)
    assert err < 1e-3


def test_non_finite_loss_aborts():
    net = small_net()
    net.cls_weight.data[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(TrainingError, match="non-finite"):
        train(net, blobs(), blobs(40, 1), TrainConfig(epochs=1, batch_size=16))


def regular_in_degree_graph(n=6, d=2):
    """Every node except node 1 (no inputs) receives exactly ``d`` edges."""
    edges = []
    for i in range(2, n):
        edges.extend((j, i) for j in range(i - d, i))
    return build_graph(n, edges)


def test_adaptive_equals_uniform_with_scaled_lambda():
    g = regular_in_degree_graph(6, 2)
    indeg = g.in_degrees()
    assert {indeg[i] for _, i in g.edges} == {2}
    data = blobs(40, 4)
    trajectories = []
    for kind, lam in (("adaptive", 1e-2), ("uniform", 1e-2 * math.log(2))):
        net = small_net(sizes=(6,))
        st_ = net.stages[0]
        st_.graph = g
        st_.alpha.data = g.mask().astype(np.float32)
        traj = []
        train(
            net,
            data,
            data,
            TrainConfig(epochs=5, batch_size=40, lr=0.1, lam=lam, sparsity_type=kind),
            on_epoch_end=lambda n_, r: traj.append(n_.stages[0].alpha.data.tobytes()),
        )
        trajectories.append(traj)
    assert len(trajectories[0]) == 5
    assert trajectories[0] == trajectories[1]


def test_metrics_csv_format():
    m = Metrics()
    cfg = TrainConfig(epochs=2, lr=0.05, batch_size=16)
    _, m, _ = train(small_net(), blobs(), blobs(40, 1), cfg)
    lines = m.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,task_loss,l1_alpha,train_acc,val_acc,frac_alpha_small,lr"
    assert len(lines) == 3
    assert lines[1].startswith("1,")
    assert all(len(f.replace("-", "").replace(".", "").replace("e", "").lstrip("0")) <= 8 for f in lines[1].split(","))
