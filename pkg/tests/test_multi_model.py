from collections import OrderedDict

import numpy as np
import pytest
from conftest import small_net

from pyramidsep import ReplicaGroup, TrainConfig, pinned_gates, replica_rng_streams, sgd_nesterov_step, split_batch
from pyramidsep.layers import softmax_cross_entropy
from pyramidsep.multi_model import ReplicaDivergenceError, average_gradients
from pyramidsep.optim import OptimizerState

CFG = TrainConfig(initial_lr=0.1, milestones=(), total_epochs=5, batch_size=8, weight_decay=1e-4)


def batch(n=8, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 3, size, size)).astype(np.float32), rng.integers(0, 10, n)


@pytest.mark.parametrize("n, k", [(128, 4), (128, 16), (128, 1), (6, 3)])
def test_split_batch_sizes_and_concat(n, k):
    x = np.arange(n * 2.0).reshape(n, 2)
    y = np.arange(n)
    subs = split_batch(x, y, k)
    assert len(subs) == k and all(len(s[0]) == n // k for s in subs)
    assert np.array_equal(np.concatenate([s[0] for s in subs]), x)
    assert np.array_equal(np.concatenate([s[1] for s in subs]), y)


def test_split_batch_k1_is_unchanged_and_indivisible_rejected():
    x, y = batch()
    (sx, sy), = split_batch(x, y, 1)
    assert np.array_equal(sx, x) and np.array_equal(sy, y)
    with pytest.raises(ValueError, match="cannot be divided"):
        split_batch(x, y, 3)


def single_gradient(net, x, y, gates):
    net.zero_grad()
    softmax_cross_entropy(net.forward(x, gates), y).backward()
    return OrderedDict((k, t.grad.copy()) for k, t in net.parameters().items())


def max_rel(a, b):
    return max(np.max(np.abs(a[k] - b[k])) / max(np.max(np.abs(b[k])), 1e-12) for k in a)


def perturb_bn(net, seed=0):
    rng = np.random.default_rng(seed)
    for bn in net.batchnorms():
        bn.running_mean[...] = rng.uniform(-0.2, 0.2, bn.channels)
        bn.running_var[...] = rng.uniform(0.5, 1.5, bn.channels)


def test_frozen_bn_k2_average_equals_concatenated_batch():
    net = small_net(seed=1)
    perturb_bn(net)
    net.freeze_bn()
    x, y = batch()
    gates = pinned_gates(net.survival)
    group = ReplicaGroup(net.copy(), 2)
    grads, _, _ = group.replica_gradients(split_batch(x, y, 2), [gates, gates])
    assert max_rel(average_gradients(grads), single_gradient(net, x, y, gates)) < 1e-5


def test_training_bn_k2_differs_from_concatenated_batch():
    net = small_net(seed=1)
    x, y = batch()
    gates = pinned_gates(net.survival)
    group = ReplicaGroup(net.copy(), 2)
    grads, _, _ = group.replica_gradients(split_batch(x, y, 2), [gates, gates])
    assert max_rel(average_gradients(grads), single_gradient(net, x, y, gates)) > 1e-3


def test_replicas_identical_after_every_step():
    group = ReplicaGroup(small_net(seed=2), 4)
    rngs = replica_rng_streams(0, 4)
    for s in range(5):
        x, y = batch(seed=s)
        group.synchronized_step(split_batch(x, y, 4), 0.1, CFG, rngs=rngs)
        assert group.max_parameter_difference() == 0.0
        group.check_consistent()
    assert group.steps == 5


def test_divergence_detected_at_entry():
    group = ReplicaGroup(small_net(), 2)
    group.replicas[1].parameters()["head.fc.bias"].data[0] += 1e-6
    x, y = batch()
    with pytest.raises(ReplicaDivergenceError, match="replica 1.*head.fc.bias"):
        group.synchronized_step(split_batch(x, y, 2), 0.1, CFG, rngs=replica_rng_streams(0, 2))


def test_k1_is_plain_single_model_training():
    x, y = batch()
    net = small_net(seed=3)
    ref = net.copy()
    group = ReplicaGroup(net, 1)
    gates = [pinned_gates(net.survival)]
    group.synchronized_step(split_batch(x, y, 1), 0.1, CFG, gates=gates)
    state = OptimizerState(ref.parameters())
    single_gradient(ref, x, y, gates[0])
    sgd_nesterov_step(ref.parameters(), state, 0.1, CFG)
    assert all(np.array_equal(ref.parameters()[k].data, t.data) for k, t in group.primary.parameters().items())


def test_average_is_mean_of_planted_gradients():
    planted = [OrderedDict(w=np.full(3, v, np.float32)) for v in (1.0, 2.0, 6.0)]
    assert average_gradients(planted)["w"].tolist() == [3.0, 3.0, 3.0]
    net = small_net()
    group = ReplicaGroup(net, 3)
    names = list(net.parameters())
    rng = np.random.default_rng(0)
    grads = [OrderedDict((n, rng.standard_normal(t.shape).astype(np.float32)) for n, t in net.parameters().items()) for _ in range(3)]
    group.replica_gradients = lambda subs, gates: (grads, [0.0] * 3, 0)
    before = {n: t.data.copy() for n, t in net.parameters().items()}
    cfg = TrainConfig(initial_lr=1.0, milestones=(), total_epochs=1, batch_size=3, momentum=0.0, weight_decay=0.0)
    x, y = batch(3)
    group.synchronized_step(split_batch(x, y, 3), 1.0, cfg, gates=[None] * 3)
    for n in names:
        mean = (grads[0][n] + grads[1][n] + grads[2][n]) / np.float32(3)
        np.testing.assert_array_equal(before[n] - mean, group.primary.parameters()[n].data)


def test_rng_streams_golden_and_distinct():
    streams = replica_rng_streams(7, 3)
    assert [r.integers(0, 1000, 4).tolist() for r in streams] == [[916, 571, 588, 638], [6, 554, 617, 704], [767, 743, 277, 915]]
    a, b = replica_rng_streams(7, 2)
    assert not np.array_equal(a.random(100), b.random(100))
    assert replica_rng_streams(7, 1)[0].random() == replica_rng_streams(7, 4)[0].random()
    with pytest.raises(ValueError):
        replica_rng_streams(0, 0)


def test_replica_gates_differ_within_100_steps():
    group = ReplicaGroup(small_net(p_last=0.5), 2)
    rngs = replica_rng_streams(0, 2)
    for _ in range(100):
        g0, g1 = group.draw_gates(rngs)
        if [(g.base_gate, g.extra_gate) for g in g0] != [(g.base_gate, g.extra_gate) for g in g1]:
            return
    pytest.fail("replica gate vectors never differed")


def test_consolidated_averages_running_stats():
    group = ReplicaGroup(small_net(), 2)
    rngs = replica_rng_streams(0, 2)
    x, y = batch()
    group.synchronized_step(split_batch(x, y, 2), 0.1, CFG, rngs=rngs)
    name = "s1.b1.bn1.running_mean"
    a, b = (r.buffers()[name] for r in group.replicas)
    assert not np.array_equal(a, b)
    np.testing.assert_allclose(group.consolidated().buffers()[name], (a + b) / 2, rtol=1e-6)


def test_periodic_sync_averages_every_period():
    group = ReplicaGroup(small_net(), 2, sync="periodic", sync_period=3)
    rngs = replica_rng_streams(0, 2)
    for s in range(1, 7):
        x, y = batch(seed=s)
        group.synchronized_step(split_batch(x, y, 2), 0.1, CFG, rngs=rngs)
        if s % 3:
            assert group.max_parameter_difference() > 0
        else:
            assert group.max_parameter_difference() == 0.0
