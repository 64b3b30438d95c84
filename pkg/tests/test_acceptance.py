"""Acceptance criteria, each run at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line and the session summary lists
them all (see ``conftest.py``).
"""

import itertools
import time
from collections import OrderedDict

import numpy as np
import pytest
from oracles import preact_resnet8_count, shortcut_only_logits

from pyramidsep import (
    NetworkSpec,
    ReplicaGroup,
    TrainConfig,
    alpha_for_depth,
    build,
    build_channel_schedule,
    build_survival_schedule,
    draw_gates,
    evaluate,
    fit,
    load_network,
    lr_at_epoch,
    parameter_count,
    pinned_gates,
    replica_rng_streams,
    save_network,
    split_batch,
    train_epoch,
)
from pyramidsep.blocks import GateDraw, ResidualBlock, block_forward, blocks_per_stage
from pyramidsep.data import PreprocessSpec, synthesize_dataset
from pyramidsep.gradcheck import run_all
from pyramidsep.layers import softmax_cross_entropy
from pyramidsep.multi_model import average_gradients
from pyramidsep.tensor import Tensor

pytestmark = pytest.mark.acceptance


def images(n, seed=0, size=32):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32)


def test_1_configuration_exactness(criterion):
    t0 = time.perf_counter()
    pairs = {110: 90, 146: 120, 182: 150}
    alphas_ok = all(alpha_for_depth(d) == a for d, a in pairs.items())
    cfg = TrainConfig()
    lrs = [lr_at_epoch(cfg, e) for e in (0, 150, 225)]
    elapsed = time.perf_counter() - t0
    criterion(1, "configuration exactness", alphas_ok and lrs == [0.5, 0.05, 0.005] and elapsed < 1,
              f"alphas {[alpha_for_depth(d) for d in pairs]}, lr {lrs}, {elapsed:.3f}s")


def test_2_gradient_suite(criterion):
    t0 = time.perf_counter()
    net = build(NetworkSpec("pyramid-sep-drop", 8, 5), 0)
    results = run_all(net, seed=0)
    elapsed = time.perf_counter() - t0
    worst_layer = max((r for r in results if r.component != "network"), key=lambda r: r.max_rel_error)
    network = next(r for r in results if r.component == "network")
    failed = [r.component for r in results if not r.passed]
    criterion(2, "gradient suite", not failed and worst_layer.max_rel_error < 1e-3 and network.max_rel_error < 1e-2 and elapsed < 120,
              f"worst layer {worst_layer.component} {worst_layer.max_rel_error:.2e}, network {network.max_rel_error:.2e}, "
              f"failed {failed}, {elapsed:.1f}s")


def test_3_gate_expectation_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for stride, p in ((1, 0.37), (2, 0.8)):
        blk = ResidualBlock(6, 9, stride, "pyramid-sep-drop", p, rng, linear_branch=True)
        for bn in blk.batchnorms():
            bn.frozen = True
            bn.running_mean[...] = rng.uniform(-0.3, 0.3, bn.channels)
            bn.running_var[...] = rng.uniform(0.5, 1.5, bn.channels)
        x = Tensor(rng.uniform(-1, 1, (3, 6, 8, 8)))
        mean = 0.0
        for b1, b2 in itertools.product((0, 1), repeat=2):
            weight = (p if b1 else 1 - p) * (p if b2 else 1 - p)
            mean = mean + weight * block_forward(x, blk, GateDraw(0, b1, b2, p, 0)).data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(mean - block_forward(x, blk, training=False).data))))
    elapsed = time.perf_counter() - t0
    criterion(3, "gate-expectation identity", worst < 1e-5 and elapsed < 1, f"max deviation {worst:.2e}, {elapsed:.3f}s")


def test_4a_p_last_one_collapse(criterion):
    t0 = time.perf_counter()
    x = images(4, seed=1)
    nets = {v: build(NetworkSpec(v, 8, 5, 1.0), 7) for v in ("pyramid", "pyramid-drop", "pyramid-sep-drop")}
    train_out, eval_out = {}, {}
    for v, net in nets.items():
        gates = draw_gates(net.survival, net.spec.variant, np.random.default_rng(3))
        train_out[v] = net.forward(x, gates).data
        eval_out[v] = net.eval().forward(x).data
    same = all(np.array_equal(train_out["pyramid"], o) for o in train_out.values())
    same &= all(np.array_equal(eval_out["pyramid"], o) for o in eval_out.values())
    elapsed = time.perf_counter() - t0
    criterion("4a", "p_last = 1 collapses SepDrop = Drop = PyramidNet bitwise", same and elapsed < 30, f"bitwise {same}, {elapsed:.2f}s")


def test_4b_alpha_zero_widths(criterion):
    spec = NetworkSpec("pyramid", 8, 0)
    widths = spec.block_widths()
    plain = (spec.base_width,) * spec.block_count
    count, hand = parameter_count(spec), preact_resnet8_count()
    ok = widths == plain and build_channel_schedule(110, 0).block_widths == (16,) * 54 and count == hand
    criterion("4b", "alpha = 0 gives plain ResNet widths", ok, f"widths {widths}, params {count} vs hand count {hand}")


def test_4c_all_gates_zero_shortcut_oracle(criterion):
    t0 = time.perf_counter()
    net = build(NetworkSpec("pyramid-sep-drop", 14, 10), 3)
    x = images(4, seed=2)
    logits = net.forward(x, pinned_gates(net.survival, base=0, extra=0)).data
    params = {k: t.data for k, t in net.parameters().items()}
    ref = shortcut_only_logits(params, net.block_widths, blocks_per_stage(14), x)
    dev = float(np.max(np.abs(logits - ref)))
    elapsed = time.perf_counter() - t0
    criterion("4c", "all-gates-zero forward matches shortcut-only oracle", dev < 1e-6 and elapsed < 30, f"max deviation {dev:.2e}, {elapsed:.2f}s")


def _gradient(net, x, y, gates):
    net.zero_grad()
    softmax_cross_entropy(net.forward(x, gates), y).backward()
    return OrderedDict((k, t.grad.copy()) for k, t in net.parameters().items())


def _max_rel(a, b):
    return max(float(np.max(np.abs(a[k] - b[k])) / np.max(np.abs(b[k]))) for k in b)


def test_5_multi_model_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    net = build(NetworkSpec("pyramid-sep-drop", 8, 5), 1)
    for bn in net.batchnorms():
        bn.running_mean[...] = rng.uniform(-0.2, 0.2, bn.channels)
        bn.running_var[...] = rng.uniform(0.5, 1.5, bn.channels)
    x, y = images(8, seed=4), rng.integers(0, 10, 8)
    gates = pinned_gates(net.survival)

    frozen = net.copy().freeze_bn()
    group = ReplicaGroup(frozen.copy(), 2)
    grads, _, _ = group.replica_gradients(split_batch(x, y, 2), [gates, gates])
    frozen_err = _max_rel(average_gradients(grads), _gradient(frozen, x, y, gates))

    live = net.copy()
    group = ReplicaGroup(live.copy(), 2)
    grads, _, _ = group.replica_gradients(split_batch(x, y, 2), [gates, gates])
    live_diff = _max_rel(average_gradients(grads), _gradient(live, x, y, gates))

    cfg = TrainConfig(initial_lr=0.1, milestones=(), total_epochs=1, batch_size=8, model_count=2)
    group = ReplicaGroup(net.copy(), 2)
    rngs = replica_rng_streams(0, 2)
    identical = True
    for step in range(4):
        xb, yb = images(8, seed=10 + step), rng.integers(0, 10, 8)
        group.synchronized_step(split_batch(xb, yb, 2), 0.1, cfg, rngs=rngs)
        identical &= group.max_parameter_difference() == 0.0
    elapsed = time.perf_counter() - t0
    ok = frozen_err < 1e-5 and live_diff > 1e-4 and identical and elapsed < 60
    criterion(5, "multi-model equivalence and divergence", ok,
              f"frozen-BN rel err {frozen_err:.2e}, training-BN rel diff {live_diff:.2e}, replicas identical {identical}, {elapsed:.2f}s")


def test_6_schedule_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    for _ in range(200):
        depth = 6 * int(rng.integers(1, 51)) + 2
        alpha = int(rng.integers(0, 301))
        p_last = float(rng.uniform(0.01, 0.99))
        w = np.array(build_channel_schedule(depth, alpha).block_widths)
        p = np.array(build_survival_schedule(len(w), p_last).probabilities)
        if not (np.all(np.diff(w) >= 0) and w[-1] == 16 + alpha and np.all(np.diff(p) < 0) and p[-1] == p_last):
            bad.append((depth, alpha, p_last))
    elapsed = time.perf_counter() - t0
    criterion(6, "schedule properties", not bad and elapsed < 5, f"200 cases, {len(bad)} violations, {elapsed:.2f}s")


def _sanity_run(seed, max_epochs=30, stop_at=0.05):
    train = synthesize_dataset(10, 512, seed=seed, noise=0.1)
    pre = PreprocessSpec.from_training(train)
    cfg = TrainConfig(initial_lr=0.1, milestones=(15, 22), total_epochs=30, seed=seed)
    group = ReplicaGroup(build(NetworkSpec("pyramid-sep-drop", 8, 5), seed))
    records = []
    for epoch in range(max_epochs):
        records.append(train_epoch(group, train, cfg, epoch, pre))
        if stop_at is not None and records[-1]["train_err"] <= stop_at:
            break
    return records, group


def test_7_training_sanity(criterion):
    t0 = time.perf_counter()
    reached = {}
    for seed in range(10):
        records, _ = _sanity_run(seed)
        hit = [r["epoch"] for r in records if r["train_err"] <= 0.05]
        reached[seed] = hit[0] + 1 if hit else None
    a, group_a = _sanity_run(0, max_epochs=3, stop_at=None)
    b, group_b = _sanity_run(0, max_epochs=3, stop_at=None)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "seconds"} for r in rs]
    sa, sb = group_a.primary.state_dict(), group_b.primary.state_dict()
    deterministic = strip(a) == strip(b) and all(np.array_equal(sa[k], sb[k]) for k in sa)
    elapsed = time.perf_counter() - t0
    passes = sum(v is not None for v in reached.values())
    criterion(7, "training sanity", passes >= 9 and deterministic and elapsed < 600,
              f"{passes}/10 seeds reach <= 5% train error (epochs {reached}), deterministic {deterministic}, {elapsed:.0f}s")


def test_8_regularization_direction(criterion):
    t0 = time.perf_counter()
    epochs, noise = 15, 0.4
    gaps = {"pyramid": [], "pyramid-sep-drop": []}
    for seed in range(5):
        train = synthesize_dataset(10, 512, seed=seed, noise=noise)
        held = synthesize_dataset(10, 512, seed=1000 + seed, noise=noise, split="test", prototype_seed=seed)
        pre = PreprocessSpec.from_training(train)
        cfg = TrainConfig(initial_lr=0.1, milestones=(epochs // 2, 3 * epochs // 4), total_epochs=epochs, seed=seed)
        for variant, p_last in (("pyramid", 1.0), ("pyramid-sep-drop", 0.5)):
            group = ReplicaGroup(build(NetworkSpec(variant, 14, 10, p_last), seed))
            for epoch in range(epochs):
                train_epoch(group, train, cfg, epoch, pre)
            gaps[variant].append(evaluate(group, held, pre) - evaluate(group, train, pre))
    pyr, sep = float(np.mean(gaps["pyramid"])), float(np.mean(gaps["pyramid-sep-drop"]))
    elapsed = time.perf_counter() - t0
    criterion(8, "regularization direction", sep <= pyr + 0.02,
              f"mean gap SepDrop {sep:+.4f} vs PyramidNet {pyr:+.4f} (+0.02 allowed); per-seed {gaps}; {elapsed:.0f}s")


def test_9_persistence(criterion, tmp_path):
    t0 = time.perf_counter()
    net = build(NetworkSpec("pyramid-sep-drop", 8, 5), 5)
    x = images(8, seed=6)
    net.forward(x, pinned_gates(net.survival))
    save_network(tmp_path / "net.bin", net)
    loaded = load_network(tmp_path / "net.bin")
    logits_equal = np.array_equal(net.eval().forward(x).data, loaded.eval().forward(x).data)

    train = synthesize_dataset(10, 256, seed=0)
    test = synthesize_dataset(10, 128, seed=1, split="test", prototype_seed=0)
    pre = PreprocessSpec.from_training(train)
    cfg = TrainConfig(initial_lr=0.1, milestones=(2,), total_epochs=3, batch_size=64, seed=2)
    spec = NetworkSpec("pyramid-sep-drop", 8, 5)
    full_group, full = fit(spec, cfg, train, test, pre, out_dir=tmp_path / "full", checkpoint_every=2)
    resumed_group, tail = fit(spec, cfg, train, test, pre, out_dir=tmp_path / "resumed",
                              resume_from=tmp_path / "full" / "checkpoint_epoch0002.bin")
    strip = lambda rs: [{k: v for k, v in r.items() if k != "seconds"} for r in rs]
    sa, sb = full_group.primary.state_dict(), resumed_group.primary.state_dict()
    resume_equal = strip(tail) == strip(full[2:]) and all(np.array_equal(sa[k], sb[k]) for k in sa)
    elapsed = time.perf_counter() - t0
    criterion(9, "persistence", logits_equal and resume_equal and elapsed < 60,
              f"round-trip logits bitwise {logits_equal}, resumed epoch bitwise {resume_equal}, {elapsed:.1f}s")
