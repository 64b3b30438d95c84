import numpy as np
import pytest
from conftest import small_net, small_spec

from pyramidsep import TrainConfig, fit, load_network, pinned_gates, save_network
from pyramidsep import checkpoint as ckpt
from pyramidsep.data import PreprocessSpec, synthesize_dataset
from pyramidsep.train import load_training_checkpoint, read_metrics


def test_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([np.pi], np.float32)}
    ckpt.save(tmp_path / "c.bin", {"depth": 8}, arrays, {"note": "x"})
    spec, back, meta = ckpt.load(tmp_path / "c.bin")
    assert spec == {"depth": 8} and meta == {"note": "x"} and list(back) == ["a", "b"]
    assert all(np.array_equal(arrays[k], back[k]) and back[k].dtype == np.float32 for k in arrays)
    assert (tmp_path / "c.bin").read_bytes()[:8] == b"PSDCKPT\x00"


@pytest.mark.parametrize(
    "corrupt, message",
    [
        (lambda b: b"XXXXXXXX" + b[8:], "bad magic"),
        (lambda b: b[:8] + (99).to_bytes(4, "little") + b[12:], "version 99"),
        (lambda b: b[:-1] + bytes([b[-1] ^ 1]), "checksum"),
        (lambda b: b[:5], "too short"),
    ],
)
def test_corruption_detected(tmp_path, corrupt, message):
    ckpt.save(tmp_path / "c.bin", {}, {"a": np.ones(3, np.float32)}, {})
    (tmp_path / "c.bin").write_bytes(corrupt((tmp_path / "c.bin").read_bytes()))
    with pytest.raises(ckpt.CheckpointError, match=message):
        ckpt.load(tmp_path / "c.bin")


def test_network_round_trip_bitwise_logits(tmp_path):
    net = small_net(seed=3)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
    net.forward(x, pinned_gates(net.survival))
    save_network(tmp_path / "n.bin", net)
    back = load_network(tmp_path / "n.bin")
    assert np.array_equal(net.eval().forward(x).data, back.eval().forward(x).data)
    assert all(np.array_equal(a, back.state_dict()[k]) for k, a in net.state_dict().items())


def run_setup(models=1):
    train = synthesize_dataset(10, 64, image_size=8, seed=0)
    test = synthesize_dataset(10, 32, image_size=8, seed=1, split="test", prototype_seed=0)
    cfg = TrainConfig(initial_lr=0.1, milestones=(2,), total_epochs=4, batch_size=16, seed=3, model_count=models)
    return small_spec(), cfg, train, test, PreprocessSpec.from_training(train)


def strip(records):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in records]


@pytest.mark.parametrize("models", [1, 2])
def test_resume_matches_uninterrupted(tmp_path, models):
    spec, cfg, train, test, pre = run_setup(models)
    full_group, full = fit(spec, cfg, train, test, pre, out_dir=tmp_path / "full", checkpoint_every=2)
    resumed_group, tail = fit(
        spec, cfg, train, test, None, out_dir=tmp_path / "part", resume_from=tmp_path / "full" / "checkpoint_epoch0002.bin"
    )
    assert [r["epoch"] for r in tail] == [2, 3]
    assert strip(tail) == strip(full[2:])
    a, b = full_group.consolidated().state_dict(), resumed_group.consolidated().state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_run_directory_contents(tmp_path):
    spec, cfg, train, test, pre = run_setup()
    fit(spec, cfg, train, test, pre, out_dir=tmp_path, checkpoint_every=2)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_epoch0002.bin", "checkpoint_epoch0004.bin", "final.bin", "metrics.csv"]
    assert [r["epoch"] for r in read_metrics(tmp_path / "metrics.csv")] == ["0", "1", "2", "3"]
    group, saved_cfg, epoch, saved_pre = load_training_checkpoint(tmp_path / "final.bin")
    assert saved_cfg == cfg and epoch == 3 and saved_pre == pre and group.steps == 4 * 4


def test_resume_into_same_directory_rewrites_tail(tmp_path):
    spec, cfg, train, test, pre = run_setup()
    fit(spec, cfg, train, test, pre, out_dir=tmp_path, checkpoint_every=2)
    before = read_metrics(tmp_path / "metrics.csv")
    fit(spec, cfg, train, test, pre, out_dir=tmp_path, resume_from=tmp_path / "checkpoint_epoch0002.bin")
    after = read_metrics(tmp_path / "metrics.csv")
    drop = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert drop(after) == drop(before)
