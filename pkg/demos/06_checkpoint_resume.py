"""
Checkpoints and bit-exact resumption
====================================

Train four epochs straight through, then again from the epoch-2
checkpoint, and compare.
"""

import tempfile
from pathlib import Path

import numpy as np

from pyramidsep import NetworkSpec, TrainConfig, fit
from pyramidsep.data import PreprocessSpec, synthesize_dataset

train = synthesize_dataset(10, 64, image_size=8, seed=0)
pre = PreprocessSpec.from_training(train)
spec = NetworkSpec("pyramid-sep-drop", 8, 5, input_shape=(3, 8, 8))
cfg = TrainConfig(initial_lr=0.1, milestones=(2,), total_epochs=4, batch_size=16, seed=1)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    full_group, full = fit(spec, cfg, train, preprocess=pre, out_dir=tmp / "full", checkpoint_every=2)
    print(sorted(p.name for p in (tmp / "full").iterdir()))
    resumed_group, tail = fit(spec, cfg, train, out_dir=tmp / "resumed", resume_from=tmp / "full" / "checkpoint_epoch0002.bin")

for a, b in zip(full[2:], tail):
    print(f"epoch {a['epoch']}: loss {a['train_loss']!r} vs {b['train_loss']!r}")
a, b = full_group.primary.state_dict(), resumed_group.primary.state_dict()
print("parameters bitwise equal:", all(np.array_equal(a[k], b[k]) for k in a))
