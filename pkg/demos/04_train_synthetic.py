"""
Training on a synthetic dataset
===============================

A depth-8 PyramidSepDrop network learns ten colour-blob classes.
Takes about a minute on one core.
"""

from pyramidsep import NetworkSpec, TrainConfig, fit
from pyramidsep.data import PreprocessSpec, synthesize_dataset

train = synthesize_dataset(10, 512, seed=0, noise=0.1)
test = synthesize_dataset(10, 256, seed=1, noise=0.1, split="test", prototype_seed=0)

# normalization statistics come from the training split only
pre = PreprocessSpec.from_training(train)
print("channel means:", [round(m, 3) for m in pre.mean])

spec = NetworkSpec("pyramid-sep-drop", depth=8, alpha=5, p_last=0.5)
cfg = TrainConfig(initial_lr=0.1, milestones=(8, 11), total_epochs=12, seed=0)

group, records = fit(spec, cfg, train, test, pre)
for r in records:
    print(f"epoch {r['epoch']:2d}  lr {r['lr']:.3g}  loss {r['train_loss']:.3f}  train_err {r['train_err']:.3f}  test_err {r['test_err']:.3f}")
