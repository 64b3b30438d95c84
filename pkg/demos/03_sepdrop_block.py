"""
Separated gates in one block
============================

A pyramidal block widens 16 to 21 channels.  The base part (first 16
channels) and the extra part (last 5) are gated by independent draws.
"""

import itertools

import numpy as np

from pyramidsep.blocks import GateDraw, ResidualBlock, block_forward, shortcut
from pyramidsep.tensor import Tensor

rng = np.random.default_rng(0)
block = ResidualBlock(16, 21, 1, "pyramid-sep-drop", survival=0.6, rng=rng)
x = Tensor(rng.uniform(-1, 1, (4, 16, 8, 8)))

# keep BN on running statistics so the four outcomes are comparable
for bn in block.batchnorms():
    bn.frozen = True
sc = shortcut(x, 21).data
for b1, b2 in itertools.product((0, 1), repeat=2):
    y = block_forward(x, block, GateDraw(0, b1, b2, 0.6, 0)).data
    moved = np.abs(y - sc).max(axis=(0, 2, 3))
    print(f"b1={b1} b2={b2}  base part changed: {moved[:16].max() > 0}  extra part changed: {moved[16:].max() > 0}")

# with a linear branch the gate-weighted average equals inference output
lin = ResidualBlock(16, 21, 1, "pyramid-sep-drop", survival=0.6, rng=rng, linear_branch=True)
for bn in lin.batchnorms():
    bn.frozen = True
p = 0.6
avg = sum(
    (p if b1 else 1 - p) * (p if b2 else 1 - p) * block_forward(x, lin, GateDraw(0, b1, b2, p, 0)).data.astype(np.float64)
    for b1, b2 in itertools.product((0, 1), repeat=2)
)
print("max |E[train] - inference| =", np.abs(avg - block_forward(x, lin, training=False).data).max())
