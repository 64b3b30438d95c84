"""
Channel and survival schedules
==============================

How depth and alpha turn into per-block widths, and how the survival
probability decays linearly with depth.
"""

import numpy as np

from pyramidsep import alpha_for_depth, build_channel_schedule, build_survival_schedule
from pyramidsep.cli import inspect_report
from pyramidsep.model import NetworkSpec, parameter_count

for depth in (8, 110, 146, 182):
    print(f"depth {depth:3d} -> alpha {alpha_for_depth(depth)}")

# widths are the floor of a cumulative real-valued width
sched = build_channel_schedule(8, 5)
print("depth 8, alpha 5:", sched.block_widths)

sched = build_channel_schedule(110, 90)
steps = np.diff((16,) + sched.block_widths)
print("depth 110: final width", sched.block_widths[-1], "increments seen:", sorted(set(steps.tolist())))

surv = build_survival_schedule(sched.block_count, 0.5)
print("first and last survival:", round(surv.probabilities[0], 5), surv.probabilities[-1])

# parameter count is a closed form of the schedule
for alpha in (0, 5, 10):
    print("depth 8, alpha", alpha, "->", parameter_count(NetworkSpec("pyramid-sep-drop", 8, alpha)), "parameters")

# the same report the CLI prints
print(inspect_report(NetworkSpec("pyramid-sep-drop", 14)))
