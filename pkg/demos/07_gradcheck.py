"""
Finite-difference gradient checks
=================================

Every layer and a whole depth-8 network, analytic float32 gradients
against float64 central differences.
"""

from pyramidsep import NetworkSpec, build
from pyramidsep.gradcheck import run_all

for r in run_all(build(NetworkSpec("pyramid-sep-drop", 8, 5), 0)):
    print(f"{r.component:22s} {r.max_rel_error:.2e}  (tolerance {r.tolerance:g})  {'ok' if r.passed else 'FAIL'}")
