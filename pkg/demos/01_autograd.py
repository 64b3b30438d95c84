"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a tiny graph, run backward, and compare with the derivative by hand.
"""

import numpy as np

from pyramidsep import tensor as T
from pyramidsep.tensor import Tensor

# leaf tensors keep gradients; everything else is recorded on the tape
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
loss = T.tensor_sum(T.elementwise_mul(x, x))
loss.backward()
print("d/dx sum(x*x) =", x.grad)  # 2x

# gradients accumulate until cleared explicitly
T.tensor_sum(x).backward()
print("after a second backward:", x.grad)
x.zero_grad()

# a tensor used twice receives both contributions
T.tensor_sum(T.elementwise_add(x, x)).backward()
print("x + x:", x.grad)

# float32 is the default; the precision switch gives a float64 graph
with T.precision(np.float64):
    y = Tensor([0.1])
print(Tensor([0.1]).dtype, y.dtype)
