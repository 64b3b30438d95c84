"""Central finite-difference checks of every differentiable op.

Analytic gradients are computed in the default 32-bit precision.  The
finite-difference oracle re-evaluates the same graph in 64-bit on the same
(32-bit representable) inputs, so rounding in the oracle does not swamp the
comparison.  Error per tensor is ``max|analytic - numeric| / max(|analytic|,
|numeric|)``, i.e. elementwise deviation relative to the gradient's scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from . import blocks, layers, tensor
from .tensor import Tensor, precision

LAYER_TOL = 1e-3
NETWORK_TOL = 1e-2
STEP = 1e-3
# A network has ~10^4 ReLU units per sample, so a 1e-3 step crosses kinks;
# the 64-bit oracle affords a much smaller step.
NETWORK_STEP = 1e-6
# Tensors whose true gradient is structurally zero (e.g. a BN shift followed by
# another batch-statistics BN) are judged against this fraction of the
# network-wide gradient scale instead of their own rounding noise.
NETWORK_FLOOR = 1e-3


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max deviation over the gradient's own scale, or over ``floor`` if that is larger."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _pick(size: int, max_entries: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, index: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat entries ``index`` of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(index))
    for k, i in enumerate(index):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out


def check_function(
    loss_fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    step: float = STEP,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Relative error per input of ``loss_fn`` (autodiff in float32 vs 64-bit differences)."""
    rng = np.random.default_rng(seed)
    base = {k: np.asarray(v, dtype=np.float32) for k, v in inputs.items()}
    with precision(np.float32):
        ts = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
        loss_fn(ts).backward()
        analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in ts.items()}
    errors = {}
    with precision(np.float64):
        arrays = {k: v.astype(np.float64) for k, v in base.items()}

        def f():
            return loss_fn({k: Tensor(a) for k, a in arrays.items()}).item()

        for k, arr in arrays.items():
            idx = _pick(arr.size, max_entries, rng)
            num = numerical_gradient(f, arr, idx, step)
            errors[k] = relative_error(analytic[k].reshape(-1)[idx], num)
    return errors


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor.tensor_sum(tensor.elementwise_mul(out, Tensor(weights.astype(out.dtype))))


def _projection(shape, rng):
    return rng.uniform(-1.0, 1.0, size=shape)


def _away_from_zero(shape, rng, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def layer_checks(seed: int = 0) -> Dict[str, Callable[[], float]]:
    """Named zero-argument checks returning the worst relative error of each op."""
    rng = np.random.default_rng(seed)

    def worst(errors):
        return max(errors.values())

    def add():
        a, b = rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, (2, 3, 4, 4))
        r = _projection(a.shape, rng)
        return worst(check_function(lambda t: _weighted_sum(tensor.elementwise_add(t["a"], t["b"]), r), {"a": a, "b": b}))

    def scale():
        a = rng.uniform(-1, 1, (2, 3, 4, 4))
        r = _projection(a.shape, rng)
        return worst(check_function(lambda t: _weighted_sum(tensor.scalar_scale(t["a"], -0.7), r), {"a": a}))

    def matmul():
        a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
        r = _projection((3, 2), rng)
        return worst(check_function(lambda t: _weighted_sum(tensor.matmul_2d(t["a"], t["b"]), r), {"a": a, "b": b}))

    def conv2d():
        x = rng.uniform(-1, 1, (2, 3, 5, 5))
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        errs = []
        for stride in (1, 2):
            oh = layers.conv_output_size(5, 3, stride, 1)
            r = _projection((2, 4, oh, oh), rng)
            errs.append(
                worst(
                    check_function(
                        lambda t, s=stride, r=r: _weighted_sum(
                            layers.conv2d_forward(t["x"], layers.Conv2dParams(t["w"], stride=s, padding=1)), r
                        ),
                        {"x": x, "w": w},
                    )
                )
            )
        return max(errs)

    def batchnorm(training: bool):
        def run():
            x = rng.uniform(-1, 1, (4, 3, 2, 2))
            gamma, beta = rng.uniform(0.5, 1.5, 3), rng.uniform(-0.5, 0.5, 3)
            mean, var = rng.uniform(-0.2, 0.2, 3), rng.uniform(0.5, 1.5, 3)
            r = _projection(x.shape, rng)

            def loss(t):
                p = layers.BatchNormParams(3, dtype=t["x"].dtype)
                p.gamma, p.beta = t["gamma"], t["beta"]
                p.running_mean[...] = mean
                p.running_var[...] = var
                p.training = training
                return _weighted_sum(layers.batchnorm_forward(t["x"], p), r)

            return worst(check_function(loss, {"x": x, "gamma": gamma, "beta": beta}))

        return run

    def relu():
        x = _away_from_zero((2, 3, 4, 4), rng)
        r = _projection(x.shape, rng)
        return worst(check_function(lambda t: _weighted_sum(layers.relu(t["x"]), r), {"x": x}))

    def avgpool():
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        r = _projection((2, 3, 2, 2), rng)
        return worst(check_function(lambda t: _weighted_sum(layers.avgpool2x2(t["x"]), r), {"x": x}))

    def gap():
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        r = _projection((2, 3), rng)
        return worst(check_function(lambda t: _weighted_sum(layers.global_avg_pool(t["x"]), r), {"x": x}))

    def lin():
        x, w, b = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, 4)
        r = _projection((3, 4), rng)
        return worst(
            check_function(lambda t: _weighted_sum(layers.linear(t["x"], layers.LinearParams(t["w"], t["b"])), r), {"x": x, "w": w, "b": b})
        )

    def xent():
        logits = rng.uniform(-1, 1, (4, 5))
        labels = np.array([0, 3, 4, 1])
        return worst(check_function(lambda t: layers.softmax_cross_entropy(t["z"], labels), {"z": logits}))

    def short():
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        r = _projection((2, 5, 2, 2), rng)
        return worst(check_function(lambda t: _weighted_sum(blocks.shortcut(t["x"], 5, 2), r), {"x": x}))

    return {
        "elementwise_add": add,
        "scalar_scale": scale,
        "matmul_2d": matmul,
        "conv2d": conv2d,
        "batchnorm_train": batchnorm(True),
        "batchnorm_inference": batchnorm(False),
        "relu": relu,
        "avgpool2x2": avgpool,
        "global_avg_pool": gap,
        "linear": lin,
        "softmax_cross_entropy": xent,
        "shortcut": short,
    }


def check_network(
    net, batch: int = 2, seed: int = 0, max_entries: int = 6, step: float = NETWORK_STEP, gates=None
) -> Dict[str, float]:
    """Per-parameter relative error of the cross-entropy gradient of a whole network.

    ``gates`` defaults to all-ones draws.  The network is put in training mode.
    """
    rng = np.random.default_rng(seed)
    c, h, w = net.spec.input_shape
    x = rng.uniform(-1, 1, (batch, c, h, w)).astype(np.float32)
    labels = rng.integers(0, net.spec.num_classes, size=batch)
    if gates is None:
        gates = blocks.pinned_gates(net.survival)
    net32 = net.astype(np.float32).train()
    loss = layers.softmax_cross_entropy(net32.forward(x, gates), labels)
    loss.backward()
    net64 = net.astype(np.float64).train()
    params64 = net64.parameters()
    x64 = x.astype(np.float64)

    def f():
        with precision(np.float64):
            return layers.softmax_cross_entropy(net64.forward(x64, gates), labels).item()

    pairs = {}
    for name, t32 in net32.parameters().items():
        arr = params64[name].data
        idx = _pick(arr.size, max_entries, rng)
        num = numerical_gradient(f, arr, idx, step)
        g = np.zeros_like(t32.data) if t32.grad is None else t32.grad
        pairs[name] = (g.reshape(-1)[idx], num)
    floor = NETWORK_FLOOR * max(np.max(np.abs(n)) for _, n in pairs.values())
    return {name: relative_error(a, n, floor) for name, (a, n) in pairs.items()}


def run_all(net=None, seed: int = 0) -> List[CheckResult]:
    results = [CheckResult(name, fn(), LAYER_TOL) for name, fn in layer_checks(seed).items()]
    if net is not None:
        errs = check_network(net, seed=seed)
        results.append(CheckResult("network", max(errs.values()), NETWORK_TOL))
    return results
