"""Multi-model learning: one mini-batch split across K synchronized replicas.

Each replica owns its BN running statistics and gate RNG stream.  With the
default ``gradient`` sync, every step averages the replicas' gradients in
fixed replica order, applies a single optimizer step and broadcasts the new
parameters.  The ``periodic`` alternative lets replicas step independently and
averages parameters (and velocities) every ``sync_period`` steps.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import GateDraw, draw_gates
from .layers import softmax_cross_entropy
from .model import Network
from .optim import OptimizerState, TrainConfig, sgd_nesterov_step


class ReplicaDivergenceError(RuntimeError):
    pass


def split_batch(images: np.ndarray, labels: np.ndarray, k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Contiguous, order-preserving split into ``k`` equal sub-batches."""
    n = len(images)
    if k < 1 or n % k:
        raise ValueError(f"batch of {n} samples cannot be divided into {k} equal sub-batches")
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} images")
    size = n // k
    return [(images[i * size : (i + 1) * size], labels[i * size : (i + 1) * size]) for i in range(k)]


def replica_rng_streams(seed: int, k: int, epoch: int = 0) -> List[np.random.Generator]:
    """``k`` independent, reproducible generators keyed by (seed, epoch, replica)."""
    if k < 1:
        raise ValueError(f"need at least one stream, got {k}")
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, 1, i))) for i in range(k)]


def average_gradients(grads: Sequence[Dict[str, np.ndarray]]) -> "OrderedDict[str, np.ndarray]":
    """Uniform mean of per-replica gradients, summed in replica order."""
    out = OrderedDict()
    k = len(grads)
    for name in grads[0]:
        acc = grads[0][name].copy()
        for g in grads[1:]:
            acc += g[name]
        out[name] = acc / acc.dtype.type(k) if k > 1 else acc
    return out


def _fingerprint(net: Network) -> List[np.ndarray]:
    return [t.data for t in net.parameters().values()]


class ReplicaGroup:
    """K parameter-synchronized copies of one network."""

    def __init__(self, net: Network, model_count: int = 1, sync: str = "gradient", sync_period: int = 1):
        if model_count < 1:
            raise ValueError(f"model_count must be positive, got {model_count}")
        if sync not in ("gradient", "periodic"):
            raise ValueError(f"unknown sync policy {sync!r}")
        self.replicas: List[Network] = [net] + [net.copy() for _ in range(model_count - 1)]
        self.sync = sync
        self.sync_period = sync_period
        n_opt = model_count if sync == "periodic" else 1
        self.optimizers = [OptimizerState(net.parameters()) for _ in range(n_opt)]
        self.steps = 0

    @classmethod
    def from_config(cls, net: Network, cfg: TrainConfig) -> "ReplicaGroup":
        return cls(net, cfg.model_count, cfg.sync, cfg.sync_period)

    @property
    def model_count(self) -> int:
        return len(self.replicas)

    @property
    def primary(self) -> Network:
        return self.replicas[0]

    def train(self) -> None:
        for r in self.replicas:
            r.train()

    def eval(self) -> None:
        for r in self.replicas:
            r.eval()

    def freeze_bn(self, frozen: bool = True) -> None:
        for r in self.replicas:
            r.freeze_bn(frozen)

    def max_parameter_difference(self) -> float:
        ref = _fingerprint(self.primary)
        worst = 0.0
        for r in self.replicas[1:]:
            for a, b in zip(ref, _fingerprint(r)):
                worst = max(worst, float(np.max(np.abs(a - b))) if a.size else 0.0)
        return worst

    def check_consistent(self) -> None:
        ref = _fingerprint(self.primary)
        for i, r in enumerate(self.replicas[1:], start=1):
            for name, a, b in zip(self.primary.parameters(), ref, _fingerprint(r)):
                if not np.array_equal(a, b):
                    raise ReplicaDivergenceError(f"replica {i} diverged from replica 0 at {name}")

    def consolidated(self) -> Network:
        """Copy of replica 0 whose BN running stats are the replica average."""
        net = self.primary.copy()
        k = self.model_count
        if k > 1:
            for name, arr in net.buffers().items():
                stack = [r.buffers()[name] for r in self.replicas]
                acc = stack[0].copy()
                for b in stack[1:]:
                    acc += b
                arr[...] = acc / acc.dtype.type(k)
        return net

    def draw_gates(self, rngs: Sequence[np.random.Generator]) -> List[List[GateDraw]]:
        return [
            draw_gates(r.survival, r.spec.variant, rng, stream=i) for i, (r, rng) in enumerate(zip(self.replicas, rngs))
        ]

    def replica_gradients(self, sub_batches, gates: Sequence[Sequence[GateDraw]]):
        """Forward/backward on each replica; returns (grads, losses, error counts)."""
        grads, losses, errors = [], [], 0
        for net, (x, y), g in zip(self.replicas, sub_batches, gates):
            net.zero_grad()
            logits = net.forward(x, g)
            loss = softmax_cross_entropy(logits, y)
            loss.backward()
            losses.append(loss.item())
            errors += int(np.sum(np.argmax(logits.data, axis=1) != y))
            # parameters of a fully dropped block were never reached
            grads.append(
                OrderedDict(
                    (name, np.zeros_like(t.data) if t.grad is None else t.grad) for name, t in net.parameters().items()
                )
            )
        return grads, losses, errors

    def synchronized_step(
        self,
        sub_batches,
        lr: float,
        cfg: TrainConfig,
        rngs: Optional[Sequence[np.random.Generator]] = None,
        gates: Optional[Sequence[Sequence[GateDraw]]] = None,
    ) -> dict:
        """One optimizer step over K sub-batches; returns loss/error summary."""
        if len(sub_batches) != self.model_count:
            raise ValueError(f"got {len(sub_batches)} sub-batches for {self.model_count} replicas")
        if self.sync == "gradient" or self.steps % self.sync_period == 0:
            self.check_consistent()
        if gates is None:
            if rngs is None:
                raise ValueError("pass either gate draws or per-replica generators")
            gates = self.draw_gates(rngs)
        grads, losses, errors = self.replica_gradients(sub_batches, gates)
        if self.sync == "gradient":
            avg = average_gradients(grads)
            sgd_nesterov_step(self.primary.parameters(), self.optimizers[0], lr, cfg, grads=avg)
            self.broadcast()
            self.steps += 1
        else:
            for net, opt, g in zip(self.replicas, self.optimizers, grads):
                sgd_nesterov_step(net.parameters(), opt, lr, cfg, grads=g)
            self.steps += 1
            if self.steps % self.sync_period == 0:
                self.average_parameters()
        n = sum(len(y) for _, y in sub_batches)
        return {"loss": float(np.mean(losses)), "errors": errors, "samples": n, "replica_losses": losses, "gates": gates}

    def broadcast(self) -> None:
        src = self.primary.parameters()
        for r in self.replicas[1:]:
            for name, t in r.parameters().items():
                np.copyto(t.data, src[name].data)

    def average_parameters(self) -> None:
        k = self.model_count
        if k == 1:
            return
        params = [r.parameters() for r in self.replicas]
        for name in params[0]:
            acc = params[0][name].data.copy()
            for p in params[1:]:
                acc += p[name].data
            acc /= acc.dtype.type(k)
            for p in params:
                np.copyto(p[name].data, acc)
        for name in self.optimizers[0].velocity:
            acc = self.optimizers[0].velocity[name].copy()
            for opt in self.optimizers[1:]:
                acc += opt.velocity[name]
            acc /= acc.dtype.type(k)
            for opt in self.optimizers:
                np.copyto(opt.velocity[name], acc)
