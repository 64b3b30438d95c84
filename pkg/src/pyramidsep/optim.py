"""SGD with Nesterov momentum and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import Decimal
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .tensor import Tensor


@dataclass
class TrainConfig:
    initial_lr: float = 0.5
    lr_decay_factor: float = 0.1
    milestones: Tuple[int, ...] = (150, 225)
    total_epochs: int = 300
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 1e-4
    bn_weight_decay: bool = True
    batch_size: int = 128
    seed: int = 0
    model_count: int = 1
    augment: bool = True
    sync: str = "gradient"
    sync_period: int = 1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 0 or ms[-1] >= self.total_epochs):
            raise ValueError(f"milestones must lie in [0, {self.total_epochs}), got {ms}")
        if self.initial_lr < 0:
            raise ValueError(f"initial_lr must be non-negative, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.dampening <= 1.0:
            raise ValueError(f"dampening must lie in [0, 1], got {self.dampening}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.model_count < 1:
            raise ValueError(f"model_count must be positive, got {self.model_count}")
        if self.batch_size % self.model_count:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by model_count {self.model_count}")
        if self.sync not in ("gradient", "periodic"):
            raise ValueError(f"sync must be 'gradient' or 'periodic', got {self.sync!r}")
        if self.sync_period < 1:
            raise ValueError(f"sync_period must be positive, got {self.sync_period}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    # decimal arithmetic so 0.5 * 0.1**2 is 0.005, not 0.005000000000000001
    lr = Decimal(repr(float(cfg.initial_lr))) * Decimal(repr(float(cfg.lr_decay_factor))) ** drops
    return float(lr)


class MissingGradientError(RuntimeError):
    pass


class OptimizerState:
    """Zero-initialized velocity buffer per registered parameter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.velocity: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in params.items()}

    def copy(self) -> "OptimizerState":
        other = OptimizerState.__new__(OptimizerState)
        other.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return other


def _decays(name: str, cfg: TrainConfig) -> bool:
    if cfg.bn_weight_decay:
        return True
    return not (name.endswith(".gamma") or name.endswith(".beta"))


def sgd_nesterov_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> None:
    """In-place update: g' = g + wd*w; v = mu*v + (1 - d)*g'; w -= lr*(g' + mu*v).

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, t in params.items():
        g = t.grad if grads is None else grads.get(name)
        if g is None:
            raise MissingGradientError(f"no gradient for parameter {name}")
        w = t.data
        dt = w.dtype.type
        if cfg.weight_decay and _decays(name, cfg):
            g = g + dt(cfg.weight_decay) * w
        v = state.velocity[name]
        if cfg.momentum:
            v *= dt(cfg.momentum)
            v += g if cfg.dampening == 0 else dt(1.0 - cfg.dampening) * g
            step = g + dt(cfg.momentum) * v
        else:
            step = g
        w -= dt(lr) * step
