"""Pyramidal residual blocks with stochastic-depth gating.

Five block variants share one pre-activation residual branch

    BN -> conv3x3 (stride s) -> BN -> ReLU -> conv3x3 -> BN

and a parameter-free shortcut (2x2 average pool when downsampling, then zero
channel padding).  They differ only in how the branch output ``F`` is gated:

* ``resnet`` / ``pyramid``: never gated.
* ``resdrop`` / ``pyramid-drop``: one Bernoulli gate on all of ``F``.
* ``pyramid-sep-drop``: ``F`` is split into the channels matching the input
  width (base part) and the newly added channels (extra part), each with its
  own independent Bernoulli gate.

At inference every gate is replaced by its survival probability.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from .layers import (
    BatchNormParams,
    Conv2dParams,
    avgpool2x2,
    batchnorm_forward,
    conv2d_forward,
    relu,
)
from .tensor import Tensor, channel_scale, elementwise_add, pad_channels, scalar_scale


class VariantKind(str, enum.Enum):
    RESNET = "resnet"
    RESDROP = "resdrop"
    PYRAMID = "pyramid"
    PYRAMID_DROP = "pyramid-drop"
    PYRAMID_SEP_DROP = "pyramid-sep-drop"

    @property
    def pyramidal(self) -> bool:
        return self in (VariantKind.PYRAMID, VariantKind.PYRAMID_DROP, VariantKind.PYRAMID_SEP_DROP)

    @property
    def gated(self) -> bool:
        return self in (VariantKind.RESDROP, VariantKind.PYRAMID_DROP, VariantKind.PYRAMID_SEP_DROP)

    @property
    def separated(self) -> bool:
        return self is VariantKind.PYRAMID_SEP_DROP

    @classmethod
    def parse(cls, value) -> "VariantKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("_", "-"))
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {value!r}; choose one of: {choices}") from None


def blocks_per_stage(depth: int) -> int:
    """Basic blocks per stage for a 6n+2 layer network; rejects invalid depths."""
    if not isinstance(depth, (int, np.integer)) or isinstance(depth, bool):
        raise ValueError(f"depth must be an integer, got {depth!r}")
    depth = int(depth)
    if depth < 8 or (depth - 2) % 6:
        below = depth - (depth - 2) % 6
        candidates = [d for d in (below, below + 6) if d >= 8] or [8]
        hint = " or ".join(str(d) for d in candidates)
        raise ValueError(f"depth must satisfy depth = 2 (mod 6) and depth >= 8, got {depth}; nearest valid: {hint}")
    return (depth - 2) // 6


def alpha_for_depth(depth: int) -> int:
    """Total widening that adds 5 channels per 6 layers: 5 * (depth - 2) / 6."""
    blocks_per_stage(depth)
    return 5 * (int(depth) - 2) // 6


@dataclass(frozen=True)
class ChannelSchedule:
    base_width: int
    alpha: float
    block_widths: Tuple[int, ...]

    @property
    def block_count(self) -> int:
        return len(self.block_widths)

    @property
    def input_widths(self) -> Tuple[int, ...]:
        return (self.base_width,) + self.block_widths[:-1]


def build_channel_schedule(depth: int, alpha: float, base_width: int = 16) -> ChannelSchedule:
    """Output width of block k is floor(base_width + alpha * k / N), k = 1..N.

    The floor is taken on the exact rational value so that the final width is
    exactly ``base_width + alpha`` for integral alpha.
    """
    n_total = 3 * blocks_per_stage(depth)
    if alpha < 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be a finite non-negative number, got {alpha}")
    if base_width < 1:
        raise ValueError(f"base_width must be positive, got {base_width}")
    a = Fraction(alpha)
    widths = tuple(math.floor(base_width + a * k / n_total) for k in range(1, n_total + 1))
    return ChannelSchedule(base_width=base_width, alpha=alpha, block_widths=widths)


def resnet_widths(depth: int, base_width: int = 16) -> Tuple[int, ...]:
    """Stage-doubling widths (base, 2*base, 4*base) of the plain ResNet family."""
    n = blocks_per_stage(depth)
    return tuple(base_width * 2**stage for stage in range(3) for _ in range(n))


@dataclass(frozen=True)
class SurvivalSchedule:
    p_last: float
    probabilities: Tuple[float, ...]

    @property
    def block_count(self) -> int:
        return len(self.probabilities)


def build_survival_schedule(n_blocks: int, p_last: float) -> SurvivalSchedule:
    """Linear decay p_l = 1 - (l / N) * (1 - p_last) for l = 1..N."""
    if n_blocks < 1:
        raise ValueError(f"need at least one block, got {n_blocks}")
    if not 0.0 < p_last <= 1.0:
        raise ValueError(f"p_last must lie in (0, 1], got {p_last}")
    # exact rational arithmetic, rounded once: p_N is p_last to the bit
    death = 1 - Fraction(p_last)
    probs = tuple(float(1 - Fraction(l, n_blocks) * death) for l in range(1, n_blocks + 1))
    return SurvivalSchedule(p_last=p_last, probabilities=probs)


@dataclass(frozen=True)
class GateDraw:
    block: int
    base_gate: int
    extra_gate: int
    survival: float
    stream: int = 0


def draw_gates(schedule: SurvivalSchedule, variant, rng: np.random.Generator, stream: int = 0) -> List[GateDraw]:
    """One gate pair per block for a single forward pass.

    Ungated variants get (1, 1) without consuming randomness; single-gate
    variants share one draw between both parts; the separated variant draws
    the base part first, then the extra part.
    """
    variant = VariantKind.parse(variant)
    gates = []
    for i, p in enumerate(schedule.probabilities):
        if not variant.gated:
            b1 = b2 = 1
        elif variant.separated:
            b1 = int(rng.random() < p)
            b2 = int(rng.random() < p)
        else:
            b1 = b2 = int(rng.random() < p)
        gates.append(GateDraw(block=i, base_gate=b1, extra_gate=b2, survival=p, stream=stream))
    return gates


def pinned_gates(schedule: SurvivalSchedule, base: int = 1, extra: Optional[int] = None) -> List[GateDraw]:
    extra = base if extra is None else extra
    return [GateDraw(i, base, extra, p) for i, p in enumerate(schedule.probabilities)]


def shortcut(x: Tensor, c_out: int, stride: int = 1) -> Tensor:
    if stride not in (1, 2):
        raise ValueError(f"shortcut stride must be 1 or 2, got {stride}")
    if c_out < x.shape[1]:
        raise ValueError(f"shortcut cannot narrow {x.shape[1]} channels to {c_out}")
    if stride == 2:
        x = avgpool2x2(x)
    return pad_channels(x, c_out)


class ResidualBlock:
    """Parameters and static description of one residual block.

    ``linear_branch`` drops the inner ReLU; with BN frozen the branch is then
    an affine map, which makes gate expectations exactly computable.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        stride: int,
        variant,
        survival: float,
        rng: np.random.Generator,
        linear_branch: bool = False,
    ):
        self.variant = VariantKind.parse(variant)
        if c_out < c_in:
            raise ValueError(f"block cannot narrow {c_in} -> {c_out} channels")
        if not self.variant.pyramidal and c_out != c_in and stride == 1:
            raise ValueError(f"{self.variant.value} blocks widen only at stage boundaries")
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.survival = survival
        self.linear_branch = linear_branch
        self.bn1 = BatchNormParams(c_in)
        self.conv1 = Conv2dParams.create(c_in, c_out, rng, stride=stride)
        self.bn2 = BatchNormParams(c_out)
        self.conv2 = Conv2dParams.create(c_out, c_out, rng)
        self.bn3 = BatchNormParams(c_out)

    def layers(self) -> Dict[str, object]:
        return {"bn1": self.bn1, "conv1": self.conv1, "bn2": self.bn2, "conv2": self.conv2, "bn3": self.bn3}

    def batchnorms(self) -> List[BatchNormParams]:
        return [self.bn1, self.bn2, self.bn3]

    def residual(self, x: Tensor) -> Tensor:
        h = batchnorm_forward(x, self.bn1)
        h = conv2d_forward(h, self.conv1)
        h = batchnorm_forward(h, self.bn2)
        if not self.linear_branch:
            h = relu(h)
        h = conv2d_forward(h, self.conv2)
        return batchnorm_forward(h, self.bn3)

    def part_mask(self, base_gate: float, extra_gate: float) -> np.ndarray:
        mask = np.empty(self.c_out)
        mask[: self.c_in] = base_gate
        mask[self.c_in :] = extra_gate
        return mask


def block_forward(x: Tensor, block: ResidualBlock, gate: Optional[GateDraw] = None, training: bool = True) -> Tensor:
    """y = shortcut(x) + gated F(x); see the module docstring for gate semantics."""
    if x.shape[1] != block.c_in:
        raise ValueError(f"block expects {block.c_in} input channels, got {x.shape[1]}")
    variant = block.variant
    if gate is not None:
        if not variant.gated and (gate.base_gate, gate.extra_gate) != (1, 1):
            raise ValueError(f"{variant.value} blocks are not gated; got gates {(gate.base_gate, gate.extra_gate)}")
        if variant.gated and not variant.separated and gate.base_gate != gate.extra_gate:
            raise ValueError(f"{variant.value} uses one shared gate; got separate gates {(gate.base_gate, gate.extra_gate)}")
    sc = shortcut(x, block.c_out, block.stride)

    if not variant.gated:
        return elementwise_add(sc, block.residual(x))
    if not training:
        return elementwise_add(sc, scalar_scale(block.residual(x), block.survival))
    if gate is None:
        raise ValueError(f"{variant.value} block needs a gate draw in training mode")
    b1, b2 = gate.base_gate, gate.extra_gate
    if block.c_out == block.c_in:
        b2 = b1
    if b1 == 0 and b2 == 0:
        # dropped branch is never evaluated; its BN running stats stay put
        return sc
    f = block.residual(x)
    if b1 == 1 and b2 == 1:
        return elementwise_add(sc, f)
    return elementwise_add(sc, channel_scale(f, block.part_mask(b1, b2)))
