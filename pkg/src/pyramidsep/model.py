"""Assemble full CIFAR classification networks from a :class:`NetworkSpec`."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .blocks import (
    GateDraw,
    ResidualBlock,
    SurvivalSchedule,
    VariantKind,
    alpha_for_depth,
    block_forward,
    blocks_per_stage,
    build_channel_schedule,
    build_survival_schedule,
    resnet_widths,
)
from .layers import (
    BatchNormParams,
    Conv2dParams,
    LinearParams,
    batchnorm_forward,
    conv2d_forward,
    global_avg_pool,
    linear,
    relu,
)
from .tensor import Tensor, precision


@dataclass
class NetworkSpec:
    variant: VariantKind = VariantKind.PYRAMID_SEP_DROP
    depth: int = 110
    alpha: Optional[float] = None
    p_last: float = 0.5
    num_classes: int = 10
    base_width: int = 16
    input_shape: Tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        self.variant = VariantKind.parse(self.variant)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.alpha is None:
            self.alpha = alpha_for_depth(self.depth)
        self.validate()

    def validate(self) -> None:
        blocks_per_stage(self.depth)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 < self.p_last <= 1.0:
            raise ValueError(f"p_last must lie in (0, 1], got {self.p_last}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be positive, got {self.base_width}")
        c, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by 4")

    @property
    def block_count(self) -> int:
        return 3 * blocks_per_stage(self.depth)

    def block_widths(self) -> Tuple[int, ...]:
        if self.variant.pyramidal:
            return build_channel_schedule(self.depth, self.alpha, self.base_width).block_widths
        return resnet_widths(self.depth, self.base_width)

    def survival_schedule(self) -> SurvivalSchedule:
        return build_survival_schedule(self.block_count, self.p_last)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class Network:
    """Stem conv, three stages of residual blocks, BN-ReLU-pool-linear head."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.survival = spec.survival_schedule()
        widths = spec.block_widths()
        n = blocks_per_stage(spec.depth)
        in_channels = spec.input_shape[0]

        self.stem = Conv2dParams.create(in_channels, spec.base_width, rng)
        self.blocks: List[ResidualBlock] = []
        self.block_names: List[str] = []
        c_in = spec.base_width
        for k, c_out in enumerate(widths):
            stage, j = divmod(k, n)
            stride = 2 if (stage > 0 and j == 0) else 1
            block = ResidualBlock(c_in, c_out, stride, spec.variant, self.survival.probabilities[k], rng)
            self.blocks.append(block)
            self.block_names.append(f"s{stage + 1}.b{j + 1}")
            c_in = c_out
        self.head_bn = BatchNormParams(c_in)
        self.fc = LinearParams.create(c_in, spec.num_classes, rng)
        self._training = True
        self._bn_frozen = False

    # -- registry ---------------------------------------------------------
    def _modules(self):
        yield "stem.conv", self.stem
        for name, block in zip(self.block_names, self.blocks):
            for layer_name, layer in block.layers().items():
                yield f"{name}.{layer_name}", layer
        yield "head.bn", self.head_bn
        yield "head.fc", self.fc

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for prefix, module in self._modules():
            for role, t in module.parameters().items():
                out[f"{prefix}.{role}"] = t
        return out

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, module in self._modules():
            if isinstance(module, BatchNormParams):
                for role, arr in module.buffers().items():
                    out[f"{prefix}.{role}"] = arr
        return out

    def batchnorms(self) -> List[BatchNormParams]:
        return [m for _, m in self._modules() if isinstance(m, BatchNormParams)]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, t.data) for k, t in self.parameters().items())
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params, buffers = self.parameters(), self.buffers()
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, t in params.items():
            src = np.asarray(state[name])
            if src.shape != t.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {t.shape}")
            t.data[...] = src
        for name, arr in buffers.items():
            arr[...] = np.asarray(state[name])

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    @property
    def block_widths(self) -> Tuple[int, ...]:
        return tuple(b.c_out for b in self.blocks)

    # -- modes ------------------------------------------------------------
    @property
    def training(self) -> bool:
        return self._training

    def train(self) -> "Network":
        self._training = True
        for bn in self.batchnorms():
            bn.training = True
        return self

    def eval(self) -> "Network":
        self._training = False
        for bn in self.batchnorms():
            bn.training = False
        return self

    def freeze_bn(self, frozen: bool = True) -> "Network":
        """Use running statistics in every BN layer regardless of mode."""
        self._bn_frozen = frozen
        for bn in self.batchnorms():
            bn.frozen = frozen
        return self

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        other = copy.deepcopy(self)
        for t in other.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for bn in other.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return other

    # -- forward ----------------------------------------------------------
    def forward(self, x, gates: Optional[Sequence[GateDraw]] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.stem.weight.dtype)
        if x.data.ndim != 4 or x.shape[1] != self.spec.input_shape[0]:
            raise ValueError(f"expected input (batch, {self.spec.input_shape[0]}, h, w), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"input spatial size {x.shape[2:]} must be divisible by 4")
        if gates is not None and len(gates) != len(self.blocks):
            raise ValueError(f"got {len(gates)} gate draws for {len(self.blocks)} blocks")
        if self._training and gates is None and self.spec.variant.gated:
            raise ValueError(f"{self.spec.variant.value} network needs gate draws in training mode")
        h = conv2d_forward(x, self.stem)
        for k, block in enumerate(self.blocks):
            h = block_forward(h, block, None if gates is None else gates[k], training=self._training)
        h = relu(batchnorm_forward(h, self.head_bn))
        return linear(global_avg_pool(h), self.fc)

    __call__ = forward


def build(spec: NetworkSpec, rng) -> Network:
    """Build a network with MSRA-initialized weights from ``spec``.

    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Network(spec, rng)


def parameter_count(spec: NetworkSpec) -> int:
    """Learnable parameter count computed from the schedules alone."""
    c0 = spec.input_shape[0]
    base = spec.base_width
    total = c0 * base * 9
    c_in = base
    for c_out in spec.block_widths():
        total += 2 * c_in + 9 * c_in * c_out + 2 * c_out + 9 * c_out * c_out + 2 * c_out
        c_in = c_out
    total += 2 * c_in + c_in * spec.num_classes + spec.num_classes
    return total


def save_network(path, net: Network, meta: Optional[dict] = None) -> None:
    ckpt.save(path, net.spec.to_dict(), net.state_dict(), meta or {})


def load_network(path, dtype=np.float32) -> Network:
    spec_dict, arrays, _ = ckpt.load(path)
    with precision(dtype):
        net = Network(NetworkSpec.from_dict(spec_dict), np.random.default_rng(0))
    net.load_state_dict(arrays)
    return net
