"""Pyramidal residual networks with separated stochastic depth, on numpy."""

from .blocks import (
    ChannelSchedule,
    GateDraw,
    ResidualBlock,
    SurvivalSchedule,
    VariantKind,
    alpha_for_depth,
    block_forward,
    build_channel_schedule,
    build_survival_schedule,
    draw_gates,
    pinned_gates,
    shortcut,
)
from .model import Network, NetworkSpec, build, load_network, parameter_count, save_network
from .multi_model import ReplicaGroup, replica_rng_streams, split_batch
from .optim import OptimizerState, TrainConfig, lr_at_epoch, sgd_nesterov_step
from .tensor import Tensor, precision
from .train import evaluate, fit, train_epoch

__version__ = "0.1.0"

__all__ = [
    "ChannelSchedule",
    "GateDraw",
    "Network",
    "NetworkSpec",
    "OptimizerState",
    "ReplicaGroup",
    "ResidualBlock",
    "SurvivalSchedule",
    "Tensor",
    "TrainConfig",
    "VariantKind",
    "alpha_for_depth",
    "block_forward",
    "build",
    "build_channel_schedule",
    "build_survival_schedule",
    "draw_gates",
    "evaluate",
    "fit",
    "load_network",
    "lr_at_epoch",
    "parameter_count",
    "pinned_gates",
    "precision",
    "replica_rng_streams",
    "save_network",
    "sgd_nesterov_step",
    "shortcut",
    "split_batch",
    "train_epoch",
]
