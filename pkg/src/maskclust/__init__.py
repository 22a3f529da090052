"""Masked patch prediction with online clustering, in plain numpy.

A student encoder learns to predict, at masked lattice positions, the
cluster assignments an EMA teacher produces for the same patches, with
Sinkhorn-balanced targets keeping the online clustering from collapsing.
Everything runs in float64 with hand-written gradients so every update is
checkable against finite differences.
"""

from .masking import LatticeShape, MaskSpec, PatchMask, generate_mask, roll_mask
from .network import NetworkConfig, build_student, ema_update
from .objective import (
    ClusterHead,
    clustering_loss,
    compute_logits,
    mim_loss,
    sinkhorn_positionwise,
    sinkhorn_standard,
)
from .probes import FeatureBank, ProbeReport, knn_probe, logreg_probe, standardize
from .rng import substream
from .trainer import Schedule, TrainConfig, TrainState, init_state, pretrain, train_step
from .workbench import RunConfig, SyntheticSpec, generate_synthetic, parse_config

__version__ = "0.1.0"

__all__ = [
    "ClusterHead",
    "FeatureBank",
    "LatticeShape",
    "MaskSpec",
    "NetworkConfig",
    "PatchMask",
    "ProbeReport",
    "RunConfig",
    "Schedule",
    "SyntheticSpec",
    "TrainConfig",
    "TrainState",
    "build_student",
    "clustering_loss",
    "compute_logits",
    "ema_update",
    "generate_mask",
    "generate_synthetic",
    "init_state",
    "knn_probe",
    "logreg_probe",
    "mim_loss",
    "parse_config",
    "pretrain",
    "roll_mask",
    "sinkhorn_positionwise",
    "sinkhorn_standard",
    "standardize",
    "substream",
    "train_step",
    "__version__",
]
