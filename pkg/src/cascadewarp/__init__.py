"""CPU coarse-to-fine feature-warping network for deformable 3D registration."""

from .network import CascadeNetwork, NetworkConfig
from .tensor import Tensor
from .training import LossConfig, TrainRecord, multi_scale_loss, train

__all__ = [
    "CascadeNetwork",
    "NetworkConfig",
    "Tensor",
    "LossConfig",
    "TrainRecord",
    "multi_scale_loss",
    "train",
]
