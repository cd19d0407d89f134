"""Frame-order prediction with difference accumulator blocks (DAB)."""

from .dab import DabConfig
from .backbone import NetworkConfig, build_network, preset
from .trainer import TrainConfig

__all__ = ["DabConfig", "NetworkConfig", "TrainConfig", "build_network", "preset"]
__version__ = "0.1.0"
