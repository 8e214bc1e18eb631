"""Multi-path, multi-branch CNN for multi-modal brain tumour segmentation, written on numpy."""

from .errors import (AcceptanceError, ContractError, DegenerateVolumeError, DimensionError,
                     FormatError, NumericError, TrainingError, TsegError)
from .network import NetworkConfig, build_network, count_parameters, forward, load_model, save_model
from .training import TrainConfig, train

__version__ = "0.1.0"
