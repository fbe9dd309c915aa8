"""Multi-task 3D CNN for nodule false-positive reduction and segmentation, on a numpy autodiff core."""

from .errors import (
    ConfigError, DataError, FormatError, NoduleMTLError, NumericError, ShapeError,
    UndefinedMetricError, UsageError,
)
from .losses import MultiTaskLossConfig, cross_entropy_class, cross_entropy_voxel, multi_task_loss
from .metrics import FROC_RATES, FrocCurve, MetricsLog, dice, froc, froc_score, sensitivity
from .model import MultiTaskNet, NetworkConfig, build_network, forward, load_weights, predict, save_weights
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
