"""Grid-feature vision-language pre-training at desk scale, on a from-scratch numpy autodiff core."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError
from .fusion import FusionConfig
from .model import GridVLP
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

__version__ = "0.1.0"
