"""Style-based age transformation (SAM) at desk scale."""

from .core import Checkpoint, LossWeights, TrainConfig, load_checkpoint, save_checkpoint
from .encoder import SamModel, sam_cycle, sam_transform
from .generator import ToyGenerator

__all__ = ["Checkpoint", "LossWeights", "SamModel", "ToyGenerator", "TrainConfig", "load_checkpoint",
           "sam_cycle", "sam_transform", "save_checkpoint"]
__version__ = "0.1.0"
