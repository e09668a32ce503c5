"""Self-contained CPU deep-learning engine and ResUnet++ segmentation pipeline."""

from .autodiff import Tape, Variable, grad_check
from .data import DatasetSplit, Sample, load_dataset, split
from .losses import (LossConfig, binarize, dice_coefficient, jaccard_index,
                     jaccard_loss, pixel_accuracy)
from .model import ResUnetPPConfig, ResUnetPPModel, build_model, count_parameters
from .optim import LRSchedule, MomentOptimizer, reduce_on_plateau, schedule_lr
from .tensor import ConvSpec
from .trainer import (TrainConfig, TrainHistory, checkpoint_load, checkpoint_save,
                      evaluate, train)

__version__ = "0.1.0"

__all__ = [
    "ConvSpec", "Tape", "Variable", "grad_check",
    "Sample", "DatasetSplit", "load_dataset", "split",
    "LossConfig", "jaccard_loss", "jaccard_index", "dice_coefficient",
    "pixel_accuracy", "binarize",
    "ResUnetPPConfig", "ResUnetPPModel", "build_model", "count_parameters",
    "LRSchedule", "MomentOptimizer", "schedule_lr", "reduce_on_plateau",
    "TrainConfig", "TrainHistory", "train", "evaluate",
    "checkpoint_save", "checkpoint_load",
    "__version__",
]
