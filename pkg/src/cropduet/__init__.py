"""cropduet: weakly supervised single-object localization.

A localizer network predicts a constrained affine crop of its input; an
assessor network, trained on synthetic composites to regress the IoU between
a crop window and the object it contains, scores that crop.  The localizer is
trained purely by gradients flowing back through the (frozen) assessor.
"""

from .boxes import BBox, iou
from .errors import (CheckpointError, ConfigurationError, ContractError,
                     CropDuetError, DataError, DegenerateBatchError,
                     DimensionError, SamplingExhaustedError)
from .tensor import Tape, Tensor, backward, set_default_dtype, use_dtype

__all__ = [
    "BBox", "iou",
    "Tape", "Tensor", "backward", "set_default_dtype", "use_dtype",
    "CropDuetError", "DimensionError", "ContractError", "DegenerateBatchError",
    "ConfigurationError", "DataError", "CheckpointError", "SamplingExhaustedError",
]

__version__ = "0.1.0"
