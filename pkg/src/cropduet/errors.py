"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 1, DataError -> 2,
CheckpointError and any other runtime failure -> 3.
"""


class CropDuetError(Exception):
    """Base class for all package errors."""


class DimensionError(CropDuetError):
    """Tensor shapes or sizes are incompatible with an operation."""


class ContractError(CropDuetError):
    """An operation was called in a way that violates its contract."""


class DegenerateBatchError(CropDuetError):
    """A batch is too small for the requested statistic."""


class ConfigurationError(CropDuetError):
    """Bad run configuration or unusable input directories."""


class DataError(CropDuetError):
    """Dataset contents violate the expected schema."""


class CheckpointError(CropDuetError):
    """Checkpoint is missing, corrupt, or does not match the run config."""


class SamplingExhaustedError(CropDuetError):
    """Rejection sampling failed to hit the requested label stratum."""
