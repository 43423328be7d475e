"""Exception hierarchy for the agnet package."""


class AgnetError(Exception):
    """Base class for all agnet errors."""


class ConfigError(AgnetError):
    """Invalid configuration: bad dimension, unknown key, malformed value."""


class ShapeError(AgnetError):
    """Operands have incompatible shapes."""


class NumericError(AgnetError):
    """Non-finite values where finite ones are required."""


class ManifestError(AgnetError):
    """Manifest file is missing, empty, or malformed."""


class SamplingError(AgnetError):
    """A pair-sampling request cannot be satisfied by the dataset."""


class SplitError(AgnetError):
    """A train/test split would leave one side empty."""


class ScheduleError(AgnetError):
    """Epoch falls outside the learning-rate schedule."""


class TrainingError(AgnetError):
    """Training aborted, e.g. a loss component went non-finite."""


class CheckpointError(AgnetError):
    """Checkpoint file is corrupt or incompatible with the current config."""


class ProtocolError(AgnetError):
    """Evaluation protocol misuse: no valid queries, bad gallery size, etc."""
