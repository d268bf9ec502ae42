"""Exception types shared across the package."""


class PCRobustError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(PCRobustError):
    """Operand shapes do not agree."""


# --- mesh / dataset parsing ---

class MeshError(PCRobustError):
    pass


class MissingMagicError(MeshError):
    """OFF file does not start with the OFF magic token."""


class CountMismatchError(MeshError):
    """Fewer vertices or faces than the header declared."""


class IndexOutOfRangeError(MeshError):
    """A face references a vertex that does not exist."""


class DegenerateMeshError(MeshError):
    """Mesh has no face with positive area."""


class UnsupportedClassCountError(PCRobustError):
    """Synthetic dataset requested more classes than shape families exist."""


# --- layers / models ---

class TooFewRowsError(PCRobustError):
    """Batch-norm train mode needs at least two rows."""


class EmptyInputError(PCRobustError):
    """Pooling received an empty feature map."""


class HeadDivisibilityError(PCRobustError):
    """Feature width is not divisible by the attention head count."""


class WrongWidthError(PCRobustError):
    """Feature map width does not match what the pooling expects."""


class LabelOutOfRangeError(PCRobustError):
    """Class label outside [0, n_classes)."""


class TooManyCentroidsError(PCRobustError):
    """Farthest-point sampling asked for more centroids than points."""


class TooFewPointsError(PCRobustError):
    """Operation needs more input points than were given."""


class StaleCacheError(PCRobustError):
    """Backward pass got a cache produced by a different forward spec."""


# --- attacks ---

class NonFiniteGradientError(PCRobustError):
    """Input gradient contains NaN or Inf."""


class AllPointsRemovedError(PCRobustError):
    """The denoiser removed every point of the cloud."""


# --- persistence / config ---

class CheckpointError(PCRobustError):
    pass


class BadMagicError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedFileError(CheckpointError):
    """Checkpoint file ended before all declared data was read."""


class ShapeMismatchOnLoadError(CheckpointError):
    """Checkpoint tensor shapes do not match the target model spec."""


class ConfigError(PCRobustError):
    """Run configuration is inconsistent or contains unknown keys."""
