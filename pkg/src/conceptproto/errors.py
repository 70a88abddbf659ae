"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all conceptproto errors."""


class NonFiniteInputError(ToolkitError, ValueError):
    """Input contains NaN or infinite values."""


class BatchTooSmallError(ToolkitError, ValueError):
    """Batch size below the minimum the unbiased estimator supports."""


class ShapeMismatchError(ToolkitError, ValueError):
    """Operands have incompatible shapes or batch sizes."""


class DegenerateSegmentError(ToolkitError, ValueError):
    """A segment's self-similarity term is non-positive (constant features)."""


class ConfigurationError(ToolkitError, ValueError):
    """Invalid run or segmentation configuration."""


class NullPrototypeError(ToolkitError, ValueError):
    """No prototype can be extracted (all feature vectors were zero)."""


class DegenerateSampleError(ToolkitError, ValueError):
    """All prototype responses of a sample are zero; cannot normalize."""


class SlotMismatchError(ToolkitError, ValueError):
    """Two distributions disagree on their (layer, segment) slot ordering."""


class MissingClassError(ToolkitError, KeyError):
    """Requested class has no centroid / no samples."""


class StaleStateError(ToolkitError, RuntimeError):
    """Prototype bank and centroid set come from different refresh epochs."""


class TrainingDivergedError(ToolkitError, RuntimeError):
    """A training batch produced a non-finite loss."""


class IngestionError(ToolkitError, ValueError):
    """Dataset manifest or referenced files are invalid."""


class CorruptArtifactError(ToolkitError, ValueError):
    """A stored array's byte length disagrees with its manifest shape."""
