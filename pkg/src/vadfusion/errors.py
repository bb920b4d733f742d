"""Exception hierarchy.

The four top-level families map onto the CLI exit-code contract:
ConfigError -> 2, DataError -> 3, BackendError -> 4, anything else -> 1.
"""


class VadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VadError):
    """Bad or missing configuration (file, overrides, env)."""


class DataError(VadError):
    """Problems with input data: files, annotations, class supply."""


class BackendError(VadError):
    """Encoder or VLM backend failures."""


class TrainingError(VadError):
    """Optimization-time failures."""


# --- data ---------------------------------------------------------------

class MissingFile(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, row_number, message):
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


class DuplicateKey(DataError):
    pass


class MissingFrameImage(DataError):
    pass


class SinglePersonDataset(DataError):
    pass


class InsufficientClassSamples(DataError):
    def __init__(self, label, have, need):
        super().__init__(f"class {label!r} has {have} segments, need {need}")
        self.label = label


class InsufficientData(DataError):
    pass


class EmptyPredictions(DataError):
    pass


class TooFewCaptions(DataError):
    pass


class PersonNamespaceCollision(DataError):
    pass


class EmptyCaption(DataError):
    pass


class TokenLimitExceeded(DataError):
    pass


# --- shapes and numerics ------------------------------------------------

class ShapeMismatch(VadError):
    pass


class ReplicationError(ShapeMismatch):
    """Rows of a replicated text embedding are not identical."""


class DimensionMismatch(ShapeMismatch):
    pass


class WrongInputSize(ShapeMismatch):
    pass


class ZeroNormVector(VadError):
    """Cosine similarity is undefined for an all-zero vector."""


class NonFiniteLogit(VadError):
    pass


class UninitializedParams(VadError):
    pass


# --- backends -----------------------------------------------------------

class BackendFailure(BackendError):
    pass


class BackendNotTrainable(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


class VlmUnavailable(BackendError):
    pass


class UnparseableYesNo(BackendError):
    """The yes/no prompt produced a response matching neither token."""


# --- persistence --------------------------------------------------------

class CorruptCacheEntry(VadError):
    """Checksum mismatch in a cache entry; callers treat it as a miss."""


class CorruptCheckpoint(VadError):
    pass


class DivergedLoss(TrainingError):
    pass
