"""Exception types shared across the package."""


class IdmapError(Exception):
    """Base class for all package errors."""


class DegenerateVector(IdmapError):
    """Zero-norm or constant vector where a direction/spread is required."""


class ShapeError(IdmapError):
    """Dimension mismatch between operands or against a declared width."""


class EmptyInput(IdmapError):
    """An operation received an empty collection it cannot reduce."""


class RangeError(IdmapError):
    """A scalar argument lies outside its legal interval."""


class FormatError(IdmapError):
    """A persisted file fails structural validation.

    ``offset`` carries the byte position of the first inconsistency when
    it is known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class StorageError(IdmapError):
    """A persistence write could not be completed."""


class CapacityExhausted(IdmapError):
    """The identity registry cannot issue further indices."""


class StateError(IdmapError):
    """An operation was called out of order (e.g. backward without forward)."""


class NumericsError(IdmapError):
    """Non-finite values appeared where finite arithmetic is required."""


class TrainingError(IdmapError):
    """Training diverged; ``step`` records where."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CorpusError(IdmapError):
    """The corpus does not satisfy a training or evaluation precondition."""


class ConfigError(IdmapError):
    """Mutually inconsistent or illegal configuration values."""


class ConfigMismatch(ConfigError):
    """A model was paired with a sampler/registry it was not trained for."""


class RejectionExhausted(IdmapError):
    """Rejection sampling hit its attempt cap without an acceptable draw."""


class MetricUndefined(IdmapError):
    """A ratio metric has a non-positive denominator."""


class MetadataError(IdmapError):
    """Required sidecar metadata is missing or inconsistent."""


class EmptyPool(IdmapError):
    """A reference-pool strategy was given too small a pool."""
