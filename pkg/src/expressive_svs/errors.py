"""Exception types raised across the package.

Each error maps to one failure class so callers (and the CLI exit codes)
can tell data problems from configuration problems.
"""


class SVSError(Exception):
    """Base class for all package errors."""


class DataError(SVSError):
    """Problem with corpus content. CLI exit code 3."""


class ConfigError(SVSError):
    """Problem with configuration or checkpoint compatibility. CLI exit code 2."""


# corpus
class MalformedLine(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnknownPhoneme(DataError):
    pass


class UnreadableAudio(DataError):
    pass


class UnsupportedRate(DataError):
    pass


class InsufficientData(DataError):
    pass


# dsp / score
class ConfigInvalid(ConfigError):
    pass


class PitchOutOfRange(DataError):
    pass


class RestPitch(DataError):
    pass


# semantic
class ProviderUnavailable(ConfigError):
    pass


class TokenizationMismatch(DataError):
    pass


class AlignmentFailure(DataError):
    pass


class PlanMismatch(DataError):
    pass


# model / training / evaluation
class ShapeMismatch(SVSError):
    pass


class NonFiniteLoss(SVSError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class CheckpointWriteFailure(SVSError):
    pass


class ConfigHashMismatch(ConfigError):
    pass


class EmptyOverlap(DataError):
    pass


class WriteFailure(SVSError):
    pass
