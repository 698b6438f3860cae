"""Exception types shared across the toolkit."""


class MqntError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MqntError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NotPositiveDefiniteError(MqntError, ValueError):
    """Matrix is not positive definite after damping."""


class SingularMatrixError(MqntError, ValueError):
    """Triangular matrix has a zero diagonal entry."""


class ContextLengthError(MqntError, ValueError):
    """Token sequence exceeds the model context length."""


class VocabularyError(MqntError, ValueError):
    """Token id outside the model vocabulary."""


class EmptyCalibrationError(MqntError, ValueError):
    """Calibration set contains no sequences."""


class SizeError(MqntError, ValueError):
    """A data source is too small for the requested operation."""


class CalibrationSizeError(SizeError):
    """Source split is too small for the requested calibration policy."""


class MemoryBoundError(MqntError, RuntimeError):
    """Activation capture would exceed the configured memory budget."""


class DegenerateCalibrationError(MqntError, ValueError):
    """Calibration statistics are too degenerate to factorize."""


class TemplateError(MqntError, ValueError):
    """Prompt template slot missing or unresolved."""


class ShotError(MqntError, ValueError):
    """Not enough few-shot exemplars available."""


class PackFormatError(MqntError, ValueError):
    """Packed quantized payload is malformed."""


class FileFormatError(MqntError, ValueError):
    """On-disk artifact violates its byte-level format."""


class ChecksumError(FileFormatError):
    """Payload checksum does not match the stored digest."""


class SchemaVersionError(FileFormatError):
    """Results file was written by an unknown schema version."""


class ConfigValidationError(MqntError, ValueError):
    """Run configuration is invalid; collects every violation found.

    The ``problems`` attribute lists all messages, not just the first.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
