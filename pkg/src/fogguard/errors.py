"""Exception hierarchy. Every failure mode gets its own class so callers and
the CLI can map them onto exit codes."""


class FogGuardError(Exception):
    """Base class for all package errors."""


class DataError(FogGuardError, ValueError):
    """Malformed or out-of-invariant input data (CLI exit code 2)."""


class NumericalError(FogGuardError, ArithmeticError):
    """Numerical failure such as divergence (CLI exit code 3)."""


# imagecore
class MalformedHeader(DataError):
    pass


class UnsupportedMaxval(DataError):
    pass


class TruncatedData(DataError):
    pass


class InvalidDepth(DataError):
    pass


class InvalidImage(DataError):
    pass


# fogsynth
class DimensionMismatch(DataError):
    pass


class TransmissionUnderflow(NumericalError):
    pass


# dataset
class MalformedXml(DataError):
    pass


class UnknownClass(DataError):
    pass


class DegenerateBox(DataError):
    pass


class ClassListMismatch(DataError):
    pass


class ManifestError(DataError):
    pass


# percnet
class ShapeMismatch(DataError):
    pass


class MissingTrace(FogGuardError):
    pass


class ArchitectureMismatch(DataError):
    pass


class CheckpointError(DataError):
    pass


# trainer
class MissingDepth(DataError):
    pass


class TrainingDiverged(NumericalError):
    pass


# evalmap
class UnknownImageId(DataError):
    pass


class DetectionFormatError(DataError):
    pass


# cli
class ConfigError(DataError):
    pass
