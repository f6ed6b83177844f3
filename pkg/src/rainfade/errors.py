"""Exception hierarchy.

Every error the pipeline raises on bad input derives from ``RainFadeError``.
``DataError`` subclasses map to CLI exit code 3, ``ConfigError`` to exit code 2.
"""


class RainFadeError(Exception):
    pass


class DataError(RainFadeError, ValueError):
    pass


class ConfigError(RainFadeError, ValueError):
    pass


# grid geometry
class OffDisk(DataError):
    pass


class NotVisible(DataError):
    pass


class NonDivisible(DataError):
    pass


class OutOfBounds(DataError):
    pass


class MissingProjection(DataError):
    pass


# preprocessing
class ValueOutOfRange(DataError):
    pass


class ChannelMismatch(DataError):
    pass


class InsufficientStats(DataError):
    pass


class TooFewSamples(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


# labeling
class EmptyBin(DataError):
    pass


class NoData(DataError):
    pass


# dataset
class FrameGapTooLarge(DataError):
    pass


class GeometryMismatch(DataError):
    pass


class EmptySplit(DataError):
    pass


class SingleClass(DataError):
    pass


class DigestMismatch(DataError):
    pass


class CorruptHeader(DataError):
    pass


# model
class ShapeMismatch(DataError):
    pass


class StaleCache(RainFadeError, RuntimeError):
    pass


class EmptyDataset(DataError):
    pass


# eval
class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


# synthgen
class InvalidParams(ConfigError):
    pass


# cli
class ConfigParse(ConfigError):
    pass


class MissingArtifact(DataError):
    pass
