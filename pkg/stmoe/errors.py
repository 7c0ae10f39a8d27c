from __future__ import annotations


class StMoeError(Exception):
    """Base class for every error raised by the package.

    ``code`` is the short machine-readable reason the CLI prints as
    ``error: <code>: <message>``.
    """

    code = "error"


class DimensionError(StMoeError, ValueError):
    code = "dimension"


class TokenIndexError(StMoeError, IndexError):
    code = "index"


class ConfigError(StMoeError, ValueError):
    code = "config"


class CorpusError(StMoeError):
    code = "ingestion"


class UnsupportedOperationError(StMoeError):
    code = "unsupported"


class ProbeError(StMoeError):
    code = "probe"


class CheckpointError(StMoeError):
    code = "checkpoint"


class AlignmentError(StMoeError):
    code = "alignment"


class TrainingDivergedError(StMoeError):
    code = "diverged"


class SampleSizeError(StMoeError, ValueError):
    code = "samples"


class StorageError(StMoeError):
    code = "io"
