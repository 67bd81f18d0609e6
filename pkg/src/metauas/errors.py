"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""


class MetaUASError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MetaUASError, ValueError):
    """Bad configuration: unknown keys, out-of-range values, invalid arguments."""


class DataError(MetaUASError):
    """Unreadable or malformed input data (corpora, datasets, checkpoints)."""


class DegeneratePairError(MetaUASError):
    """A synthesized pair carries no actual change and must not be emitted."""


class InpaintError(DataError):
    """An inpainting backend failed for a given source image."""


class UndefinedMetricError(MetaUASError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class TrainingDivergedError(MetaUASError, RuntimeError):
    """Loss became NaN/Inf; training aborted after writing a diagnostic snapshot."""
