"""Exception hierarchy for the htdg package.

All package errors derive from HtdgError so the CLI can map them to a
single nonzero exit code while argparse usage errors stay separate.
"""


class HtdgError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(HtdgError):
    """An argument violates an operation's preconditions."""


class ConfigError(HtdgError):
    """A configuration value or config-file key is invalid."""


class IngestionError(HtdgError):
    """An image file could not be read or decoded."""


class DatasetError(HtdgError):
    """A dataset directory is missing required classes, splits or files."""


class SequencingError(HtdgError):
    """An operation was called before its prerequisites were completed."""


class TrainingError(HtdgError):
    """Training aborted, e.g. because a loss became non-finite."""


class CheckpointError(HtdgError):
    """A checkpoint directory or blob is malformed or incompatible."""
