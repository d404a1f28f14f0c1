"""
Exception hierarchy shared by every pipeline app.
"""


class ForestLPRError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(ForestLPRError):
    """A configuration value violates its constraint."""


class PCDFormatError(ForestLPRError):
    """A PCD file could not be parsed or uses an unsupported encoding."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line: {line!r})"
        super().__init__(message)
        self.line = line


class DegenerateInputError(ForestLPRError):
    """The input is too small or too degenerate for the requested operation."""


class NumericError(ForestLPRError):
    """A computation produced a non-finite or undefined value."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class ModelFormatError(ForestLPRError):
    """A model or descriptor file is truncated, mislabeled or from another version."""


class DatasetError(ForestLPRError):
    """A manifest, pose set or pair list cannot support the requested operation."""


class UndefinedMetricError(ForestLPRError):
    """A metric was requested on an input for which it is undefined."""


class TapeError(ForestLPRError):
    """A gradient was requested for a value that is not on the recorded tape."""
