"""Shared exception types."""


class GeometryError(ValueError):
    """Two grids that must share shape and spacing do not."""


class ValidationError(ValueError):
    """A record, file, or configuration violates a contract."""


class PauseRequested(Exception):
    """A pipeline stage needs external input before it can continue.

    Not a failure: the caller should surface what is missing and exit with
    the pause status code so the run can be resumed once the input exists.
    """

    exit_code = 3
