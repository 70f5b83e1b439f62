"""Module for the exception and warning types raised by clustersize."""

from __future__ import annotations


class ClusterSizeError(Exception):
    """Base class for errors raised by clustersize."""


class DataValidationError(ClusterSizeError, ValueError):
    """Invalid input data, reported with its location.

    :param message: Description of the problem.
    :param source: Name of the offending file (or table).
    :param row: 1-based data row number, counting the header as row 1.
    """

    def __init__(self, message: str, source: str | None = None, row: int | None = None) -> None:
        self.source = source
        self.row = row
        where = ""
        if source is not None:
            where = f"{source}"
            if row is not None:
                where += f", row {row}"
            where += ": "
        super().__init__(f"{where}{message}")


class ModelSpecError(ClusterSizeError, ValueError):
    """Mismatch between a model family, its constraints and its parameters."""


class NumericalError(ClusterSizeError, ArithmeticError):
    """A computation produced a non-finite value that cannot be recovered."""


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped before meeting its tolerance."""


class BoundaryWarning(UserWarning):
    """A test statistic or estimate sits on a parameter-space boundary."""


class SimulationWarning(UserWarning):
    """A simulated value had to be altered to satisfy a data invariant."""


class ConfigError(ClusterSizeError, ValueError):
    """Invalid run configuration (unknown key, wrong type or unreadable file)."""
