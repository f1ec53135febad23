"""Exception types shared across the package."""


class PanelIVError(Exception):
    """Base class for all errors raised by paneliv."""


class ConfigError(PanelIVError):
    """A configuration value violates its documented constraints."""


class DimensionMismatch(PanelIVError):
    """Array shapes are inconsistent with the requested operation."""


class RankDeficient(PanelIVError):
    """Design matrix is (numerically) rank deficient and no fallback was allowed."""


class NegativeScale(PanelIVError):
    """A standard deviation or scale parameter is negative."""


class NonFiniteLoss(PanelIVError):
    """Training or evaluation produced a non-finite loss value."""


class NonFiniteGradient(PanelIVError):
    """Backpropagation produced a non-finite gradient."""


class DegenerateTreatment(PanelIVError):
    """Treatment column is constant at the requested timestep."""


class MissingCell(PanelIVError):
    """A benchmark report does not contain a requested cell."""


class MissingColumn(PanelIVError):
    """A required column is absent from a CSV header."""


class RaggedPanel(PanelIVError):
    """Individuals do not share a complete common time grid."""


class UnparseableValue(PanelIVError):
    """A CSV cell could not be parsed; carries row index and column name."""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class AllMissingColumn(PanelIVError):
    """A required column has no usable values after parsing."""


class WeakInstrumentWarning(UserWarning):
    """First-stage instrument strength below the conventional threshold."""
