"""Exception types shared across the voxcast pipeline."""


class VoxcastError(Exception):
    """Base class for all domain errors raised by this package."""


# --- panel / dataset errors ---------------------------------------------

class MissingLevelColumn(VoxcastError):
    """A required key column (item, base, equipment, year) is absent."""


class DuplicateKey(VoxcastError):
    """Two records share the same (item, base, equipment, year) key."""


class NonNumericCell(VoxcastError):
    """A feature, year, or target cell failed to parse as a number."""


class UnimputableFeature(VoxcastError):
    """A feature is missing in every record, so no median exists."""


class TooFewItems(VoxcastError):
    """Not enough items for the requested split or grouping."""


# --- embedding errors ----------------------------------------------------

class EmptyAxis(VoxcastError):
    """A level axis has no members to cluster."""


class SpaceTooLarge(VoxcastError):
    """The joint candidate-mapping space exceeds the configured cap."""


class IncompleteGrid(VoxcastError):
    """An item is missing (base, equipment, year) cells needed for a voxel."""


# --- network / search errors ---------------------------------------------

class ShapeMismatch(VoxcastError):
    """Tensor shapes are inconsistent with the declared contract."""


class UnsupportedStride(VoxcastError):
    """Primitive operations only support strides 1 and 2."""


class NonFiniteLoss(VoxcastError):
    """A loss became NaN/Inf during optimization; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvalidEpsilon(VoxcastError):
    """Finite-difference step must be strictly positive."""


# --- metric errors ---------------------------------------------------------

class LengthMismatch(VoxcastError):
    """Actual and forecast vectors differ in length."""


class EmptyInput(VoxcastError):
    """A metric was called on zero-length vectors."""


class NegativeValue(VoxcastError):
    """Min-max accuracy requires nonnegative actuals and forecasts."""


class InsufficientHistory(VoxcastError):
    """A time-series baseline needs at least one past year of demand."""


# --- selection errors -------------------------------------------------------

class Infeasible(VoxcastError):
    """No assignment satisfies the run-time budget."""


class InstanceTooLarge(VoxcastError):
    """Brute-force enumeration refuses instances above its size cap."""
