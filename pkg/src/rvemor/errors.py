"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, solver non-convergence with 3, and artifact/data mismatches with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, schema violation or missing input file."""


class DataMismatchError(RuntimeError):
    """Artifacts that do not belong together (fingerprints, shapes, hashes)."""


class NonconvergenceError(RuntimeError):
    """Base class for iterative procedures that failed to converge."""


class ReturnMappingError(NonconvergenceError):
    """Local constitutive update did not converge within the iteration cap."""


class SimulationDivergedError(NonconvergenceError):
    """Global Newton loop failed even after the bisection budget was spent."""

    def __init__(self, message, increment=None):
        super().__init__(message)
        self.increment = increment


class ElementInversionError(ValueError):
    """Deformation state with non-positive Jacobian (inverted element)."""


class RankError(ValueError):
    """Requested more basis vectors than the snapshot set supports."""


class TrainingDivergedError(NonconvergenceError):
    """Loss became non-finite during optimisation."""

    def __init__(self, message, epoch=None, loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss
