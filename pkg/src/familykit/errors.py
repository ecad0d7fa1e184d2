"""Exception hierarchy shared by every familykit module.

The CLI maps these onto process exit codes (see cli.EXIT_CODES), so new
error types should subclass one of the four coded categories below.
"""


class FamilyKitError(Exception):
    """Base class for all familykit errors."""


class ConfigError(FamilyKitError):
    """Invalid configuration: bad value, unknown key, inconsistent spec."""


class DataError(FamilyKitError):
    """Unusable input data (empty corpus, corpus shorter than one batch)."""


class NumericError(FamilyKitError):
    """Numerical failure: non-convergence, invalid values, budget miss."""


class IntegrityError(FamilyKitError):
    """Artifact mismatch: checkpoint/config/plan fingerprints disagree."""


class ShapeError(ConfigError):
    """Tensor operands with incompatible shapes."""


class InputError(ConfigError):
    """Operand values outside an operation's domain (non-finite, bad ids)."""


class GraphError(ConfigError):
    """Autodiff misuse: non-scalar loss or loss detached from parameters."""


class DefinitenessError(NumericError):
    """Cholesky hit a non-positive pivot; caller may fall back to SVD."""


class DivergenceError(NumericError):
    """Training loss became non-finite; the step is aborted, never skipped."""


class DegenerateBatchError(DataError):
    """A loss was requested over zero effective (non-ignored) positions."""
