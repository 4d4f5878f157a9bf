"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
I/O problems exit 2 (plain OSError), numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class ShapeMismatchError(ValueError):
    """Array arguments whose shapes are required to agree do not."""


class NumericalError(ArithmeticError):
    """A computation left the valid numeric domain (NaN/Inf, guard violations)."""


class TrainingError(NumericalError):
    """Training diverged; the message reports the step index."""
