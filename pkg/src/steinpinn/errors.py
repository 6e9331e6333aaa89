"""Exception taxonomy shared by all modules.

Three failure categories cover the whole library: bad configuration or
shapes, non-finite numerics discovered mid-computation, and requests that
exceed a deliberate capability guard. The CLI maps ConfigError to exit
code 2 and NumericError to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, schema violation, or shape mismatch."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class CapabilityError(RuntimeError):
    """The request is outside a guarded capability limit."""
