"""Error types shared across the package.

Both map to distinct CLI exit codes: input errors are caller mistakes
(bad shapes, out-of-range arguments, malformed files), numerical errors
are failures of the linear algebra (non-PSD matrices beyond tolerance,
factorization failures after jitter escalation).
"""


class InputError(ValueError):
    """Invalid argument, shape mismatch, or malformed input file."""


class NumericalError(ArithmeticError):
    """Numerical failure: factorization breakdown or tolerance violation."""
