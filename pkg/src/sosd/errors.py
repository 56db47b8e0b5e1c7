"""Exception types shared across the package.

Two broad families matter to callers: input/validation problems
(ValidationError, a ValueError) and numerical failures at runtime
(NumericError, a RuntimeError). The CLI maps them to exit codes 1 and 2.
"""


class ValidationError(ValueError):
    """Invalid input: bad shapes, out-of-range config, malformed files."""


class DescriptorFileError(ValidationError):
    """Descriptor file failed validation. `code` names the specific check."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class NumericError(RuntimeError):
    """A numerical procedure failed (divergence, nondifferentiable point)."""


class DivergenceError(NumericError):
    """Non-finite gradient or parameter encountered during optimization."""


class NondifferentiablePointError(NumericError):
    """Batch sits on (or too near) a hinge, argmin, or neighbor-rank tie."""
