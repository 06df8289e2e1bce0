"""Exception hierarchy.

ContractError maps to CLI exit code 1, I/O problems to exit code 2.
"""


class XlrankError(Exception):
    """Base class for all library errors."""


class ContractError(XlrankError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible; the message names both shapes."""


class NumericError(ContractError):
    """Non-finite values where finite ones are required."""


class ConfigError(ContractError):
    """Invalid configuration value or combination."""


class FingerprintMismatch(ContractError):
    """Artifact was produced against a different base checkpoint."""

    def __init__(self, expected, found, what="artifact"):
        super().__init__(
            f"base checkpoint fingerprint mismatch: {what} carries {found}, "
            f"loaded checkpoint is {expected}"
        )
        self.expected = expected
        self.found = found
