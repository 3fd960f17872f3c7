"""Exception hierarchy shared by every module."""


class PopiError(Exception):
    pass


class InvalidInputError(PopiError, ValueError):
    pass


class FrozenPolicyError(PopiError):
    pass


class EnumerationTooLargeError(PopiError):
    pass


class NumericError(PopiError, ArithmeticError):
    pass


class ConfigError(PopiError):
    pass


class InvariantViolation(PopiError):
    pass


class PersonaAccessError(PopiError):
    """Raised when a training code path touches a hidden persona."""
