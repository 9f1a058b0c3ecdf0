# src/errors.py
"""
Exception taxonomy shared by the simulator, the messaging stack and the CLI.

Every class derives from a builtin so callers may catch either the specific
class or the builtin (ValueError / RuntimeError).
"""


class ConfigError(ValueError):
    """Invalid configuration value. `field` is the dotted path of the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ProtocolError(ValueError):
    """Malformed key, frame, envelope or message."""


class DecryptionError(ProtocolError):
    """Ciphertext failed authentication or was addressed to another key."""


class DuplicateTestError(ValueError):
    """A test was requested for an agent that already has one pending."""


class ConvergenceError(RuntimeError):
    """A bisection search did not reach its tolerance."""
