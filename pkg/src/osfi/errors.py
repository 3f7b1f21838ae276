"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class OSFIError(Exception):
    exit_code = 1


class ConfigurationError(OSFIError, ValueError):
    exit_code = 2


class ProtocolError(OSFIError, ValueError):
    """Malformed or insufficient data for the evaluation protocol."""

    exit_code = 3


class ParseError(ProtocolError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateInputError(ProtocolError):
    """Zero-norm embedding, zero class mean, or similar corrupt geometry."""


class NumericalError(OSFIError, ArithmeticError):
    exit_code = 4
