class ConfigurationError(ValueError):
    """Invalid configuration, shape, or argument combination."""


class NumericalError(ArithmeticError):
    """Non-finite values produced during a forward or backward pass."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
