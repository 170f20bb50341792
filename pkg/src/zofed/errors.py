"""Exception types shared across the simulator.

Each maps to a CLI exit code: configuration problems exit with 2, numeric
failures with 3.
"""


class ConfigError(ValueError):
    """Invalid model, partition, estimator or run configuration."""

    def __init__(self, message, key=None, line=None):
        self.message = message
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message)


class NumericError(ArithmeticError):
    """A NaN/Inf appeared in a forward pass or a gradient estimate."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class ProtocolError(RuntimeError):
    """Uploads or estimator inputs violate the round protocol."""


class CapabilityError(RuntimeError):
    """Requested computation is outside what the implementation supports."""


class IngestionError(ValueError):
    """Malformed dataset file or wire record."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
