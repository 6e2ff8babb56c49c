"""Exception types shared across the package."""


class SPFLError(Exception):
    pass


class ConfigError(SPFLError):
    """Invalid configuration; ``layer`` names the offending layer when relevant."""

    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class ParameterError(SPFLError, ValueError):
    pass


class StateError(SPFLError, RuntimeError):
    pass


class FormatError(SPFLError):
    pass


class DivergenceError(SPFLError, RuntimeError):
    pass
