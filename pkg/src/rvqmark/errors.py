class ConfigurationError(ValueError):
    """Invalid watermark / experiment parameters (CLI exit code 2)."""


class DataFormatError(ValueError):
    """Malformed token stream, CSV or manifest input (CLI exit code 3)."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ShapeError(ValueError):
    """Token streams that should be aligned are not."""


class UndefinedEstimateError(ValueError):
    """An estimate has no samples to average over."""
