"""Exception types shared across the package."""


class DynLoraError(Exception):
    """Base class for all errors raised by dynlora."""


class ShapeError(DynLoraError, ValueError):
    """Operand shapes do not conform."""


class ContractError(DynLoraError, ValueError):
    """A documented precondition was violated."""


class ConfigError(DynLoraError, ValueError):
    """Invalid run configuration. ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ParseError(DynLoraError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
