"""Exception hierarchy shared by all modules."""


class MultiposeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MultiposeError, ValueError):
    """Array dimensions do not match what an operation expects."""


class SingularProjectionError(MultiposeError, ArithmeticError):
    """A joint sits at or behind the camera plane."""

    def __init__(self, joint: int, depth: float):
        self.joint = int(joint)
        self.depth = float(depth)
        super().__init__(f"joint {self.joint} has camera depth {self.depth:.6g} <= eps")


class NonFiniteError(MultiposeError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, what: str, detail: str = ""):
        self.what = what
        msg = f"non-finite value in {what}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class StaleTapeError(MultiposeError):
    """A backward pass was requested with a tape that no longer matches its layers."""


class ConfigError(MultiposeError, ValueError):
    """Invalid or unknown configuration entry."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


class DataFormatError(MultiposeError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
