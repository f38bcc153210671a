"""Error types shared by the shellflow engines and the CLI."""


class ShellflowError(Exception):
    """Base class for all shellflow failures."""

    exit_code = 1


class ConfigError(ShellflowError, ValueError):
    """Invalid, unknown or mistyped configuration."""

    exit_code = 2


class DivergenceError(ShellflowError, ArithmeticError):
    """Numerical blow-up: non-finite gradients, CFL violation, negative density."""

    exit_code = 3


class CheckFailure(ShellflowError):
    """An exact identity was violated beyond its tolerance."""

    exit_code = 4


class DegenerateDataError(ShellflowError, ValueError):
    """Not enough usable data (steps, cells, support) to produce a result."""

    exit_code = 4


class DimensionError(ShellflowError, ValueError):
    """Inputs that do not line up: shape, symmetry or time axis."""

    exit_code = 2
