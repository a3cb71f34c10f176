"""Exception hierarchy shared across the toolkit.

Each class maps to a distinct CLI exit code (see ``repquant.cli``).
"""


class RepQuantError(Exception):
    exit_code = 1


class FormatError(RepQuantError):
    """Malformed model, sample or cache files."""

    exit_code = 3


class ShapeError(RepQuantError, ValueError):
    exit_code = 4


class NumericError(RepQuantError, ArithmeticError):
    exit_code = 5


class ConfigError(RepQuantError, ValueError):
    """Invalid arguments, configs or missing inputs."""

    exit_code = 6


class StructuralError(RepQuantError):
    """Model structure violates an invariant (e.g. identity branch with O != I)."""

    exit_code = 7
