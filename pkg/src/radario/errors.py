"""Exception hierarchy. Each class carries the category string and exit code the CLI reports."""


class RadarioError(Exception):
    category = "internal"
    exit_code = 1


class ConfigError(RadarioError, ValueError):
    category = "config"
    exit_code = 2


class FormatError(RadarioError, ValueError):
    category = "format"
    exit_code = 3


class ShapeMismatchError(RadarioError, ValueError):
    category = "shape-mismatch"
    exit_code = 4


class InvisibleAngleError(RadarioError, ValueError):
    category = "invisible-angle"
    exit_code = 5


class DegenerateGeometryError(RadarioError, ValueError):
    category = "degenerate-geometry"
    exit_code = 6


class InsufficientPointsError(RadarioError, ValueError):
    category = "insufficient-points"
    exit_code = 7


class TimestampError(RadarioError, ValueError):
    category = "timestamp"
    exit_code = 8


class OptimizationDivergedError(RadarioError, RuntimeError):
    category = "optimization-diverged"
    exit_code = 9


class EvaluationError(RadarioError, ValueError):
    category = "evaluation"
    exit_code = 10
