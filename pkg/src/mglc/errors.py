"""Exception types. CLI exit codes hang off the ``exit_code`` attribute."""


class MGLCError(Exception):
    exit_code = 3


class ConfigError(MGLCError, ValueError):
    exit_code = 2


class FitError(MGLCError, ValueError):
    pass


class ShapeError(MGLCError, ValueError):
    exit_code = 2


class EvaluationError(MGLCError, FloatingPointError):
    pass


class TrainingError(MGLCError, FloatingPointError):
    pass


class RejectedError(MGLCError):
    """A candidate Lyapunov net failed its certificate."""


class IntegrationError(MGLCError, FloatingPointError):
    pass


class FormatError(MGLCError):
    """Wrong magic, version or truncated container."""

    exit_code = 4


class StaleTapeError(MGLCError, RuntimeError):
    pass
