"""Exception hierarchy shared by all pipeline stages."""


class RegraspError(Exception):
    """Base class; ``stage`` is filled in by the pipeline when it aborts."""

    stage = None


class EmptyInput(RegraspError, ValueError):
    pass


class EmptyCloud(EmptyInput):
    pass


class DimensionMismatch(RegraspError, ValueError):
    pass


class NonFinite(RegraspError, ArithmeticError):
    pass


class NoCorrespondences(RegraspError):
    """Every observed point is farther than the correspondence gate."""


class RefinementRejected(RegraspError):
    pass


class InsufficientTrainingData(RegraspError, ValueError):
    pass


class Infeasible(RegraspError):
    """IK did not reach the target within tolerance."""


class NoHandoverFound(RegraspError):
    pass


class NoViewPoseFound(RegraspError):
    pass


class ConfigError(RegraspError, ValueError):
    pass
