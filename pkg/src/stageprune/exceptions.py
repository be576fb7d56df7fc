"""Exception hierarchy shared across the package."""


class StagePruneError(Exception):
    """Base class for all errors raised by stageprune."""


class InvalidShape(StagePruneError, ValueError):
    pass


class InvalidInput(StagePruneError, ValueError):
    pass


class InvalidConfig(StagePruneError, ValueError):
    pass


class InvalidTimestep(StagePruneError, ValueError):
    pass


class InvalidSchedule(StagePruneError, ValueError):
    pass


class SingularHessian(StagePruneError, ArithmeticError):
    pass


class TrainingDiverged(StagePruneError, ArithmeticError):
    pass


class DegenerateActivations(StagePruneError, ArithmeticError):
    pass


class IncompleteTrajectory(StagePruneError, KeyError):
    pass


class MissingReference(StagePruneError, KeyError):
    pass
