from typing import Optional


class FiemError(Exception):
    """Base class for every error raised by the library."""


class ConfigurationError(FiemError):
    """Invalid configuration: unknown keys, inconsistent dimensions, missing diagnostics."""


class ArgumentError(FiemError, ValueError):
    """A call argument is outside its documented range."""


class DomainError(FiemError):
    """A statistic lies outside the admissible domain of the M-step map."""

    def __init__(self, condition: str, iteration: Optional[int] = None):
        self.condition = condition
        self.iteration = iteration
        super().__init__(self._format())

    def _format(self) -> str:
        if self.iteration is None:
            return f"domain violation: {self.condition}"
        return f"domain violation at iteration {self.iteration}: {self.condition}"

    def at_iteration(self, iteration: int) -> "DomainError":
        """Return a copy of this error tagged with the iteration index."""
        err = type(self).__new__(type(self))
        DomainError.__init__(err, self.condition, iteration)
        return err


class EmptyComponentError(DomainError):
    """A mixture component carries (numerically) zero mass."""


class ParameterError(FiemError):
    """A parameter does not belong to the parameter set."""


class StateError(FiemError):
    """An object was used before being initialized."""


class UnsupportedCapabilityError(FiemError):
    """The model does not expose the requested optional capability."""


class InfeasibleError(FiemError):
    """A step-size planner precondition does not hold."""

    def __init__(self, condition: str):
        self.condition = condition
        super().__init__(f"infeasible: {condition}")


class DegenerateVarianceError(FiemError):
    """The control-variate variance vanishes, so the optimal coefficient is undefined."""
