class BarlError(Exception):
    """Base class for library errors."""


class ContractError(BarlError, ValueError):
    """An argument violates an operation's preconditions."""


class FactorizationError(BarlError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class FitError(FactorizationError):
    """Hyperparameter fitting could not produce a factorizable kernel matrix."""


class PlanningError(BarlError):
    """A rollout produced non-finite values during planning."""

    def __init__(self, message, actions=None, states=None):
        super().__init__(message)
        self.actions = actions
        self.states = states


class RunError(BarlError):
    """A run aborted; carries the failing module and iteration."""

    def __init__(self, message, module=None, iteration=None):
        super().__init__(message)
        self.module = module
        self.iteration = iteration
