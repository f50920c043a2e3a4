"""Exception hierarchy."""


class NestedMlmcError(Exception):
    """Base class for all library errors."""


class EmptySampleSet(NestedMlmcError, ValueError):
    pass


class IncompatibleLevelSizes(NestedMlmcError, ValueError):
    pass


class InsufficientLevels(NestedMlmcError, ValueError):
    pass


class BelowSupport(NestedMlmcError, ValueError):
    pass


class MaxLevelExceeded(NestedMlmcError, RuntimeError):
    pass


class NonconvergentBias(NestedMlmcError, RuntimeError):
    pass


class BudgetExceeded(NestedMlmcError, RuntimeError):
    pass
