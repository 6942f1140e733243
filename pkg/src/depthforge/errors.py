"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for I/O, 4 for numerical failures.
"""


class DepthForgeError(Exception):
    exit_code = 1


class ConfigError(DepthForgeError):
    exit_code = 2


class IOFailureBase(DepthForgeError):
    exit_code = 3


class NumericalError(DepthForgeError):
    exit_code = 4


# configuration / protocol errors
class InvalidConfig(ConfigError, ValueError):
    pass


class InvalidRange(ConfigError, ValueError):
    pass


class InfeasibleRange(ConfigError, ValueError):
    pass


class TooFewValidPixels(ConfigError, ValueError):
    pass


# file errors
class IoFailure(IOFailureBase, OSError):
    pass


class MalformedHeader(IOFailureBase, ValueError):
    pass


class DimensionMismatch(IOFailureBase, ValueError):
    pass


# numerical errors
class DegenerateRange(NumericalError, ValueError):
    pass


class EmptyConditioning(NumericalError, ValueError):
    pass


class SolverDivergence(NumericalError, RuntimeError):
    pass


class EmptyEnsemble(NumericalError, ValueError):
    pass


class EmptyReliableSet(NumericalError, ValueError):
    pass


class SingularFit(NumericalError, ValueError):
    pass


class EmptyMask(NumericalError, ValueError):
    pass


class InsufficientPairs(EmptyMask):
    pass


class NonPositiveDepth(NumericalError, ValueError):
    pass
