"""Exception hierarchy shared by every module of the package."""


class GraspError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GraspError, ValueError):
    pass


class NumericError(GraspError, FloatingPointError):
    """A forward value became NaN or infinite."""


class VocabularyError(GraspError, ValueError):
    pass


class ContractError(GraspError, ValueError):
    pass


class ConfigError(GraspError, ValueError):
    pass


class SolverError(GraspError, RuntimeError):
    pass


class PartitionError(GraspError, ValueError):
    pass


class DegenerateBlockError(PartitionError):
    pass


class IntegrityError(GraspError, RuntimeError):
    """A frozen array changed during training."""
