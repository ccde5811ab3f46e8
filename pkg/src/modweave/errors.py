"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 1, NumericError -> 2,
CheckpointError -> 3. Everything else is a plain bug.
"""


class ModweaveError(Exception):
    pass


class ShapeError(ModweaveError, ValueError):
    """Operand shapes do not line up; message names both shapes."""


class ConfigError(ModweaveError, ValueError):
    """Invalid run configuration; message names the field path."""


class DataError(ModweaveError, ValueError):
    """Bad samples or labels, e.g. a symbol id outside the vocabulary."""


class NumericError(ModweaveError, ArithmeticError):
    """Non-finite loss or divergence during training."""


class CheckpointError(ModweaveError, ValueError):
    """Unreadable or incompatible checkpoint."""


class OptimizerError(ModweaveError, ValueError):
    """Optimizer misuse, e.g. stepping a parameter with no gradient."""
