"""Exception types shared across the package."""


class VoxDiffError(Exception):
    """Base class; ``kind`` is the short tag used in CLI error lines."""

    kind = "error"


class DimensionError(VoxDiffError, ValueError):
    kind = "dimension"


class EmptyInputError(VoxDiffError, ValueError):
    kind = "empty-input"


class ConfigError(VoxDiffError, ValueError):
    kind = "config"


class GenerationError(VoxDiffError, RuntimeError):
    kind = "generation"


class GradCheckError(VoxDiffError, AssertionError):
    kind = "gradcheck"
