"""Exception types shared across the workbench."""


class LangnavError(Exception):
    """Base class for all workbench errors."""


class DimensionError(LangnavError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(LangnavError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigurationError(LangnavError):
    """Invalid configuration value (head divisibility, odd PE width, unknown variant, ...)."""


class InputError(LangnavError):
    """Invalid runtime input (out-of-vocabulary token, empty path, zero reference length)."""


class NoPathError(LangnavError):
    """The planner found no route between start and goal."""


class WorldGenerationError(LangnavError):
    """World generation exhausted its seeded retry budget."""


class RolloutDivergenceError(LangnavError):
    """The oracle controller exceeded its step budget without reaching the goal."""


class GenerationShortfallError(LangnavError):
    """Dataset generation could not produce the requested number of episodes."""
