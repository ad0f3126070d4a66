"""Exception types shared across the package."""


class KernelDomainError(ValueError):
    """Discount-kernel evaluation outside its domain (s > t, bad params, non-finite input)."""


class ProblemConstructionError(ValueError):
    """Control-problem constructor arguments violate a structural requirement."""


class PolicyNumericError(ArithmeticError):
    """Non-finite values produced inside a policy forward pass."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class SimulationDiverged(RuntimeError):
    """State became non-finite during an Euler rollout."""

    def __init__(self, message, step_index=None, path_index=None):
        super().__init__(message)
        self.step_index = step_index
        self.path_index = path_index


class TapeError(RuntimeError):
    """Rollout tape is missing entries required by the reverse pass."""


class ContractError(ValueError):
    """An operation was called in a way its contract forbids."""


class TrainingAborted(RuntimeError):
    """Warm-start training exceeded the tolerated fraction of diverged batches."""


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` holds the offending field path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
