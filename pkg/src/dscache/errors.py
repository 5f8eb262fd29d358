class ConfigurationError(ValueError):
    """Invalid shapes, budgets or scenario settings."""


class ContractViolation(RuntimeError):
    """A caller broke an operation's precondition (ranges, storage modes)."""


class PositionOverflowError(RuntimeError):
    """A RoPE position went past the configured ``max_position`` guard."""
