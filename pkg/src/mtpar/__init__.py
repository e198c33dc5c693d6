"""Multi-task parallel training of hierarchical multi-head GNNs on atomistic data."""

__version__ = "0.1.0"


class ContractError(ValueError):
    """Raised when an operation's input contract (shapes, ranges, routing) is violated."""
