"""Exception types raised by the graph core."""

from __future__ import annotations


class GraphError(Exception):
    """Structural problem with a graph or one of its nodes."""

    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


class ShapeError(GraphError):
    def __init__(self, node_id, expected, actual, detail=""):
        msg = f"shape mismatch, expected {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, node_id)
        self.expected = expected
        self.actual = actual


class UnknownOpError(GraphError):
    pass


class NonFiniteError(GraphError):
    """A forward pass produced NaN or inf; ``node_id`` is the first offender."""

    def __init__(self, node_id):
        super().__init__("non-finite value in forward pass", node_id)


class MissingActivationError(GraphError):
    pass


class SerializationError(Exception):
    pass
