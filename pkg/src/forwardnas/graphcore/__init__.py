"""Computation graphs, reverse-mode autodiff and SGD."""

from .engine import Activations, Batch, backward, eval_node, forward, infer_shapes
from .errors import (
    GraphError,
    MissingActivationError,
    NonFiniteError,
    SerializationError,
    ShapeError,
    UnknownOpError,
)
from .graph import CellInfo, ComputationGraph, GraphNode, OpKind, to_dot
from .optim import cosine_lr, sgd_step
from .params import ParameterStore

__all__ = [
    "Activations",
    "Batch",
    "CellInfo",
    "ComputationGraph",
    "GraphError",
    "GraphNode",
    "MissingActivationError",
    "NonFiniteError",
    "OpKind",
    "ParameterStore",
    "SerializationError",
    "ShapeError",
    "UnknownOpError",
    "backward",
    "cosine_lr",
    "eval_node",
    "forward",
    "infer_shapes",
    "sgd_step",
    "to_dot",
]
