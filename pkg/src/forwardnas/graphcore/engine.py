"""Forward evaluation and reverse-mode differentiation over a graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, MissingActivationError, NonFiniteError, ShapeError
from .graph import ComputationGraph, GraphNode, OpKind
from .ops import RULES
from .params import ParameterStore


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None  # None: prediction only, loss nodes skipped

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.targets is None:
            return
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[:1] != self.targets.shape[:1]:
            raise ValueError(f"inputs and targets disagree on batch size: "
                             f"{self.inputs.shape[:1]} vs {self.targets.shape[:1]}")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


class Activations(dict):
    """Node id -> forward value, plus what backward needs from the pass."""

    def __init__(self, mode):
        super().__init__()
        self.mode = mode
        self.caches: dict[int, object] = {}
        self.stat_updates: dict[str, np.ndarray] = {}
        self.loss: float | None = None


def _check_arity(node: GraphNode, n_inputs: int):
    rule = RULES[node.op_kind]
    if rule.arity is None:
        if n_inputs < 1:
            raise GraphError(f"{node.op_kind.value} needs at least one input", node.id)
    elif n_inputs != rule.arity:
        raise GraphError(f"{node.op_kind.value} takes {rule.arity} inputs, got {n_inputs}", node.id)


def _run_forward(node: GraphNode, inputs, params: ParameterStore, mode):
    if node.op_kind not in RULES:
        raise GraphError(f"unknown op_kind {node.op_kind!r}", node.id)
    _check_arity(node, len(inputs))
    try:
        ps = [params[k] for k in node.param_keys]
    except KeyError as exc:
        raise GraphError(f"missing parameter {exc.args[0]!r}", node.id) from None
    try:
        return RULES[node.op_kind].forward(inputs, ps, node.attrs, mode)
    except ShapeError as exc:
        raise ShapeError(node.id, exc.expected, exc.actual) from None
    except ValueError as exc:
        shapes = [tuple(x.shape) for x in inputs]
        raise ShapeError(node.id, [tuple(p.shape) for p in ps], shapes, str(exc)) from None


def eval_node(node: GraphNode, inputs, params: ParameterStore, mode="train") -> np.ndarray:
    """Forward value of a single node given its input values."""
    out, _, _ = _run_forward(node, [np.asarray(x, dtype=np.float64) for x in inputs], params, mode)
    return out


def forward(graph: ComputationGraph, params: ParameterStore, batch: Batch, mode="train"):
    """Evaluate every node in order; returns ``(activations, loss)``.

    ``loss`` is None when the graph has no loss node. Batch-norm running
    statistics are not written back; they are collected in
    ``activations.stat_updates`` for the caller to apply.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    acts = Activations(mode)
    skipped = set()
    for node in graph.nodes:
        if node.op_kind is OpKind.PLACEHOLDER:
            src = node.attrs.get("source", "inputs")
            if src != "inputs" and batch.targets is None:
                skipped.add(node.id)
                continue
            acts[node.id] = batch.inputs if src == "inputs" else batch.targets
            continue
        if skipped and any(i in skipped for i in node.input_ids):
            skipped.add(node.id)
            continue
        try:
            inputs = [acts[i] for i in node.input_ids]
        except KeyError as exc:
            raise MissingActivationError(f"input {exc.args[0]} not evaluated", node.id) from None
        out, cache, stats = _run_forward(node, inputs, params, mode)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(node.id)
        acts[node.id] = out
        acts.caches[node.id] = cache
        if stats:
            for slot, value in stats.items():
                acts.stat_updates[node.param_keys[slot]] = value
    if graph.loss_id is not None and graph.loss_id not in skipped:
        acts.loss = float(acts[graph.loss_id])
    return acts, acts.loss


def backward(graph: ComputationGraph, params: ParameterStore, activations: Activations,
             seed=None, node_grads=False):
    """Reverse-mode gradients for every trainable parameter the graph uses.

    ``seed`` maps node id -> upstream gradient; by default it is 1 at the
    loss node. Keys that receive no signal get zero gradients. With
    ``node_grads=True`` the per-node gradients are returned as well.
    """
    if seed is None:
        if graph.loss_id is None:
            raise GraphError("graph has no loss node and no seed gradient was given")
        seed = {graph.loss_id: np.array(1.0)}
    grads_at: dict[int, np.ndarray] = {}
    for nid, g in seed.items():
        if nid not in activations:
            raise MissingActivationError("seed node has no activation", nid)
        grads_at[nid] = np.asarray(g, dtype=np.float64)

    pgrads: dict[str, np.ndarray] = {}
    last = max(graph.position(n) for n in grads_at)
    for node in reversed(graph.nodes[: last + 1]):
        dout = grads_at.get(node.id)
        if dout is None or node.op_kind is OpKind.PLACEHOLDER:
            continue
        if node.id not in activations:
            raise MissingActivationError("gradient requested for missing activation", node.id)
        inputs = []
        for i in node.input_ids:
            if i not in activations:
                raise MissingActivationError("gradient requested for missing activation", i)
            inputs.append(activations[i])
        ps = [params[k] for k in node.param_keys]
        dins, dps = RULES[node.op_kind].backward(dout, inputs, ps, node.attrs, activations.caches.get(node.id))
        for i, d in zip(node.input_ids, dins):
            if d is None:
                continue
            grads_at[i] = grads_at[i] + d if i in grads_at else d
        for k, d in zip(node.param_keys, dps):
            if d is None or not params.trainable(k):
                continue
            pgrads[k] = pgrads[k] + d if k in pgrads else d

    for k in graph.param_keys():
        if params.trainable(k) and k not in pgrads:
            pgrads[k] = np.zeros_like(params[k])
    pgrads = {k: np.asarray(v, dtype=np.float64).reshape(params[k].shape) for k, v in pgrads.items()}
    if node_grads:
        return pgrads, grads_at
    return pgrads


def infer_shapes(graph: ComputationGraph, params: ParameterStore) -> dict[int, tuple]:
    """Per-example output shape of every node (batch axis excluded).

    Placeholders carry their per-example shape in ``attrs["shape"]``.
    """
    shapes: dict[int, tuple] = {}
    for node in graph.nodes:
        if node.op_kind is OpKind.PLACEHOLDER:
            if "shape" not in node.attrs:
                raise GraphError("placeholder without a declared shape", node.id)
            shapes[node.id] = tuple(node.attrs["shape"])
            continue
        _check_arity(node, len(node.input_ids))
        ins = [shapes[i] for i in node.input_ids]
        try:
            pshapes = [tuple(params[k].shape) for k in node.param_keys]
        except KeyError as exc:
            raise GraphError(f"missing parameter {exc.args[0]!r}", node.id) from None
        try:
            shapes[node.id] = tuple(RULES[node.op_kind].shape(ins, pshapes, node.attrs))
        except ShapeError as exc:
            raise ShapeError(node.id, exc.expected, exc.actual) from None
    return shapes
