"""Joint weak-learner candidates attached to boosted layers.

For a boosted layer ``x_k`` the candidate is

    x_c = sum_{i,j} alpha_ij * BN(op_j(sg(z_i)))

over the eligible inputs ``z_i`` and operations ``op_j``, and ``x_k`` is
rewired to ``x_k + sf(x_c)``. Stop-gradient keeps candidate training from
touching the parent model; stop-forward keeps the prediction unchanged
while handing ``x_c`` exactly the gradient that reaches ``x_k``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .builder import GraphBuilder, resolve_opset
from .graphcore import ComputationGraph, GraphNode, NonFiniteError, OpKind, ParameterStore
from .graphcore.errors import GraphError
from .training import L1Penalty, TrainResult, train

log = logging.getLogger(__name__)

ALPHA_INIT = 1e-3
DEFAULT_LAMBDA = 0.001
DEFAULT_I_MAX = 3


class WeakLearningDiverged(RuntimeError):
    def __init__(self, node_id):
        super().__init__(f"weak learning diverged (non-finite value at node {node_id})")
        self.node_id = node_id


@dataclass(frozen=True)
class InputScope:
    eligible: tuple[int, ...]


@dataclass(frozen=True)
class ShortcutTerm:
    input_node: int
    input_tag: str
    op: str
    weight_key: str
    param_prefix: str
    input_index: int
    op_index: int
    bn_keys: tuple[str, ...] = ()

    @property
    def order(self):
        return (self.input_index, self.op_index)


@dataclass
class CandidateSet:
    target_node: int
    target_tag: str | None
    cell: int | None
    candidate_node: int
    terms: list[ShortcutTerm]
    lambda_: float
    sf_node: int | None  # None in joint mode
    node_ids: list[int] = field(default_factory=list)
    joint: bool = False

    @property
    def alpha_keys(self):
        return [t.weight_key for t in self.terms]

    def alphas(self, params) -> dict[ShortcutTerm, float]:
        return {t: float(params[t.weight_key]) for t in self.terms}

    def to_dict(self):
        return {
            "target_node": self.target_node,
            "target_tag": self.target_tag,
            "cell": self.cell,
            "candidate_node": self.candidate_node,
            "lambda": self.lambda_,
            "sf_node": self.sf_node,
            "node_ids": list(self.node_ids),
            "joint": self.joint,
            "terms": [
                {
                    "input_node": t.input_node,
                    "input_tag": t.input_tag,
                    "op": t.op,
                    "weight_key": t.weight_key,
                    "param_prefix": t.param_prefix,
                    "input_index": t.input_index,
                    "op_index": t.op_index,
                    "bn_keys": list(t.bn_keys),
                }
                for t in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, d):
        terms = [ShortcutTerm(**{**t, "bn_keys": tuple(t.get("bn_keys", ()))}) for t in d["terms"]]
        return cls(d["target_node"], d["target_tag"], d["cell"], d["candidate_node"], terms,
                   d["lambda"], d["sf_node"], list(d["node_ids"]), d.get("joint", False))


def enumerate_inputs(graph: ComputationGraph, x_k, mode="macro") -> InputScope:
    """Layers eligible as shortcut sources for ``x_k``.

    A layer qualifies when it is topologically earlier than ``x_k`` and sits
    in the same cell. Every cell opens with ``in_prev2``/``in_prev1`` layers
    standing for the outputs of the previous two cells, so the cell-local
    rule covers both halves of the scope. Cell and macro search share the
    rule; they differ in how results are tied, not in where inputs come from.
    """
    if mode not in ("cell", "macro"):
        raise ValueError(f"mode must be 'cell' or 'macro', got {mode!r}")
    target = graph.node(x_k)
    pos = graph.position(x_k)
    eligible = []
    for node in graph.nodes[:pos]:
        if node.tag is not None and node.cell == target.cell:
            eligible.append(node.id)
    return InputScope(tuple(eligible))


def default_predicate(graph: ComputationGraph):
    normal = set(graph.normal_cells())
    return lambda n: n.is_out and (n.cell in normal or not graph.cells)


def initialize_candidates(graph: ComputationGraph, params: ParameterStore,
                          is_out: Callable[[GraphNode], bool] | None = None,
                          lambda_=DEFAULT_LAMBDA, opset="toy", mode="macro", joint=False,
                          rng: np.random.Generator | None = None):
    """Attach a joint weak learner in front of every layer ``is_out`` selects.

    Returns ``(graph', params', candidates, penalty)``; the inputs are not
    modified. ``penalty`` is the extra L1 loss accumulated over candidates.
    In joint mode the stop-gradients become zero-initialized scalar gates
    and the stop-forward is dropped, so candidates and model interact.
    """
    opset = resolve_opset(opset)
    graph = graph.copy()
    params = params.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    is_out = is_out if is_out is not None else default_predicate(graph)
    b = GraphBuilder(graph, params, rng)
    candidates: list[CandidateSet] = []
    penalty = L1Penalty()

    targets = [n.id for n in graph.nodes if is_out(n)]
    for x_k in targets:
        target = graph.node(x_k)
        scope = enumerate_inputs(graph, x_k, mode)
        if not scope.eligible:
            warnings.warn(f"no eligible inputs for node {x_k}; skipped", stacklevel=2)
            continue
        before = {n.id for n in graph.nodes}
        terms = []
        with b.inserting_before(x_k):
            branch = []
            for i, z in enumerate(scope.eligible):
                ztag = graph.node(z).tag
                if joint:
                    gate = b.param(f"cand/{x_k}/{ztag}/eta", 0.0)
                    zin = b.add(OpKind.SCALAR_GATE, [z], [gate], cell=target.cell)
                else:
                    zin = b.add(OpKind.STOP_GRADIENT, [z], cell=target.cell)
                for j, op in enumerate(opset):
                    prefix = f"cand/{x_k}/{ztag}.{op}"
                    h = b.named(op, zin, prefix, target.cell)
                    h = b.batch_norm(h, f"{prefix}/bn", target.cell)
                    alpha = b.param(f"{prefix}/alpha", ALPHA_INIT)
                    bn_keys = tuple(f"{prefix}/bn/{s}" for s in ("gamma", "beta", "running_mean", "running_var"))
                    terms.append(ShortcutTerm(z, ztag, op, alpha, prefix, i, j, bn_keys))
                    branch.append(h)
            x_c = b.add(OpKind.WEIGHTED_SUM, branch, [t.weight_key for t in terms], cell=target.cell)
            sf = None if joint else b.add(OpKind.STOP_FORWARD, [x_c], cell=target.cell)
        if target.op_kind is not OpKind.ADD:
            raise GraphError("boosted layers must be add nodes", x_k)
        target.input_ids.append(x_c if joint else sf)
        new_ids = [n.id for n in graph.nodes if n.id not in before]
        cand = CandidateSet(x_k, target.tag, target.cell, x_c, terms, float(lambda_), sf, new_ids, joint)
        candidates.append(cand)
        penalty.add(lambda_, cand.alpha_keys)
    return graph, params, candidates, penalty


def candidate_param_keys(params: ParameterStore, candidates: Sequence[CandidateSet]) -> list[str]:
    prefixes = tuple(f"cand/{c.target_node}/" for c in candidates)
    return [k for k in params if k.startswith(prefixes)]


def weak_learn(graph: ComputationGraph, params: ParameterStore, candidates: Sequence[CandidateSet],
               X, y, epochs=20, lr0=0.05, batch_size=64, rng=None, weight_decay=0.0,
               frozen=(), penalty: L1Penalty | None = None) -> TrainResult:
    """Train the whole augmented network on loss + sum of candidate L1 terms.

    Parent parameters keep training as usual; in isolated mode they see
    exactly the gradients of the un-augmented model.
    """
    if penalty is None:
        penalty = L1Penalty()
        for c in candidates:
            penalty.add(c.lambda_, c.alpha_keys)
    rng = rng if rng is not None else np.random.default_rng(0)
    try:
        return train(graph, params, X, y, epochs, lr0, batch_size, rng, weight_decay, penalty, frozen)
    except NonFiniteError as exc:
        raise WeakLearningDiverged(exc.node_id) from exc


def select_top(alpha, I_max=DEFAULT_I_MAX):
    """The ``I_max`` terms with the largest ``|alpha|``, largest first.

    ``alpha`` is a mapping term -> weight or a plain sequence of weights (in
    which case indices are returned). Ties go to the smallest
    ``(input_index, op_index)``, i.e. the earliest term in enumeration order.
    """
    if I_max < 1:
        raise ValueError("I_max must be at least 1")
    if isinstance(alpha, Mapping):
        items = list(alpha.items())
        order_key = lambda item: (-abs(item[1]), getattr(item[0], "order", item[0]))  # noqa: E731
    else:
        items = list(enumerate(alpha))
        order_key = lambda item: (-abs(item[1]), item[0])  # noqa: E731
    if len(items) < I_max:
        warnings.warn(f"only {len(items)} terms available for I_max={I_max}", stacklevel=2)
    ranked = sorted(items, key=order_key)
    return [term for term, _ in ranked[:I_max]]


def round_report(candidates: Sequence[CandidateSet], params: ParameterStore, I_max=DEFAULT_I_MAX,
                 round_index=0) -> list[dict]:
    """One record per candidate term, flagging the selected ones."""
    records = []
    for c in candidates:
        alphas = c.alphas(params)
        chosen = set(select_top(alphas, I_max))
        for t in c.terms:
            records.append({
                "round": round_index,
                "target_node": c.target_node,
                "cell": c.cell,
                "term": {"input": t.input_tag, "input_node": t.input_node, "op": t.op},
                "alpha": alphas[t],
                "selected": t in chosen,
            })
    return records


def write_report(records, path):
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
