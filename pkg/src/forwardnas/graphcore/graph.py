"""Explicit computation graphs kept in topological order."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .errors import GraphError, SerializationError

GRAPH_SCHEMA = "forwardnas.graph/1"


class OpKind(str, Enum):
    DENSE = "dense"
    CONV = "conv"
    SEP_CONV = "sep_conv"
    DILATED_CONV = "dilated_conv"
    MAX_POOL = "max_pool"
    AVG_POOL = "avg_pool"
    IDENTITY = "identity"
    ADD = "add"
    CONCAT = "concat"
    PROJ_1X1 = "proj_1x1"
    BATCH_NORM = "batch_norm"
    RELU = "relu"
    TANH = "tanh"
    STOP_GRADIENT = "stop_gradient"
    STOP_FORWARD = "stop_forward"
    SCALAR_GATE = "scalar_gate"
    WEIGHTED_SUM = "weighted_sum"
    SOFTMAX_XENT = "softmax_xent"
    MSE = "mse"
    # plumbing kinds: batch feeds and the classifier head's spatial reduction
    PLACEHOLDER = "placeholder"
    GLOBAL_AVG_POOL = "global_avg_pool"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            from .errors import UnknownOpError

            raise UnknownOpError(f"unknown op_kind {value!r}") from None


LOSS_KINDS = frozenset({OpKind.SOFTMAX_XENT, OpKind.MSE})


@dataclass
class GraphNode:
    id: int
    op_kind: OpKind
    input_ids: list[int] = field(default_factory=list)
    param_keys: list[str] = field(default_factory=list)
    attrs: dict[str, Any] = field(default_factory=dict)
    is_out: bool = False
    # cell index (None for stem/head) and layer tag (None for op-internal nodes)
    cell: int | None = None
    tag: str | None = None

    def to_dict(self):
        return {
            "id": self.id,
            "op_kind": self.op_kind.value,
            "input_ids": list(self.input_ids),
            "param_keys": list(self.param_keys),
            "attrs": copy.deepcopy(self.attrs),
            "is_out": self.is_out,
            "cell": self.cell,
            "tag": self.tag,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=int(d["id"]),
            op_kind=OpKind.parse(d["op_kind"]),
            input_ids=[int(i) for i in d.get("input_ids", [])],
            param_keys=list(d.get("param_keys", [])),
            attrs=dict(d.get("attrs", {})),
            is_out=bool(d.get("is_out", False)),
            cell=d.get("cell"),
            tag=d.get("tag"),
        )


@dataclass
class CellInfo:
    index: int
    kind: str  # "normal" or "transition"
    stage: int = 0

    def to_dict(self):
        return {"index": self.index, "kind": self.kind, "stage": self.stage}


class ComputationGraph:
    """A DAG whose node list is a valid topological order.

    ``output_id`` is the prediction node and ``loss_id`` the scalar loss.
    Node ids are unique but need not be increasing along the list; nodes
    inserted during growth get fresh ids and land before their consumers.
    """

    def __init__(self, nodes: Iterable[GraphNode] = (), output_id=None, loss_id=None,
                 cells: Iterable[CellInfo] = ()):
        self.nodes: list[GraphNode] = list(nodes)
        self.output_id = output_id
        self.loss_id = loss_id
        self.cells: list[CellInfo] = list(cells)
        self._reindex()

    def _reindex(self):
        self._pos = {}
        for i, n in enumerate(self.nodes):
            if n.id in self._pos:
                raise GraphError("duplicate node id", n.id)
            self._pos[n.id] = i

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node_id):
        return node_id in self._pos

    def node(self, node_id) -> GraphNode:
        try:
            return self.nodes[self._pos[node_id]]
        except KeyError:
            raise GraphError("node not found", node_id) from None

    def position(self, node_id) -> int:
        try:
            return self._pos[node_id]
        except KeyError:
            raise GraphError("node not found", node_id) from None

    def next_id(self) -> int:
        return max(self._pos, default=-1) + 1

    def append(self, node: GraphNode) -> int:
        if node.id in self._pos:
            raise GraphError("duplicate node id", node.id)
        self.nodes.append(node)
        self._pos[node.id] = len(self.nodes) - 1
        return node.id

    def insert_before(self, anchor_id, new_nodes: list[GraphNode]):
        at = self.position(anchor_id)
        self.nodes[at:at] = new_nodes
        self._reindex()

    def remove(self, node_ids):
        drop = set(node_ids)
        self.nodes = [n for n in self.nodes if n.id not in drop]
        self._reindex()

    def consumers(self, node_id) -> list[int]:
        return [n.id for n in self.nodes if node_id in n.input_ids]

    def param_keys(self) -> list[str]:
        seen = {}
        for n in self.nodes:
            for k in n.param_keys:
                seen.setdefault(k, None)
        return list(seen)

    def cell_nodes(self, cell) -> list[GraphNode]:
        return [n for n in self.nodes if n.cell == cell]

    def cell_info(self, cell) -> CellInfo:
        for c in self.cells:
            if c.index == cell:
                return c
        raise GraphError(f"cell {cell} not found")

    def normal_cells(self) -> list[int]:
        return [c.index for c in self.cells if c.kind == "normal"]

    def layer(self, cell, tag) -> GraphNode:
        for n in self.nodes:
            if n.cell == cell and n.tag == tag:
                return n
        raise GraphError(f"layer {tag!r} not found in cell {cell}")

    def validate(self):
        seen = set()
        for n in self.nodes:
            for i in n.input_ids:
                if i not in seen:
                    raise GraphError(f"input {i} is not topologically earlier", n.id)
            seen.add(n.id)
        for ref in (self.output_id, self.loss_id):
            if ref is not None and ref not in self._pos:
                raise GraphError("dangling output/loss reference", ref)
        return self

    def copy(self) -> "ComputationGraph":
        return ComputationGraph(
            [GraphNode.from_dict(n.to_dict()) for n in self.nodes],
            self.output_id,
            self.loss_id,
            [CellInfo(**c.to_dict()) for c in self.cells],
        )

    # -- serialization -------------------------------------------------

    def to_dict(self):
        return {
            "schema": GRAPH_SCHEMA,
            "output_id": self.output_id,
            "loss_id": self.loss_id,
            "cells": [c.to_dict() for c in self.cells],
            "nodes": [n.to_dict() for n in self.nodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != GRAPH_SCHEMA:
            raise SerializationError(f"unsupported graph schema {d.get('schema')!r}")
        g = cls(
            [GraphNode.from_dict(n) for n in d["nodes"]],
            d.get("output_id"),
            d.get("loss_id"),
            [CellInfo(**c) for c in d.get("cells", [])],
        )
        return g.validate()

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def to_dot(graph: ComputationGraph, name="graph") -> str:
    """Render a graph in Graphviz DOT, clustering nodes by cell."""
    lines = [f"digraph {json.dumps(name)} {{", "  rankdir=TB;", "  node [shape=box, fontsize=10];"]
    by_cell: dict[Any, list[GraphNode]] = {}
    for n in graph.nodes:
        by_cell.setdefault(n.cell, []).append(n)

    def label(n):
        text = f"{n.id}: {n.op_kind.value}"
        if n.tag:
            text += f"\\n[{n.tag}]"
        return text

    for cell, members in by_cell.items():
        indent = "  "
        if cell is not None:
            lines.append(f"  subgraph cluster_{cell} {{")
            lines.append(f"    label=\"cell {cell}\";")
            indent = "    "
        for n in members:
            style = ", style=bold" if n.is_out else ""
            if n.op_kind in (OpKind.STOP_GRADIENT, OpKind.STOP_FORWARD):
                style += ", color=red"
            lines.append(f"{indent}n{n.id} [label=\"{label(n)}\"{style}];")
        if cell is not None:
            lines.append("  }")
    for n in graph.nodes:
        for i in n.input_ids:
            lines.append(f"  n{i} -> n{n.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"
