"""Incremental graph construction and the named shortcut operations.

Named ops ("sep_conv_3x3", "dense_relu", ...) expand into several
primitive nodes. All of them preserve the per-example shape of their
input, which is what lets any eligible layer feed any op in a cell.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .graphcore import ComputationGraph, GraphNode, OpKind, ParameterStore, infer_shapes
from .graphcore.errors import GraphError
from .graphcore.ops import RULES

IMAGE_OPSET = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
)
TOY_OPSET = ("dense_relu", "dense_tanh", "identity", "avg_pool_3")
LINEAR_OPSET = ("identity",)

OPSETS = {"image": IMAGE_OPSET, "toy": TOY_OPSET, "linear": LINEAR_OPSET}


def resolve_opset(opset):
    if isinstance(opset, str):
        try:
            opset = OPSETS[opset]
        except KeyError:
            raise ValueError(f"unknown opset {opset!r}; choose from {sorted(OPSETS)}") from None
    opset = tuple(opset)
    if not opset:
        raise ValueError("opset is empty")
    for name in opset:
        if name not in NAMED_OPS:
            raise ValueError(f"unknown operation {name!r}")
    return opset


def fan_in_uniform(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GraphBuilder:
    """Appends (or inserts) nodes while tracking per-example shapes."""

    def __init__(self, graph: ComputationGraph | None = None, params: ParameterStore | None = None,
                 rng: np.random.Generator | None = None):
        self.graph = graph if graph is not None else ComputationGraph()
        self.params = params if params is not None else ParameterStore()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.shapes = infer_shapes(self.graph, self.params) if len(self.graph) else {}
        self._next_id = self.graph.next_id()
        self._pending: list[GraphNode] | None = None
        # warm-start values consulted before random initialization
        self.preset: dict[str, np.ndarray] = {}

    @contextlib.contextmanager
    def inserting_before(self, anchor_id):
        """Collect new nodes and splice them in right before ``anchor_id``."""
        if self._pending is not None:
            raise GraphError("nested insertion is not supported")
        self._pending = []
        try:
            yield
            self.graph.insert_before(anchor_id, self._pending)
        finally:
            self._pending = None

    def param(self, key, init):
        """Register a parameter unless it already exists; returns the key."""
        if key in self.params:
            return key
        if key in self.preset:
            value = np.asarray(self.preset[key], dtype=np.float64)
            if value.shape != np.shape(init):
                raise GraphError(f"warm-start value for {key!r} has shape {value.shape}, expected {np.shape(init)}")
            self.params[key] = value
        else:
            self.params[key] = init
        return key

    def add(self, kind, inputs=(), param_keys=(), attrs=None, cell=None, tag=None, is_out=False) -> int:
        node = GraphNode(
            id=self._next_id,
            op_kind=OpKind(kind),
            input_ids=list(inputs),
            param_keys=list(param_keys),
            attrs=dict(attrs or {}),
            is_out=is_out,
            cell=cell,
            tag=tag,
        )
        self._next_id += 1
        if node.op_kind is OpKind.PLACEHOLDER:
            self.shapes[node.id] = tuple(node.attrs["shape"])
        else:
            ins = [self.shapes[i] for i in node.input_ids]
            pshapes = [tuple(self.params[k].shape) for k in node.param_keys]
            self.shapes[node.id] = tuple(RULES[node.op_kind].shape(ins, pshapes, node.attrs))
        if self._pending is not None:
            self._pending.append(node)
        else:
            self.graph.append(node)
        return node.id

    # -- primitive helpers ------------------------------------------------

    def channels(self, node_id) -> int:
        return self.shapes[node_id][0]

    def dense(self, x, out_dim, prefix, cell=None, bias=True, tag=None):
        d = self.channels(x)
        keys = [self.param(f"{prefix}/W", fan_in_uniform(self.rng, (d, out_dim), d))]
        if bias:
            keys.append(self.param(f"{prefix}/b", np.zeros(out_dim)))
        return self.add(OpKind.DENSE, [x], keys, cell=cell, tag=tag)

    def proj(self, x, out_dim, prefix, cell=None, tag=None):
        c = self.channels(x)
        key = self.param(f"{prefix}/W", fan_in_uniform(self.rng, (c, out_dim), c))
        return self.add(OpKind.PROJ_1X1, [x], [key], cell=cell, tag=tag)

    def conv(self, x, out_ch, k, prefix, stride=1, cell=None, tag=None):
        c = self.channels(x)
        key = self.param(f"{prefix}/W", fan_in_uniform(self.rng, (out_ch, c, k, k), c * k * k))
        return self.add(OpKind.CONV, [x], [key], {"kernel": k, "stride": stride}, cell=cell, tag=tag)

    def sep_conv(self, x, k, prefix, dilation=1, stride=1, out_ch=None, cell=None):
        c = self.channels(x)
        out_ch = c if out_ch is None else out_ch
        dw = self.param(f"{prefix}/dw", fan_in_uniform(self.rng, (c, k, k), k * k))
        pw = self.param(f"{prefix}/pw", fan_in_uniform(self.rng, (c, out_ch), c))
        kind = OpKind.DILATED_CONV if dilation > 1 else OpKind.SEP_CONV
        attrs = {"kernel": k, "stride": stride, "dilation": dilation}
        return self.add(kind, [x], [dw, pw], attrs, cell=cell)

    def batch_norm(self, x, prefix, cell=None, tag=None):
        c = self.channels(x)
        keys = [
            self.param(f"{prefix}/gamma", np.ones(c)),
            self.param(f"{prefix}/beta", np.zeros(c)),
            self.param(f"{prefix}/running_mean", np.zeros(c)),
            self.param(f"{prefix}/running_var", np.ones(c)),
        ]
        return self.add(OpKind.BATCH_NORM, [x], keys, cell=cell, tag=tag)

    def unary(self, kind, x, cell=None, tag=None, attrs=None):
        return self.add(kind, [x], attrs=attrs, cell=cell, tag=tag)

    def named(self, name, x, prefix, cell=None):
        """Expand a named op onto ``x``; returns the output node id."""
        try:
            fn = NAMED_OPS[name]
        except KeyError:
            raise ValueError(f"unknown operation {name!r}") from None
        return fn(self, x, prefix, cell)


# -- named ops ------------------------------------------------------------


def _sep_conv_op(k):
    def build(b, x, prefix, cell):
        h = b.unary(OpKind.RELU, x, cell)
        h = b.sep_conv(h, k, f"{prefix}/sep1", cell=cell)
        h = b.batch_norm(h, f"{prefix}/bn1", cell)
        h = b.unary(OpKind.RELU, h, cell)
        h = b.sep_conv(h, k, f"{prefix}/sep2", cell=cell)
        return b.batch_norm(h, f"{prefix}/bn2", cell)

    return build


def _dil_conv_op(k):
    def build(b, x, prefix, cell):
        h = b.unary(OpKind.RELU, x, cell)
        h = b.sep_conv(h, k, f"{prefix}/dil", dilation=2, cell=cell)
        return b.batch_norm(h, f"{prefix}/bn1", cell)

    return build


def _pool_op(kind, k):
    def build(b, x, prefix, cell):
        return b.unary(kind, x, cell, attrs={"kernel": k, "stride": 1})

    return build


def _dense_act_op(act):
    def build(b, x, prefix, cell):
        h = b.dense(x, b.channels(x), f"{prefix}/dense", cell)
        return b.unary(act, h, cell)

    return build


def _identity_op(b, x, prefix, cell):
    return b.unary(OpKind.IDENTITY, x, cell)


NAMED_OPS = {
    "sep_conv_3x3": _sep_conv_op(3),
    "sep_conv_5x5": _sep_conv_op(5),
    "dil_conv_3x3": _dil_conv_op(3),
    "dil_conv_5x5": _dil_conv_op(5),
    "max_pool_3x3": _pool_op(OpKind.MAX_POOL, 3),
    "avg_pool_3x3": _pool_op(OpKind.AVG_POOL, 3),
    "avg_pool_3": _pool_op(OpKind.AVG_POOL, 3),
    "dense_relu": _dense_act_op(OpKind.RELU),
    "dense_tanh": _dense_act_op(OpKind.TANH),
    "identity": _identity_op,
}
