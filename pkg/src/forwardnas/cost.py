"""Test-time cost (multiply-adds per example) and analytic parameter counts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .genotype import Genotype
from .graphcore import ComputationGraph, OpKind, ParameterStore, infer_shapes
from .graphcore.errors import GraphError, ShapeError


def _size(shape):
    return int(math.prod(shape))


def _spatial(shape):
    return _size(shape[1:]) if len(shape) == 3 else 1


def _dense(node, ins, out, pshapes):
    return pshapes[0][0] * pshapes[0][1]


def _conv(node, ins, out, pshapes):
    cout, cin, kh, kw = pshapes[0]
    return kh * kw * cin * cout * _spatial(out)


def _sep(node, ins, out, pshapes):
    c, kh, kw = pshapes[0]
    cout = pshapes[1][1]
    return (kh * kw * c + c * cout) * _spatial(out)


def _proj(node, ins, out, pshapes):
    cin, cout = pshapes[0]
    return cin * cout * _spatial(out)


def _pool(node, ins, out, pshapes):
    k = node.attrs.get("kernel", 3)
    window = k if len(out) == 1 else k * k
    return window * _size(out)


def _elementwise(node, ins, out, pshapes):
    return _size(out)


def _gap(node, ins, out, pshapes):
    return _size(ins[0])


def _wsum(node, ins, out, pshapes):
    return len(ins) * _size(out)


def _default_rules():
    return {
        OpKind.DENSE: _dense,
        OpKind.CONV: _conv,
        OpKind.SEP_CONV: _sep,
        OpKind.DILATED_CONV: _sep,
        OpKind.PROJ_1X1: _proj,
        OpKind.MAX_POOL: _pool,
        OpKind.AVG_POOL: _pool,
        OpKind.BATCH_NORM: _elementwise,
        OpKind.SCALAR_GATE: _elementwise,
        OpKind.GLOBAL_AVG_POOL: _gap,
        OpKind.WEIGHTED_SUM: _wsum,
    }


@dataclass
class CostModel:
    """Per-op multiply-add formulas; kinds without a rule cost nothing."""

    rules: dict[OpKind, Callable] = field(default_factory=_default_rules)

    def node_cost(self, node, in_shapes, out_shape, param_shapes) -> int:
        rule = self.rules.get(node.op_kind)
        return 0 if rule is None else int(rule(node, in_shapes, out_shape, param_shapes))


def live_nodes(graph: ComputationGraph) -> set[int]:
    """Nodes that contribute to the prediction.

    Walks backwards from the output; nothing behind a stop-forward reaches
    the prediction, so candidate branches are not counted.
    """
    if graph.output_id is None:
        raise GraphError("graph has no output node")
    seen, stack = set(), [graph.output_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        node = graph.node(nid)
        if node.op_kind is OpKind.STOP_FORWARD:
            continue
        stack.extend(node.input_ids)
    return seen


def cost(model, cost_model: CostModel | None = None, input_shape=None, params: ParameterStore | None = None,
         live_only=True) -> int:
    """Multiply-adds of one forward example through ``model``.

    ``model`` is a :class:`Genotype` or a graph (then ``params`` supplies the
    parameter shapes). ``input_shape`` overrides the declared input shape.
    With ``live_only=False`` nodes that do not reach the prediction (such as
    candidate branches) are counted too, which measures training compute.
    """
    cost_model = cost_model or CostModel()
    if isinstance(model, Genotype):
        from .growth import build_model

        graph, params = build_model(model)
    else:
        graph = model
        if params is None:
            raise ValueError("a graph needs its parameters to resolve shapes")
    if input_shape is not None:
        graph = graph.copy()
        for n in graph.nodes:
            if n.op_kind is OpKind.PLACEHOLDER and n.attrs.get("source", "inputs") == "inputs":
                n.attrs["shape"] = list(input_shape)
    try:
        shapes = infer_shapes(graph, params)
    except (ShapeError, GraphError) as exc:
        raise ShapeError(getattr(exc, "node_id", None), None, None, f"unresolvable shape: {exc}") from exc
    live = live_nodes(graph) if live_only else {n.id for n in graph.nodes}
    total = 0
    for n in graph.nodes:
        if n.id not in live or n.op_kind is OpKind.PLACEHOLDER:
            continue
        total += cost_model.node_cost(
            n, [shapes[i] for i in n.input_ids], shapes[n.id], [tuple(params[k].shape) for k in n.param_keys]
        )
    return total


# -- parameter counts ------------------------------------------------------------


def _bn(c):
    return 4 * c  # gamma, beta and the two running statistics


def _named_op_params(op, c):
    if op.startswith("sep_conv_"):
        k = int(op[-1])
        return 2 * (c * k * k + c * c + _bn(c))
    if op.startswith("dil_conv_"):
        k = int(op[-1])
        return c * k * k + c * c + _bn(c)
    if op in ("dense_relu", "dense_tanh"):
        return c * c + c
    if op in ("identity", "max_pool_3x3", "avg_pool_3x3", "avg_pool_3"):
        return 0
    raise ValueError(f"unknown operation {op!r}")


def _pattern_params(pattern, c):
    n = 0
    for sc in pattern.shortcuts:
        n += _named_op_params(sc.op, c) + _bn(c)
    k = len(pattern.shortcuts)
    n += k * c * c if pattern.merge == "cp-each" else k
    return n + 1  # the gate


def param_count(genotype: Genotype) -> int:
    """Number of stored scalars of the model ``genotype`` describes.

    Computed from the skeleton and patterns alone, without building a graph;
    includes batch-norm running statistics, merge weights and gates.
    """
    sk = genotype.skeleton
    image = sk.kind == "image"
    cin = sk.input_shape[0]
    f = sk.filters
    total = (9 * cin * f if image else cin * f + f) + _bn(f)
    # (channels, stage) of the previous two cell outputs
    prev2 = prev1 = (f, 0)
    normal = 0
    for stage in range(sk.stages):
        if stage > 0:
            c = prev1[0]
            if image:
                total += 9 * c * 2 * c + _bn(2 * c) + 9 * 4 * c * c + _bn(2 * c)
            else:
                total += (2 * c * c + 2 * c) + _bn(2 * c) + (4 * c * c + 2 * c) + _bn(2 * c)
            total += 2 * c * c + _bn(2 * c)
            prev2, prev1 = prev1, (2 * c, stage)
        for _ in range(sk.n_cells):
            c = prev1[0]
            for p in (prev2, prev1):
                if p != prev1:
                    total += p[0] * c + _bn(c)
            block = (9 * c + c * c) if image else (c * c + c)
            total += 2 * (block + _bn(c))
            for pattern in genotype.cells[normal].patterns:
                total += _pattern_params(pattern, c)
            prev2, prev1 = prev1, (c, stage)
            normal += 1
    return total + prev1[0] * sk.num_classes + sk.num_classes
