"""Seed models, finalized weak learners, and cell/macro tying.

Every graph is built from a :class:`Genotype`: a fixed skeleton (stem,
normal and transition cells, classifier head) plus, per normal cell, the
list of patterns grown so far. A pattern is inserted in front of its
target layer as ``eta * merge(BN(op(z)) ...)`` with ``eta`` starting at 0,
so adding a pattern never changes what the model predicts.
"""

from __future__ import annotations

import hashlib
import json
from typing import Sequence

import numpy as np

from .builder import GraphBuilder
from .genotype import MERGE_VARIANTS, CellDescriptor, Genotype, Pattern, Shortcut, Skeleton
from .graphcore import CellInfo, ComputationGraph, OpKind, ParameterStore
from .graphcore.errors import GraphError
from .weaklearn import DEFAULT_I_MAX, CandidateSet, select_top


# -- skeleton --------------------------------------------------------------


def _seed_block(b: GraphBuilder, x, prefix, cell, kind, tag):
    """ReLU -> (dense | 3x3 separable conv) -> BN."""
    h = b.unary(OpKind.RELU, x, cell)
    if kind == "toy":
        h = b.dense(h, b.channels(x), f"{prefix}/dense", cell)
    else:
        h = b.sep_conv(h, 3, f"{prefix}/sep", cell=cell)
    return b.batch_norm(h, f"{prefix}/bn", cell, tag=tag)


def _preprocess(b: GraphBuilder, src, shape, prefix, cell, tag):
    """Bring a previous cell's output to this cell's shape."""
    if b.shapes[src] == shape:
        return b.unary(OpKind.IDENTITY, src, cell, tag=tag)
    h = b.unary(OpKind.RELU, src, cell)
    if len(shape) == 3 and b.shapes[src][1:] != shape[1:]:
        h = b.unary(OpKind.AVG_POOL, h, cell, attrs={"kernel": 3, "stride": 2})
    h = b.proj(h, shape[0], f"{prefix}/proj", cell)
    return b.batch_norm(h, f"{prefix}/bn", cell, tag=tag)


def _transition(b: GraphBuilder, prev, cell, kind):
    """Default reduction cell: doubles channels (and halves H, W for images)."""
    c = b.channels(prev)
    p1 = b.unary(OpKind.IDENTITY, prev, cell, tag="in_prev1")
    h = b.unary(OpKind.RELU, p1, cell)
    if kind == "toy":
        h = b.dense(h, 2 * c, f"c{cell}/main1", cell)
        h = b.batch_norm(h, f"c{cell}/main1/bn", cell)
        h = b.unary(OpKind.RELU, h, cell)
        h = b.dense(h, 2 * c, f"c{cell}/main2", cell)
        h = b.batch_norm(h, f"c{cell}/main2/bn", cell, tag="s1")
        s = b.proj(p1, 2 * c, f"c{cell}/short", cell)
    else:
        h = b.conv(h, 2 * c, 3, f"c{cell}/main1", stride=2, cell=cell)
        h = b.batch_norm(h, f"c{cell}/main1/bn", cell)
        h = b.unary(OpKind.RELU, h, cell)
        h = b.conv(h, 2 * c, 3, f"c{cell}/main2", cell=cell)
        h = b.batch_norm(h, f"c{cell}/main2/bn", cell, tag="s1")
        s = b.unary(OpKind.AVG_POOL, p1, cell, attrs={"kernel": 3, "stride": 2})
        s = b.proj(s, 2 * c, f"c{cell}/short", cell)
    s = b.batch_norm(s, f"c{cell}/short/bn", cell, tag="s0")
    return b.add(OpKind.ADD, [s, h], cell=cell, tag="out", is_out=True)


def _normal_cell(b: GraphBuilder, prev2, prev1, cell, kind, patterns: Sequence[Pattern]):
    shape = b.shapes[prev1]
    p2 = _preprocess(b, prev2, shape, f"c{cell}/pre2", cell, "in_prev2")
    p1 = _preprocess(b, prev1, shape, f"c{cell}/pre1", cell, "in_prev1")
    s1 = _seed_block(b, p1, f"c{cell}/s1", cell, kind, "s1")
    s2 = _seed_block(b, s1, f"c{cell}/s2", cell, kind, "s2")
    out = b.add(OpKind.ADD, [p1, s2], cell=cell, tag="out", is_out=True)
    for pattern in patterns:
        add_pattern(b, cell, pattern)
    return out


def normal_cell_indices(skeleton: Skeleton) -> list[int]:
    """Graph cell index of each normal cell, in order."""
    out, cell = [], 0
    for stage in range(skeleton.stages):
        if stage > 0:
            cell += 1
        for _ in range(skeleton.n_cells):
            out.append(cell)
            cell += 1
    return out


def build_model(genotype: Genotype, seed=0, preset=None):
    """Instantiate ``genotype`` as a graph with freshly initialized parameters.

    ``preset`` maps parameter keys to values used instead of random draws.
    """
    sk = genotype.skeleton
    rng = np.random.default_rng(seed)
    b = GraphBuilder(rng=rng)
    if preset:
        b.preset.update(preset)
    x = b.add(OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": list(sk.input_shape)})
    t = b.add(OpKind.PLACEHOLDER, attrs={"source": "targets", "shape": []})
    if sk.kind == "toy":
        h = b.dense(x, sk.filters, "stem/dense")
    else:
        h = b.conv(x, sk.filters, 3, "stem/conv")
    stem = b.batch_norm(h, "stem/bn")

    cells = []
    prev2 = prev1 = stem
    cell = 0
    normal = 0
    for stage in range(sk.stages):
        if stage > 0:
            out = _transition(b, prev1, cell, sk.kind)
            cells.append(CellInfo(cell, "transition", stage))
            prev2, prev1 = prev1, out
            cell += 1
        for _ in range(sk.n_cells):
            out = _normal_cell(b, prev2, prev1, cell, sk.kind, genotype.cells[normal].patterns)
            cells.append(CellInfo(cell, "normal", stage))
            prev2, prev1 = prev1, out
            cell += 1
            normal += 1

    h = b.unary(OpKind.RELU, prev1)
    if sk.kind == "image":
        h = b.unary(OpKind.GLOBAL_AVG_POOL, h)
    logits = b.dense(h, sk.num_classes, "head/dense")
    loss = b.add(OpKind.SOFTMAX_XENT, [logits, t])
    graph = b.graph
    graph.output_id = logits
    graph.loss_id = loss
    graph.cells = cells
    return graph.validate(), b.params


def seed_model(skeleton: Skeleton, mode="macro", merge="cp-each", seed=0):
    """``(graph, params, genotype)`` of the un-grown seed architecture."""
    genotype = Genotype(skeleton, mode, merge)
    graph, params = build_model(genotype, seed)
    return graph, params, genotype


# -- patterns ----------------------------------------------------------------


def pattern_prefix(cell, pattern_name, source, op):
    return f"c{cell}/{pattern_name}/{source}.{op}"


def add_pattern(b: GraphBuilder, cell, pattern: Pattern) -> int:
    """Insert ``pattern`` in front of its target layer; returns the gate node.

    Uses ``b.preset`` for warm-started values; anything else is drawn fresh.
    """
    if pattern.merge not in MERGE_VARIANTS:
        raise ValueError(f"unknown merge variant {pattern.merge!r}")
    graph = b.graph
    target = graph.layer(cell, pattern.target)
    if target.op_kind is not OpKind.ADD:
        raise GraphError("pattern target must be an add node", target.id)
    sources = []
    for sc in pattern.shortcuts:
        try:
            sources.append(graph.layer(cell, sc.source).id)
        except GraphError:
            raise GraphError(f"pattern {pattern.name} references layer {sc.source!r} absent from cell {cell}") from None
    if any(n.cell == cell and n.tag == pattern.name for n in graph.nodes):
        raise GraphError(f"cell {cell} already has a layer named {pattern.name!r}")
    with b.inserting_before(target.id):
        outs = []
        for src, sc in zip(sources, pattern.shortcuts):
            prefix = pattern_prefix(cell, pattern.name, sc.source, sc.op)
            h = b.named(sc.op, src, prefix, cell)
            outs.append(b.batch_norm(h, f"{prefix}/bn", cell))
        base = f"c{cell}/{pattern.name}"
        if pattern.merge == "cp-each":
            m = b.add(OpKind.CONCAT, outs, cell=cell)
            m = b.proj(m, b.channels(target.id), f"{base}/proj", cell)
        else:
            keys = [b.param(f"{pattern_prefix(cell, pattern.name, sc.source, sc.op)}/alpha", sc.weight)
                    for sc in pattern.shortcuts]
            m = b.add(OpKind.WEIGHTED_SUM, outs, keys, cell=cell)
        eta = b.param(f"{base}/eta", 0.0)
        gate = b.add(OpKind.SCALAR_GATE, [m], [eta], attrs={"pattern": pattern.to_dict()}, cell=cell,
                     tag=pattern.name)
    target.input_ids.append(gate)
    return gate


def genotype_from_graph(graph: ComputationGraph, skeleton: Skeleton, mode, merge) -> Genotype:
    """Recover the grown patterns from the gate nodes of a built graph."""
    cells = []
    for cell in graph.normal_cells():
        patterns = []
        for n in graph.cell_nodes(cell):
            if n.op_kind is OpKind.SCALAR_GATE and "pattern" in n.attrs:
                p = Pattern.from_dict(n.attrs["pattern"])
                merge_node = graph.node(n.input_ids[0])
                branch = merge_node.input_ids
                if merge_node.op_kind is OpKind.PROJ_1X1:
                    branch = graph.node(merge_node.input_ids[0]).input_ids
                if len(branch) != len(p.shortcuts):
                    raise GraphError(f"pattern {p.name} wiring does not match its descriptor", n.id)
                patterns.append(p)
        cells.append(CellDescriptor(patterns))
    return Genotype(skeleton, mode, merge, cells)


def cell_signature(graph: ComputationGraph, cell) -> str:
    """Hash of a cell body's structure, independent of node ids and cell index.

    The body is everything after the ``in_prev1`` layer; the shape adapters
    in front of it depend on where the cell sits, not on what was grown.
    Edges into the body are written as the tag of their source, internal
    edges as positions, and parameter keys drop their ``c<cell>/`` prefix.
    """
    nodes = graph.cell_nodes(cell)
    start = next((i + 1 for i, n in enumerate(nodes) if n.tag == "in_prev1"), 0)
    body = nodes[start:]
    local = {n.id: i for i, n in enumerate(body)}
    tags = {n.id: n.tag for n in nodes}
    prefix = f"c{cell}/"
    rows = []
    for n in body:
        attrs = {k: v for k, v in n.attrs.items() if k != "pattern"}
        if "pattern" in n.attrs:
            p = dict(n.attrs["pattern"])
            p["shortcuts"] = [{"source": s["source"], "op": s["op"]} for s in p["shortcuts"]]
            attrs["pattern"] = p
        rows.append([
            n.op_kind.value,
            [local[i] if i in local else f"ext:{tags.get(i)}" for i in n.input_ids],
            [k[len(prefix):] if k.startswith(prefix) else k for k in n.param_keys],
            attrs,
            n.is_out,
            n.tag,
        ])
    blob = json.dumps(rows, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# -- finalization --------------------------------------------------------------


def pattern_from_candidate(cand: CandidateSet, alphas, I_max, merge, name) -> Pattern:
    chosen = select_top(alphas, I_max)
    return Pattern(
        target=cand.target_tag,
        name=name,
        shortcuts=[Shortcut(t.input_tag, t.op, float(alphas[t])) for t in chosen],
        merge="ws" if merge in ("ws", "cp-end") else "cp-each",
    )


def _next_pattern_name(graph, cell):
    used = {n.tag for n in graph.cell_nodes(cell)}
    k = 1
    while f"g{k}" in used:
        k += 1
    return f"g{k}"


def strip_candidates(graph: ComputationGraph, params: ParameterStore, candidates: Sequence[CandidateSet]):
    """Remove candidate nodes and parameters, restoring the parent structure."""
    graph = graph.copy()
    params = params.copy()
    for c in candidates:
        target = graph.node(c.target_node)
        hook = c.candidate_node if c.joint else c.sf_node
        target.input_ids = [i for i in target.input_ids if i != hook]
        graph.remove(c.node_ids)
    prefixes = tuple(f"cand/{c.target_node}/" for c in candidates)
    for k in [k for k in params if k.startswith(prefixes)]:
        del params[k]
    return graph.validate(), params


def finalize_candidates(graph: ComputationGraph, params: ParameterStore, candidates: Sequence[CandidateSet],
                        alpha=None, I_max=DEFAULT_I_MAX, merge_variant="cp-each", rng=None):
    """Replace each candidate by its top-``I_max`` shortcuts behind a zero gate.

    ``alpha`` maps each candidate's terms to weights; by default the trained
    values in ``params`` are used. Selected op and batch-norm parameters are
    warm-started from weak learning, projections start fresh. Returns
    ``(graph'', params'', patterns)`` with ``patterns`` mapping cell index to
    the pattern added there.
    """
    if merge_variant not in MERGE_VARIANTS:
        raise ValueError(f"unknown merge variant {merge_variant!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    plans = []
    for c in candidates:
        alphas = c.alphas(params) if alpha is None else alpha[c.target_node]
        missing = [t for t in c.terms if t not in alphas]
        if missing:
            raise KeyError(f"alpha missing for {len(missing)} terms of candidate at node {c.target_node}")
        plans.append((c, alphas))

    base, new_params = strip_candidates(graph, params, candidates)
    b = GraphBuilder(base, new_params, rng)
    patterns = {}
    for c, alphas in plans:
        name = _next_pattern_name(base, c.cell)
        pattern = pattern_from_candidate(c, alphas, I_max, merge_variant, name)
        by_term = {(t.input_tag, t.op): t for t in c.terms}
        for sc in pattern.shortcuts:
            term = by_term[(sc.source, sc.op)]
            new_prefix = pattern_prefix(c.cell, name, sc.source, sc.op)
            for k, v in params.items():
                if k.startswith(term.param_prefix + "/") and not k.endswith("/alpha"):
                    b.preset[new_prefix + k[len(term.param_prefix):]] = v
        add_pattern(b, c.cell, pattern)
        patterns[c.cell] = pattern
    return b.graph.validate(), b.params, patterns


# -- tying -------------------------------------------------------------------


def apply_tying(genotype: Genotype, pattern: Pattern, mode, cell_position) -> Genotype:
    """Add a finalized pattern to the genotype.

    ``cell_position`` indexes the normal cell the pattern was discovered in.
    Cell mode appends it to every normal cell's descriptor; macro mode only
    to the discovered cell.
    """
    g = genotype.copy()
    if mode == "cell":
        ref = g.cells[cell_position]
        for i, c in enumerate(g.cells):
            if [p.to_dict() for p in c.patterns] != [p.to_dict() for p in ref.patterns]:
                raise GraphError(f"cell descriptors diverged at normal cell {i}")
        for c in g.cells:
            c.patterns.append(Pattern.from_dict(pattern.to_dict()))
    elif mode == "macro":
        g.cells[cell_position].patterns.append(Pattern.from_dict(pattern.to_dict()))
    else:
        raise ValueError(f"mode must be 'cell' or 'macro', got {mode!r}")
    return g


def replicate_pattern(graph: ComputationGraph, params: ParameterStore, pattern: Pattern, cells, seed=0):
    """Instantiate ``pattern`` with fresh parameters in each of ``cells``."""
    graph = graph.copy()
    params = params.copy()
    b = GraphBuilder(graph, params, np.random.default_rng(seed))
    for cell in cells:
        add_pattern(b, cell, Pattern.from_dict(pattern.to_dict()))
    return b.graph.validate(), b.params
