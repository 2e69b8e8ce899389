import json
import os

import numpy as np
import pytest

from forwardnas.builder import GraphBuilder
from forwardnas.cost import CostModel, cost, live_nodes, param_count
from forwardnas.genotype import Skeleton
from forwardnas.graphcore import OpKind
from forwardnas.graphcore.errors import ShapeError
from forwardnas.growth import seed_model
from forwardnas.weaklearn import initialize_candidates

FROZEN = json.load(open(os.path.join(os.path.dirname(__file__), "oracles", "frozen.json")))


def single(kind_fn, shape):
    b = GraphBuilder(rng=np.random.default_rng(0))
    x = b.add(OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": list(shape)})
    out = kind_fn(b, x)
    b.graph.output_id = out
    return b.graph, b.params


def test_dense_cost():
    g, p = single(lambda b, x: b.dense(x, 3, "d"), (4,))
    assert cost(g, params=p) == FROZEN["cost"]["dense_4_3"] == 12


def test_identity_cost():
    g, p = single(lambda b, x: b.unary(OpKind.IDENTITY, x), (5,))
    assert cost(g, params=p) == 0


def test_conv_cost():
    g, p = single(lambda b, x: b.conv(x, 4, 3, "c"), (2, 8, 8))
    assert cost(g, params=p) == FROZEN["cost"]["conv3x3_2_4_8x8"] == 4608


def test_other_rules():
    g, p = single(lambda b, x: b.sep_conv(x, 3, "s", out_ch=4), (2, 5, 5))
    # depthwise then pointwise pass, once each (single application)
    assert cost(g, params=p) == (9 * 2 + 2 * 4) * 25
    g, p = single(lambda b, x: b.unary(OpKind.AVG_POOL, x, attrs={"kernel": 3, "stride": 1}), (2, 4, 4))
    assert cost(g, params=p) == 9 * 32
    g, p = single(lambda b, x: b.unary(OpKind.GLOBAL_AVG_POOL, x), (3, 4, 4))
    assert cost(g, params=p) == 48
    g, p = single(lambda b, x: b.proj(x, 5, "p"), (3, 2, 2))
    assert cost(g, params=p) == 3 * 5 * 4


def test_candidates_are_not_test_time_cost():
    g, p, _ = seed_model(Skeleton("toy", 2, 4, 1, (3,), 2))
    g2, p2, _, _ = initialize_candidates(g, p)
    assert cost(g2, params=p2) == cost(g, params=p)
    assert cost(g2, params=p2, live_only=False) > cost(g, params=p)
    assert not any(g2.node(i).op_kind is OpKind.STOP_GRADIENT for i in live_nodes(g2))


def test_genotype_and_graph_agree():
    g, p, geno = seed_model(Skeleton("image", 1, 3, 2, (2, 8, 8), 3))
    assert cost(geno) == cost(g, params=p) > 0
    assert param_count(geno) == p.count()


def test_input_shape_override_and_errors():
    g, p, _ = seed_model(Skeleton("image", 1, 2, 1, (1, 6, 6), 2))
    assert cost(g, params=p, input_shape=(1, 12, 12)) > cost(g, params=p)
    with pytest.raises(ShapeError):
        cost(g, params=p, input_shape=(3, 6, 6))
    with pytest.raises(ValueError):
        cost(g)


def test_custom_rules():
    g, p = single(lambda b, x: b.dense(x, 3, "d"), (4,))
    assert cost(g, CostModel({}), params=p) == 0
    assert cost(g, CostModel({OpKind.DENSE: lambda n, i, o, ps: 7}), params=p) == 7
