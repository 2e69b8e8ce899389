import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import brute_force_hull
from forwardnas.config import EpochConfig, RunConfig
from forwardnas.data import DatasetSpec
from forwardnas.graphcore import ComputationGraph, GraphNode, OpKind, ParameterStore
from forwardnas.search import (
    ModelRecord,
    SearchState,
    evaluate,
    filter_for_final,
    lower_convex_hull,
    sample_parent,
    search_loop,
    state_from_log,
)

FROZEN = json.load(open(os.path.join(os.path.dirname(__file__), "oracles", "frozen.json")))


def hull_state(costs, errors, counts=None):
    s = SearchState()
    for i, (c, e) in enumerate(zip(costs, errors)):
        s.insert(ModelRecord(i, None, cost=c, val_error=e, status="done",
                             sample_count=0 if counts is None else counts[i]))
    return s


# -- hull ---------------------------------------------------------------------------------


@pytest.mark.parametrize("case", ["single", "four_point", "equal_cost", "collinear"])
def test_hull_examples(case):
    c = FROZEN["hull"][case]
    assert lower_convex_hull([tuple(p) for p in c["points"]]) == c["indices"]


def test_four_point_segment_height():
    assert FROZEN["hull"]["four_point"]["segment_height_at_3"] == pytest.approx(0.35)


def test_empty_hull_input():
    with pytest.raises(ValueError):
        lower_convex_hull([])


points = st.lists(st.tuples(st.integers(1, 8), st.integers(0, 8)), min_size=1, max_size=50)


@settings(max_examples=200, deadline=None)
@given(points)
def test_hull_matches_brute_force_and_is_monotone(pts):
    pts = [(float(c), e / 8) for c, e in pts]
    h = lower_convex_hull(pts)
    assert h == brute_force_hull(pts)
    for a, b in zip(h, h[1:]):
        assert pts[a][0] < pts[b][0] and pts[a][1] > pts[b][1]


def test_failed_and_unevaluated_records_stay_off_the_hull():
    s = hull_state([1, 2], [0.5, 0.4])
    s.insert(ModelRecord(2, None, cost=1, val_error=0.0, status="failed"))
    s.insert(ModelRecord(3, None, cost=1, status="training"))
    assert s.hull == [0, 1]


# -- parent sampling --------------------------------------------------------------------------


def test_fresh_hull_picks_most_accurate():
    s = hull_state([1, 2, 3], [0.9, 0.5, 0.2])
    rng = np.random.default_rng(0)
    assert sample_parent(s, rng) == 2
    assert s.records[2].sample_count == 1


@pytest.mark.parametrize("i", range(5))
def test_sampling_distribution_against_frozen_enumeration(i):
    case = FROZEN["sampling"][i]
    h = len(case["counts"])
    costs = list(range(1, h + 1))
    errors = [1.0 / c for c in costs]  # convex, so every model is on the hull
    counts = list(reversed(case["counts"]))  # frozen counts run most to least accurate
    s = hull_state(costs, errors, counts)
    rng = np.random.default_rng(i)
    draws = np.zeros(h)
    order = list(reversed(s.hull))
    for _ in range(20_000):
        draws[order.index(sample_parent(s, rng, record=False))] += 1
    assert np.max(np.abs(draws / 20_000 - case["probs"])) < 0.02


def test_sample_counts_equal_times_returned():
    s = hull_state([1, 2, 3, 4], [0.9, 0.6, 0.4, 0.3])
    rng = np.random.default_rng(1)
    seen = {m: 0 for m in s.hull}
    for _ in range(300):
        m = sample_parent(s, rng)
        assert m in s.hull
        seen[m] += 1
    assert all(s.records[m].sample_count == seen[m] for m in s.hull)


def test_sampling_empty_hull():
    with pytest.raises(ValueError):
        sample_parent(SearchState(), np.random.default_rng(0))


# -- evaluate -----------------------------------------------------------------------------------


def logit_graph():
    # prediction = dense(x) with an identity matrix: the inputs are the logits
    g = ComputationGraph([
        GraphNode(0, OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": [3]}),
        GraphNode(1, OpKind.DENSE, [0], ["W"]),
    ], output_id=1)
    return g, ParameterStore({"W": np.eye(3)})


def test_evaluate_examples():
    g, p = logit_graph()
    y = np.arange(10) % 3
    assert evaluate(g, p, np.eye(3)[y], y) == 0.0
    yb = np.array([0, 1] * 5)
    assert evaluate(g, p, np.tile([1.0, 0.0, 0.0], (10, 1)), yb) == 0.5
    c = FROZEN["error_count"]
    assert evaluate(g, p, np.eye(3)[c["pred"]], np.array(c["truth"])) == c["error"]
    with pytest.raises(ValueError):
        evaluate(g, p, np.zeros((0, 3)), np.zeros(0))


def test_regression_error_is_normalized():
    g = ComputationGraph([
        GraphNode(0, OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": [1]}),
        GraphNode(1, OpKind.PLACEHOLDER, attrs={"source": "targets", "shape": [1]}),
        GraphNode(2, OpKind.IDENTITY, [0]),
        GraphNode(3, OpKind.MSE, [2, 1]),
    ], output_id=2, loss_id=3)
    X = np.array([[1.0], [3.0]])
    y = np.array([[0.0], [0.0]])
    assert evaluate(g, ParameterStore(), X, y, task="regression") == pytest.approx(5 / 6)


# -- final filter ----------------------------------------------------------------------------------


def test_filter_for_final():
    s = hull_state([10e6, 55e6, 62e6, 90e6], [0.4, 0.2, 0.18, 0.17])
    assert filter_for_final(s, 60e6) == [1, 2]
    s = hull_state([10e6, 200e6], [0.4, 0.1])
    assert filter_for_final(s, 60e6) == [0]
    s = hull_state([40e6, 80e6], [0.4, 0.1])
    assert filter_for_final(s, 60e6) == [0]


# -- the loop ----------------------------------------------------------------------------------------


def small_config(**kw):
    base = dict(growth_iterations=2, epochs=EpochConfig(seed=3, weak=2, child=2),
                dataset=DatasetSpec(size=200, seed=3), seed=3)
    base.update(kw)
    return RunConfig(**base).validate()


def test_zero_iterations_leaves_only_the_seed(tmp_path):
    s = search_loop(small_config(growth_iterations=0), tmp_path)
    assert list(s.records) == [0] and s.hull == [0]


def test_two_macro_iterations_grow_cost_and_patterns(tmp_path):
    s = search_loop(small_config(), tmp_path)
    recs = [s.records[i] for i in range(3)]
    assert all(r.status == "done" for r in recs)
    # the second child grows from whichever hull model was sampled
    for r in recs[1:]:
        parent = s.records[r.parent_id]
        assert r.genotype.growth_rounds == parent.genotype.growth_rounds + 1
        assert r.cost > parent.cost
    assert sorted(r.genotype.growth_rounds for r in recs[1:]) in ([1, 1], [1, 2])
    manifest = json.load(open(tmp_path / "manifest.json"))
    assert manifest["amortization"]["per_iteration"] and manifest["dataset"]["sha256"]
    assert len(os.listdir(tmp_path / "genotypes")) == 3
    log = [json.loads(line) for line in open(tmp_path / "search.jsonl")]
    assert {"iter", "worker", "parent_id", "child_id", "cost", "val_error", "wall_time"} <= set(log[-1])
    rebuilt = state_from_log(tmp_path / "search.jsonl")
    assert rebuilt.hull == s.hull
    assert all(rebuilt.records[m].sample_count == s.records[m].sample_count for m in s.records)


def test_two_workers_complete(tmp_path):
    s = search_loop(small_config(growth_iterations=2, workers=2), tmp_path)
    assert len(s.records) == 3 and all(r.status == "done" for r in s.records.values())
