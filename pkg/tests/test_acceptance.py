"""Acceptance criteria 1-11, each at its stated tolerance.

Every test carries a ``criterion`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the run.
"""

import os
import time

import numpy as np
import pytest

from _support import (
    acceptance_distribution,
    brute_force_hull,
    conditioned_graph,
    finite_difference_check,
    max_rel_diff,
    rel_err,
)
from forwardnas.config import EpochConfig, RunConfig, SkeletonConfig
from forwardnas.data import DatasetSpec, load_dataset
from forwardnas.fslr import EquivalenceConfig, fslr_run, least_squares_residual, linear_equivalence_run
from forwardnas.genotype import Skeleton
from forwardnas.graphcore import Batch, ComputationGraph, GraphNode, OpKind, ParameterStore, backward, forward
from forwardnas.growth import cell_signature, finalize_candidates, seed_model
from forwardnas.search import (
    ModelRecord,
    SearchState,
    attach_candidates,
    finalize_and_tie,
    grow,
    lower_convex_hull,
    sample_parent,
    search_loop,
)
from forwardnas.weaklearn import initialize_candidates, weak_learn


# -- shared fixtures ---------------------------------------------------------------


def random_parent(rng, kind, mode="macro", merge="cp-each"):
    """A seed model with randomized affine and running batch-norm statistics."""
    classes = int(rng.integers(2, 4))
    if kind == "toy":
        sk = Skeleton("toy", int(rng.integers(1, 3)), int(rng.integers(3, 6)), int(rng.integers(1, 3)),
                      (int(rng.integers(2, 5)),), classes)
    else:
        sk = Skeleton("image", 1, 3, int(rng.integers(1, 3)), (2, 6, 6), classes)
    graph, params, genotype = seed_model(sk, mode, merge, seed=int(rng.integers(2**31)))
    for k in list(params):
        if k.endswith(("/gamma", "/beta", "/running_mean")):
            params[k] = rng.normal(size=params[k].shape)
        elif k.endswith("/running_var"):
            params[k] = rng.uniform(0.5, 2.0, size=params[k].shape)
    return graph, params, genotype, sk


def random_batch(rng, sk, n=6):
    X = rng.normal(size=(n,) + sk.input_shape)
    y = rng.integers(0, sk.num_classes, n).astype(np.float64)
    return Batch(X, y)



# -- 1 ------------------------------------------------------------------------------


@pytest.mark.criterion(1, "sg/sf exact forward and backward identities")
def test_criterion_01_sg_sf_algebra(measured):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    violations = 0
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        x = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=shape)
        up = rng.normal(size=shape)
        g = ComputationGraph([
            GraphNode(0, OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": list(shape[1:])}),
            GraphNode(1, OpKind.STOP_GRADIENT, [0]),
            GraphNode(2, OpKind.STOP_FORWARD, [0]),
        ], output_id=1)
        acts, _ = forward(g, ParameterStore(), Batch(x))
        _, g_sg = backward(g, ParameterStore(), acts, seed={1: up}, node_grads=True)
        _, g_sf = backward(g, ParameterStore(), acts, seed={2: up}, node_grads=True)
        ok = (np.array_equal(acts[1], x) and np.array_equal(acts[2], np.zeros_like(x))
              and np.array_equal(g_sg[0], np.zeros_like(x)) and np.array_equal(g_sf[0], up))
        violations += not ok
    elapsed = time.perf_counter() - start
    measured(f"{violations} violations / 1000, {elapsed:.2f}s")
    assert violations == 0
    assert elapsed < 1.0


# -- 2 ------------------------------------------------------------------------------


@pytest.mark.criterion(2, "analytic gradients match central differences (rel 1e-4)")
def test_criterion_02_autodiff_soundness(measured):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst, coords, skipped, rejected = 0.0, 0, 0, 0
    for i in range(200):
        g, p, b, rej = conditioned_graph(rng, "toy" if i % 2 == 0 else "image")
        rejected += rej
        res, sk = finite_difference_check(g, p, b, rng)
        skipped += sk
        coords += len(res)
        worst = max([worst] + [rel_err(a, n, floor=1e-5) for _, _, a, n in res])
    elapsed = time.perf_counter() - start
    measured(f"worst rel err {worst:.2e} over {coords} coords, {skipped} kink-skipped, "
             f"{rejected} ill-conditioned draws rejected, {elapsed:.1f}s")
    assert worst < 1e-4
    assert skipped < 0.05 * (coords + skipped)
    assert elapsed < 120


# -- 3 ------------------------------------------------------------------------------


@pytest.mark.criterion(3, "candidate gradients equal the two-pass <grad_xk L, x_c> oracle (rel 1e-8)")
def test_criterion_03_candidate_gradient_identity(measured):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for i in range(50):
        kind = "toy" if i % 2 == 0 else "image"
        graph, params, _, sk = random_parent(rng, kind)
        g2, p2, cands, _ = initialize_candidates(graph, params, opset=kind, rng=rng)
        for k in p2:
            if k.startswith("cand/") and k.endswith("/alpha"):
                p2[k] = rng.normal(size=p2[k].shape)
        batch = random_batch(rng, sk)
        # pass 1: gradient of the loss at every boosted layer, on the parent graph
        acts0, _ = forward(graph, params, batch)
        _, node_g = backward(graph, params, acts0, node_grads=True)
        # pass 2: backprop <G, x_c> through each candidate alone
        acts, _ = forward(g2, p2, batch)
        seed = {c.candidate_node: node_g[c.target_node] for c in cands}
        oracle = backward(g2, p2, acts, seed=seed)
        full = backward(g2, p2, acts)
        keys = [k for k in full if k.startswith("cand/")]
        assert keys
        for k in keys:
            worst = max(worst, max_rel_diff(full[k], oracle[k]))
            checked += full[k].size
    elapsed = time.perf_counter() - start
    measured(f"worst rel diff {worst:.2e} over {checked} entries, {elapsed:.1f}s")
    assert worst <= 1e-8
    assert elapsed < 60


# -- 4 ------------------------------------------------------------------------------


def _parent_grads_and_output(graph, params, batch, keys):
    acts, _ = forward(graph, params, batch)
    grads = backward(graph, params, acts)
    return acts[graph.output_id], {k: grads[k] for k in keys}


@pytest.mark.criterion(4, "isolated candidates leave predictions and parent gradients unchanged (rel 1e-12)")
def test_criterion_04_shielding(measured):
    rng = np.random.default_rng(404)
    worst = 0.0
    for i in range(100):
        kind = "toy" if i % 2 == 0 else "image"
        graph, params, _, sk = random_parent(rng, kind, mode=str(rng.choice(["cell", "macro"])))
        g2, p2, _, _ = initialize_candidates(graph, params, opset=kind, rng=rng)
        for k in p2:
            if k.startswith("cand/"):
                p2[k] = rng.normal(size=p2[k].shape) if not k.endswith("running_var") else np.ones(p2[k].shape)
        batch = random_batch(rng, sk)
        keys = [k for k in graph.param_keys() if params.trainable(k)]
        out0, gr0 = _parent_grads_and_output(graph, params, batch, keys)
        out1, gr1 = _parent_grads_and_output(g2, p2, batch, keys)
        worst = max([worst, max_rel_diff(out0, out1)] + [max_rel_diff(gr0[k], gr1[k]) for k in keys])
    measured(f"worst rel diff {worst:.2e} on 100 batches")
    assert worst <= 1e-12


@pytest.mark.criterion(4, "isolated candidates leave predictions and parent gradients unchanged (rel 1e-12)")
def test_criterion_04_joint_mode_complement(measured):
    """Without the shields, trained candidates change the parent's gradients."""
    rng = np.random.default_rng(405)
    changed = 0
    for trial in range(5):
        graph, params, _, sk = random_parent(rng, "toy")
        X = rng.normal(size=(64,) + sk.input_shape)
        y = rng.integers(0, sk.num_classes, 64).astype(np.float64)
        keys = [k for k in graph.param_keys() if params.trainable(k)]
        for joint in (False, True):
            g2, p2, cands, pen = initialize_candidates(graph, params, opset="toy", joint=joint, rng=rng)
            res = weak_learn(g2, p2, cands, X, y, epochs=3, lr0=0.1, batch_size=16,
                             rng=np.random.default_rng(trial), penalty=pen)
            # the parent alone, with the parameters weak learning produced
            parent_params = ParameterStore({k: res.params[k] for k in params})
            batch = Batch(X[:16], y[:16])
            _, gr0 = _parent_grads_and_output(graph, parent_params, batch, keys)
            _, gr1 = _parent_grads_and_output(g2, res.params, batch, keys)
            diff = max(max_rel_diff(gr0[k], gr1[k]) for k in keys)
            if joint:
                changed += diff > 1e-6
            else:
                assert diff <= 1e-12
    measured(f"joint mode changed parent gradients in {changed}/5 trials")
    assert changed == 5


# -- 5 ------------------------------------------------------------------------------


@pytest.mark.criterion(5, "finalization with eta=0 leaves outputs unchanged (rel 1e-12)")
@pytest.mark.parametrize("merge", ["cp-each", "cp-end", "ws"])
def test_criterion_05_finalization_invariance(merge, measured):
    rng = np.random.default_rng({"cp-each": 501, "cp-end": 502, "ws": 503}[merge])
    worst, batches = 0.0, 0
    for i in range(10):
        kind = "toy" if i % 2 == 0 else "image"
        mode = "cell" if i % 4 < 2 else "macro"
        graph, params, genotype, sk = random_parent(rng, kind, mode, merge)
        cfg = RunConfig(mode=mode, opset=kind, merge_variant=merge,
                        dataset=DatasetSpec(kind="tiny-image-file", path="unused") if kind == "image" else DatasetSpec())
        g2, p2, cands, pen = attach_candidates(graph, params, cfg, rng)
        X = rng.normal(size=(32,) + sk.input_shape)
        y = rng.integers(0, sk.num_classes, 32).astype(np.float64)
        p2 = weak_learn(g2, p2, cands, X, y, epochs=1, lr0=0.05, batch_size=8, rng=rng, penalty=pen).params
        g3, p3, geno3 = finalize_and_tie(g2, p2, genotype, cands, cfg, rng)
        assert geno3.pattern_count() > genotype.pattern_count()
        for _ in range(10):
            batch = random_batch(rng, sk)
            for fmode in ("eval", "train"):
                a_before, _ = forward(g2, p2, batch, fmode)
                a_after, _ = forward(g3, p3, batch, fmode)
                worst = max(worst, max_rel_diff(a_before[g2.output_id], a_after[g3.output_id]))
            batches += 1
    measured(f"{merge}: worst rel diff {worst:.2e} on {batches} batches")
    assert batches == 100
    assert worst <= 1e-12


# -- 6 ------------------------------------------------------------------------------


@pytest.mark.criterion(6, "lower_convex_hull equals the O(n^3) brute force on 1000 point sets")
def test_criterion_06_hull_oracle(measured):
    rng = np.random.default_rng(606)
    start = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 14))
        if i % 2 == 0:
            # coarse grid: forces equal costs, equal errors and collinear triples
            pts = [(float(rng.integers(0, 6)), float(rng.integers(0, 6)) / 4) for _ in range(n)]
        else:
            pts = [(float(rng.uniform(0, 1e6)), float(rng.uniform(0, 1))) for _ in range(n)]
        if lower_convex_hull(pts) != brute_force_hull(pts):
            mismatches += 1
    elapsed = time.perf_counter() - start
    measured(f"{mismatches} mismatches / 1000, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 30


# -- 7 ------------------------------------------------------------------------------


@pytest.mark.criterion(7, "parent sampling frequencies within 0.02 of the exact distribution")
def test_criterion_07_parent_sampling(measured):
    rng = np.random.default_rng(707)
    start = time.perf_counter()
    worst = 0.0
    for s in range(10):
        h = int(rng.integers(2, 7))
        state = SearchState()
        costs = np.sort(rng.choice(1000, h, replace=False))
        errs = 1.0 / (1.0 + costs / 100.0)  # strictly convex, so every point is on the hull
        for i in range(h):
            rec = ModelRecord(i, None, cost=int(costs[i]), val_error=float(errs[i]), status="done",
                              sample_count=int(rng.integers(0, 6)))
            state.insert(rec)
        assert len(state.hull) == h
        counts = [state.records[m].sample_count for m in reversed(state.hull)]
        expected = acceptance_distribution(counts)
        draws = np.zeros(h)
        pos = {m: i for i, m in enumerate(reversed(state.hull))}
        draw_rng = np.random.default_rng(s)
        for _ in range(100_000):
            draws[pos[sample_parent(state, draw_rng, record=False)]] += 1
        worst = max(worst, float(np.max(np.abs(draws / 100_000 - expected))))
    elapsed = time.perf_counter() - start
    measured(f"worst abs deviation {worst:.4f}, {elapsed:.1f}s")
    assert worst <= 0.02
    assert elapsed < 60


# -- 8 ------------------------------------------------------------------------------


def separated_instance(rng, n=100, p=5, gap=1.25):
    """y = X c + noise where one feature's residual correlation clearly leads."""
    while True:
        X = rng.normal(size=(n, p))
        c = rng.uniform(-1, 1, p)
        c[int(rng.integers(p))] = rng.choice([-3.0, 3.0])
        y = X @ c + 0.5 * rng.normal(size=n)
        A = (X - X.mean(axis=0)) / np.linalg.norm(X - X.mean(axis=0), axis=0)
        corr = np.sort(np.abs(A.T @ y))[::-1]
        if corr[0] >= gap * corr[1]:
            return X, y


@pytest.mark.criterion(8, "top-|alpha| shortcut matches the boosting/FSLR choice; FSLR reaches least squares")
def test_criterion_08_fslr_equivalence(measured):
    rng = np.random.default_rng(808)
    start = time.perf_counter()
    agree, worst_resid = 0, 0.0
    for i in range(25):
        X, y = separated_instance(rng)
        res = linear_equivalence_run(X, y, EquivalenceConfig(seed=i))
        r = res["rounds"][0]
        assert r["boost_choice"] == r["fslr_choice"]
        agree += r["agree"]
        path = fslr_run(X, y, step=0.002, iterations=100_000)
        ls = least_squares_residual(X, y)
        worst_resid = max(worst_resid, abs(path.residual_norm - ls) / ls)
    elapsed = time.perf_counter() - start
    measured(f"{agree}/25 agree, worst FSLR/LS residual gap {100 * worst_resid:.3f}%, {elapsed:.1f}s")
    assert agree >= 24
    assert worst_resid <= 0.01
    assert elapsed < 300


# -- 9 ------------------------------------------------------------------------------


def desk_config(seed, **kw):
    base = dict(mode="macro", opset="toy", growth_iterations=5, workers=1, seed=seed,
                dataset=DatasetSpec(kind="synthetic-spirals", size=2500, val_fraction=0.2, seed=seed))
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.mark.criterion(9, "desk-scale search improves on the seed in >=4/5 seeds; hull is monotone")
def test_criterion_09_end_to_end(tmp_path, measured):
    wins, lines = 0, []
    for seed in range(5):
        start = time.perf_counter()
        cfg = desk_config(seed)
        data = load_dataset(cfg.dataset)
        assert (len(data.X_train), len(data.X_val)) == (2000, 500)
        state = search_loop(cfg, tmp_path / f"s{seed}", dataset=data)
        elapsed = time.perf_counter() - start
        hull = [state.records[m] for m in state.hull]
        assert all(a.cost < b.cost and a.val_error > b.val_error for a, b in zip(hull, hull[1:]))
        best = min(r.val_error for r in hull)
        seed_err = state.records[0].val_error
        wins += best < seed_err
        lines.append(f"s{seed}:{seed_err:.3f}->{best:.3f}")
        assert elapsed < 600
    measured(f"{wins}/5 improved ({', '.join(lines)})")
    assert wins >= 4


# -- 10 -----------------------------------------------------------------------------


@pytest.mark.criterion(10, "cell mode keeps normal cells isomorphic; macro leaves other cells untouched")
def test_criterion_10_cell_tying(measured):
    cfg = RunConfig(mode="cell", skeleton=SkeletonConfig(n_cells=3, filters=4, stages=2),
                    epochs=EpochConfig(seed=0, weak=1, child=1), dataset=DatasetSpec(size=120)).validate()
    data = load_dataset(cfg.dataset)
    sk = Skeleton("toy", 3, 4, 2, data.input_shape, data.num_classes)
    graph, params, genotype = seed_model(sk, "cell", cfg.merge_variant, seed=0)
    for it in range(3):
        out = grow(graph, params, genotype, data.X_train, data.y_train, cfg, seed=[0, it])
        graph, params, genotype = out.graph, out.params, out.genotype
        sigs = {cell_signature(graph, c) for c in graph.normal_cells()}
        assert len(sigs) == 1, f"normal cells diverged after iteration {it + 1}"
        assert all(len(c.patterns) == it + 1 for c in genotype.cells)

    rng = np.random.default_rng(1010)
    g0, p0, _ = seed_model(sk, "macro", "cp-each", seed=1)
    normal = g0.normal_cells()
    unchanged = 0
    for boosted in normal:
        before = {c: cell_signature(g0, c) for c in normal}
        g2, p2, cands, pen = initialize_candidates(g0, p0, lambda n, b=boosted: n.is_out and n.cell == b,
                                                   opset="toy", rng=rng)
        g3, _, _ = finalize_candidates(g2, p2, cands, rng=rng)
        after = {c: cell_signature(g3, c) for c in normal}
        assert after[boosted] != before[boosted]
        unchanged += all(after[c] == before[c] for c in normal if c != boosted)
    measured(f"cell mode: 1 signature across {len(normal)} cells after 3 iterations; "
             f"macro: {unchanged}/{len(normal)} single-cell boosts left the others unchanged")
    assert unchanged == len(normal)


# -- 11 -----------------------------------------------------------------------------


def _files(root):
    out = {}
    for sub in ("manifest.json", "hull.csv"):
        with open(os.path.join(root, sub), "rb") as fh:
            out[sub] = fh.read()
    gdir = os.path.join(root, "genotypes")
    for name in sorted(os.listdir(gdir)):
        with open(os.path.join(gdir, name), "rb") as fh:
            out[f"genotypes/{name}"] = fh.read()
    return out


@pytest.mark.criterion(11, "identical single-worker runs give byte-identical genotypes and manifests")
def test_criterion_11_reproducibility(tmp_path, measured):
    cfg = desk_config(7, growth_iterations=3, dataset=DatasetSpec(size=600, seed=7),
                      epochs=EpochConfig(seed=5, weak=3, child=3))
    search_loop(cfg, tmp_path / "a")
    search_loop(cfg, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert sorted(a) == sorted(b)
    differing = [k for k in a if a[k] != b[k]]
    measured(f"{len(a)} files compared, {len(differing)} differ")
    assert len([k for k in a if k.startswith("genotypes/")]) == 4
    assert not differing
