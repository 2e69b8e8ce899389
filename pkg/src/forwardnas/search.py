"""The outer growth loop, the cost/error lower convex hull and parent sampling.

One coordinator owns the :class:`SearchState`. Growth jobs are plain
messages (serialized parent, config, seed) handed to workers, and every
result comes back as a message that the coordinator turns into a record.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint, write_json
from .config import RunConfig
from .cost import cost
from .data import Dataset, load_dataset
from .genotype import Genotype, Skeleton
from .graphcore import Batch, ComputationGraph, ParameterStore, forward
from .growth import apply_tying, finalize_candidates, replicate_pattern, seed_model
from .training import predict, train
from .weaklearn import initialize_candidates, weak_learn

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "forwardnas.manifest/1"
CLASSIFICATION_NORMALIZATION = "fraction misclassified"
REGRESSION_NORMALIZATION = "mean loss mapped through loss / (1 + loss)"


# -- records and state -------------------------------------------------------


@dataclass
class ModelRecord:
    model_id: int
    genotype: Genotype
    checkpoint: str | None = None
    cost: int = 0
    param_count: int = 0
    val_error: float | None = None
    parent_id: int | None = None
    sample_count: int = 0
    status: str = "training"  # training | done | failed
    error: str | None = None
    amortization: float | None = None

    def summary(self):
        return {
            "model_id": self.model_id,
            "parent_id": self.parent_id,
            "checkpoint": self.checkpoint,
            "cost": self.cost,
            "param_count": self.param_count,
            "val_error": self.val_error,
            "status": self.status,
            "error": self.error,
            "amortization": self.amortization,
            "genotype_sha256": hashlib.sha256(self.genotype.to_json().encode()).hexdigest(),
        }


@dataclass
class SearchState:
    records: dict[int, ModelRecord] = field(default_factory=dict)
    hull: list[int] = field(default_factory=list)
    seed: int = 0
    iteration: int = 0
    budget: float | None = None

    def insert(self, record: ModelRecord):
        """Add a record; finished ones with an error value update the hull."""
        self.records[record.model_id] = record
        if record.status == "done" and record.val_error is not None:
            self.update_hull()

    def evaluated(self) -> list[ModelRecord]:
        return [r for r in self.records.values() if r.status == "done" and r.val_error is not None]

    def update_hull(self):
        recs = sorted(self.evaluated(), key=lambda r: r.model_id)
        if not recs:
            self.hull = []
            return
        idx = lower_convex_hull([(r.cost, r.val_error) for r in recs])
        self.hull = [recs[i].model_id for i in idx]


def lower_convex_hull(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of the lower-left convex hull of ``(cost, error)`` points.

    Sorted by cost; errors strictly decrease along the result. Among points
    of equal cost only the lowest error survives (first index on exact
    ties). Points lying exactly on a hull segment are kept, since no mix of
    the others beats them. Arithmetic is exact on the given floats.
    """
    if not points:
        raise ValueError("lower_convex_hull needs at least one point")
    pts = [(Fraction(c), Fraction(e), i) for i, (c, e) in enumerate(points)]
    pts.sort(key=lambda p: (p[0], p[1], p[2]))
    best_err = None
    front = []
    for c, e, i in pts:
        if front and front[-1][0] == c:
            continue  # a lower-or-equal error at this cost was already taken
        if best_err is not None and e >= best_err:
            continue
        front.append((c, e, i))
        best_err = e
    hull: list[tuple] = []
    for p in front:
        while len(hull) >= 2:
            (c1, e1, _), (c2, e2, _) = hull[-2], hull[-1]
            # middle point strictly above the chord from hull[-2] to p
            if (c2 - c1) * (p[1] - e1) - (e2 - e1) * (p[0] - c1) < 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return [i for _, _, i in hull]


def sample_parent(state: SearchState, rng: np.random.Generator, record=True) -> int:
    """Pick a hull model, most accurate first, accepting m w.p. 1/(n(m)+1).

    A pass that accepts nothing starts over. The chosen model's count is
    incremented unless ``record`` is false.
    """
    if not state.hull:
        raise ValueError("cannot sample a parent from an empty hull")
    order = list(reversed(state.hull))
    while True:
        for mid in order:
            rec = state.records[mid]
            if rng.random() < 1.0 / (rec.sample_count + 1):
                if record:
                    rec.sample_count += 1
                return mid


def evaluate(graph: ComputationGraph, params: ParameterStore, X, y, task="classification") -> float:
    """Validation error in [0, 1].

    Classification: fraction misclassified. Regression: the mean loss ``l``
    mapped to ``l / (1 + l)``.
    """
    if len(X) == 0:
        raise ValueError("validation set is empty")
    if task == "classification":
        pred = predict(graph, params, X).argmax(axis=1)
        return float(np.mean(pred != np.asarray(y).astype(np.int64)))
    if task == "regression":
        total = 0.0
        for start in range(0, len(X), 256):
            _, loss = forward(graph, params, Batch(X[start: start + 256], y[start: start + 256]), "eval")
            total += loss * len(X[start: start + 256])
        mean = total / len(X)
        return float(mean / (1.0 + mean))
    raise ValueError(f"unknown task {task!r}")


def filter_for_final(state: SearchState, cost_budget) -> list[int]:
    """Hull models with cost in [0.8, 1.2] x budget, else the nearest one.

    Equal distance goes to the cheaper model.
    """
    if not state.hull:
        raise ValueError("hull is empty")
    recs = [state.records[m] for m in state.hull]
    inside = [r.model_id for r in recs if 0.8 * cost_budget <= r.cost <= 1.2 * cost_budget]
    if inside:
        return inside
    nearest = min(recs, key=lambda r: (abs(r.cost - cost_budget), r.cost))
    return [nearest.model_id]


# -- one growth step ------------------------------------------------------------


@dataclass
class GrowthOutcome:
    graph: ComputationGraph
    params: ParameterStore
    genotype: Genotype
    weak_compute: float
    child_compute: float

    @property
    def amortization(self) -> float:
        return self.weak_compute / self.child_compute if self.child_compute else float("inf")


def boost_predicate(graph: ComputationGraph, mode):
    """Layers boosted in one growth step.

    Macro mode boosts the output of every normal cell. Cell mode boosts the
    last normal cell only; its pattern is then copied into the others.
    """
    if mode == "cell":
        rep = graph.normal_cells()[-1]
        return lambda n: n.is_out and n.cell == rep
    return None


def attach_candidates(graph, params, config: RunConfig, rng):
    return initialize_candidates(graph, params, boost_predicate(graph, config.mode), config.lambda_,
                                 config.opset, config.mode, not config.isolated, rng)


def finalize_and_tie(graph, params, genotype: Genotype, candidates, config: RunConfig, rng):
    """Finalize every candidate and record the patterns in the genotype.

    Cell mode instantiates the pattern, freshly initialized, in every other
    normal cell.
    """
    normal = graph.normal_cells()
    child_graph, child_params, patterns = finalize_candidates(
        graph, params, candidates, I_max=config.I_max, merge_variant=config.merge_variant, rng=rng
    )
    for cell, pattern in sorted(patterns.items()):
        genotype = apply_tying(genotype, pattern, config.mode, normal.index(cell))
        if config.mode == "cell":
            others = [c for c in normal if c != cell]
            child_graph, child_params = replicate_pattern(child_graph, child_params, pattern, others,
                                                          int(rng.integers(2**31)))
    return child_graph, child_params, genotype


def grow(graph, params, genotype: Genotype, X, y, config: RunConfig, seed) -> GrowthOutcome:
    """One growth iteration: candidates on every boosted layer at once, weak
    learning, finalization, tying, then training of the child."""
    rng = np.random.default_rng(seed)
    g_aug, p_aug, cands, penalty = attach_candidates(graph, params, config, rng)
    weak = weak_learn(g_aug, p_aug, cands, X, y, config.epochs.weak, config.lr0, config.batch_size, rng,
                      config.weight_decay, penalty=penalty)
    child_graph, child_params, child_genotype = finalize_and_tie(g_aug, weak.params, genotype, cands, config, rng)
    child = train(child_graph, child_params, X, y, config.epochs.child, config.lr0, config.batch_size, rng,
                  config.weight_decay)
    weak_compute = weak.examples * cost(g_aug, params=p_aug, live_only=False)
    child_compute = child.examples * cost(child_graph, params=child.params)
    return GrowthOutcome(child_graph, child.params, child_genotype, float(weak_compute), float(child_compute))


def _job(payload: dict) -> dict:
    """Worker entry point: every input and output is a plain message."""
    start = time.perf_counter()
    try:
        config = RunConfig.from_dict(payload["config"])
        graph = ComputationGraph.from_dict(payload["graph"])
        params = ParameterStore.from_bytes(payload["params"])
        genotype = Genotype.from_dict(payload["genotype"])
        out = grow(graph, params, genotype, payload["X"], payload["y"], config, payload["seed"])
        result = {
            "status": "ok",
            "graph": out.graph.to_dict(),
            "params": out.params.to_bytes(),
            "genotype": out.genotype.to_dict(),
            "weak_compute": out.weak_compute,
            "child_compute": out.child_compute,
        }
    except Exception as exc:  # reported back as a failed record
        result = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    result["wall_time"] = time.perf_counter() - start
    return result


# -- the loop -------------------------------------------------------------------


class SearchRun:
    """Coordinator: owns the state and every file in the output directory."""

    def __init__(self, config: RunConfig, out_dir, dataset: Dataset | None = None):
        self.config = config.validate()
        self.out_dir = os.fspath(out_dir)
        self.data = dataset if dataset is not None else load_dataset(config.dataset)
        self.state = SearchState(seed=config.seed, budget=config.cost_budget)
        self.rng = np.random.default_rng(config.seed)
        self.skeleton = Skeleton(config.skeleton_kind, config.skeleton.n_cells, config.skeleton.filters,
                                 config.skeleton.stages, self.data.input_shape, self.data.num_classes)
        self.genotype_sequence: list[str] = []
        for sub in ("models", "genotypes"):
            os.makedirs(os.path.join(self.out_dir, sub), exist_ok=True)
        self.log_path = os.path.join(self.out_dir, "search.jsonl")
        open(self.log_path, "w").close()

    def _log(self, event):
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _store(self, record: ModelRecord, graph, params):
        rel = os.path.join("models", f"{record.model_id:04d}")
        save_checkpoint(graph, params, record.genotype, os.path.join(self.out_dir, rel))
        record.checkpoint = rel
        with open(os.path.join(self.out_dir, "genotypes", f"{record.model_id:04d}.json"), "w") as fh:
            fh.write(record.genotype.to_json())
        self.genotype_sequence.append(record.genotype.to_json())

    def _finish(self, record: ModelRecord, graph, params):
        record.cost = cost(graph, params=params)
        record.param_count = params.count()
        record.val_error = evaluate(graph, params, self.data.X_val, self.data.y_val)
        record.status = "done"
        self._store(record, graph, params)

    def seed(self):
        c = self.config
        graph, params, genotype = seed_model(self.skeleton, c.mode, c.merge_variant, seed=c.seed)
        res = train(graph, params, self.data.X_train, self.data.y_train, c.epochs.seed, c.lr0, c.batch_size,
                    np.random.default_rng([c.seed, 0]), c.weight_decay)
        record = ModelRecord(0, genotype)
        start = time.perf_counter()
        self._finish(record, graph, res.params)
        self.state.insert(record)
        self._log({"event": "seed", "iter": 0, "worker": 0, "parent_id": None, "child_id": 0,
                   "cost": record.cost, "params": record.param_count, "val_error": record.val_error,
                   "status": record.status, "wall_time": time.perf_counter() - start})
        self._graphs = {0: (graph, res.params)}
        return record

    def _payload(self, parent_id, child_id):
        graph, params = self._load(parent_id)
        return {
            "config": self.config.to_dict(),
            "graph": graph.to_dict(),
            "params": params.to_bytes(),
            "genotype": self.state.records[parent_id].genotype.to_dict(),
            "X": self.data.X_train,
            "y": self.data.y_train,
            "seed": [self.config.seed, child_id],
        }

    def _load(self, model_id):
        if model_id in self._graphs:
            return self._graphs[model_id]
        from .checkpoint import load_checkpoint

        graph, params, _ = load_checkpoint(os.path.join(self.out_dir, self.state.records[model_id].checkpoint))
        return graph, params

    def _accept(self, child_id, parent_id, worker, result):
        record = ModelRecord(child_id, self.state.records[parent_id].genotype, parent_id=parent_id)
        self.state.iteration += 1
        if result["status"] == "ok":
            graph = ComputationGraph.from_dict(result["graph"])
            params = ParameterStore.from_bytes(result["params"])
            record.genotype = Genotype.from_dict(result["genotype"])
            record.amortization = result["weak_compute"] / result["child_compute"]
            try:
                self._finish(record, graph, params)
                self._graphs[child_id] = (graph, params)
            except Exception as exc:
                record.status, record.error = "failed", f"{type(exc).__name__}: {exc}"
        else:
            record.status, record.error = "failed", result["error"]
        self.state.insert(record)
        self._log({"event": "child", "iter": self.state.iteration, "worker": worker, "parent_id": parent_id,
                   "child_id": child_id, "cost": record.cost, "params": record.param_count,
                   "val_error": record.val_error,
                   "status": record.status, "amortization": record.amortization,
                   "wall_time": result["wall_time"], **({"error": record.error} if record.error else {})})
        if record.status == "failed":
            log.warning("child %d failed: %s", child_id, record.error)
        return record

    def run(self, workers=None) -> SearchState:
        workers = workers or self.config.workers
        self.seed()
        total = self.config.growth_iterations
        if workers == 1:
            for child_id in range(1, total + 1):
                parent = sample_parent(self.state, self.rng)
                self._accept(child_id, parent, 0, _job(self._payload(parent, child_id)))
        elif total:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                pending = {}
                next_id = 1
                while next_id <= total or pending:
                    while next_id <= total and len(pending) < workers:
                        parent = sample_parent(self.state, self.rng)
                        fut = pool.submit(_job, self._payload(parent, next_id))
                        pending[fut] = (next_id, parent, len(pending))
                        next_id += 1
                    done, _ = wait(pending, return_when=FIRST_COMPLETED)
                    for fut in sorted(done, key=lambda f: pending[f][0]):
                        child_id, parent, worker = pending.pop(fut)
                        self._accept(child_id, parent, worker, fut.result())
        self.write_outputs()
        return self.state

    # -- artifacts --------------------------------------------------------------

    def amortization_report(self):
        ratios = [r.amortization for r in sorted(self.state.records.values(), key=lambda r: r.model_id)
                  if r.amortization is not None]
        return {
            "per_iteration": ratios,
            "max": max(ratios) if ratios else None,
            "bound": self.config.amortization_bound,
            "within_bound": all(r <= self.config.amortization_bound for r in ratios),
        }

    def manifest(self):
        s = self.state
        out = {
            "schema": MANIFEST_SCHEMA,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "dataset": {"spec": self.config.dataset.to_dict(), "sha256": self.data.digest(),
                        "train_size": len(self.data.X_train), "val_size": len(self.data.X_val)},
            "error_normalization": CLASSIFICATION_NORMALIZATION,
            "skeleton": self.skeleton.to_dict(),
            "models": [s.records[m].summary() for m in sorted(s.records)],
            "hull": list(s.hull),
            "amortization": self.amortization_report(),
        }
        if self.config.cost_budget is not None:
            out["final_candidates"] = filter_for_final(s, self.config.cost_budget)
        return out

    def write_outputs(self):
        write_json(os.path.join(self.out_dir, "manifest.json"), self.manifest())
        write_hull_csv(self.state, os.path.join(self.out_dir, "hull.csv"))


def write_hull_csv(state: SearchState, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "cost", "params", "val_error"])
        for m in state.hull:
            r = state.records[m]
            w.writerow([m, r.cost, r.param_count, repr(r.val_error)])


def search_loop(config: RunConfig, out_dir, workers=None, dataset: Dataset | None = None) -> SearchState:
    """Seed, then ``config.growth_iterations`` growth steps from hull parents."""
    return SearchRun(config, out_dir, dataset).run(workers)


def state_from_log(path) -> SearchState:
    """Rebuild records (cost, error, lineage) and the hull from a search log."""
    state = SearchState()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            ev = json.loads(line)
            if ev.get("event") not in ("seed", "child"):
                continue
            rec = ModelRecord(ev["child_id"], None, cost=ev["cost"], param_count=ev.get("params", 0),
                              val_error=ev["val_error"],
                              parent_id=ev["parent_id"], status=ev.get("status", "done"))
            if ev["parent_id"] is not None and ev["parent_id"] in state.records:
                state.records[ev["parent_id"]].sample_count += 1
            state.insert(rec)
    return state
