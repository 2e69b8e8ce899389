"""Command-line entry point: ``forwardnas <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, write_json
from .config import ConfigError, RunConfig
from .cost import cost
from .data import load_dataset
from .fslr import fslr_run, least_squares_residual, read_matrix_csv
from .genotype import Skeleton
from .graphcore import to_dot
from .growth import build_model, seed_model
from .search import (
    SearchState,
    attach_candidates,
    evaluate,
    finalize_and_tie,
    search_loop,
    state_from_log,
)
from .training import train
from .weaklearn import CandidateSet, round_report, weak_learn, write_report

OUT_ENV = "FORWARDNAS_OUT"
CANDIDATES_FILE = "candidates.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(args, default="runs"):
    return args.out or os.environ.get(OUT_ENV) or default


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig().validate()


def _skeleton(cfg: RunConfig, data) -> Skeleton:
    return Skeleton(cfg.skeleton_kind, cfg.skeleton.n_cells, cfg.skeleton.filters, cfg.skeleton.stages,
                    data.input_shape, data.num_classes)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# -- subcommands ------------------------------------------------------------------


def cmd_seed(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    graph, params, genotype = seed_model(_skeleton(cfg, data), cfg.mode, cfg.merge_variant, seed=cfg.seed)
    if cfg.epochs.seed:
        params = train(graph, params, data.X_train, data.y_train, cfg.epochs.seed, cfg.lr0, cfg.batch_size,
                       np.random.default_rng([cfg.seed, 0]), cfg.weight_decay).params
    out = _out_dir(args)
    entry = save_checkpoint(graph, params, genotype, out)
    _emit({"checkpoint": out, "cost": cost(graph, params=params), "param_count": entry["param_count"],
           "val_error": evaluate(graph, params, data.X_val, data.y_val)})


def cmd_search(args):
    cfg = _config(args)
    out = _out_dir(args)
    state = search_loop(cfg, out, workers=args.workers)
    best = min(state.hull, key=lambda m: state.records[m].val_error)
    _emit({"out": out, "models": len(state.records), "hull": state.hull, "best": best,
           "best_val_error": state.records[best].val_error})


def cmd_grow(args):
    """Attach candidates and weak-learn; writes an augmented checkpoint."""
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    graph, params, genotype = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng([cfg.seed, args.round])
    g_aug, p_aug, cands, penalty = attach_candidates(graph, params, cfg, rng)
    res = weak_learn(g_aug, p_aug, cands, data.X_train, data.y_train, cfg.epochs.weak, cfg.lr0, cfg.batch_size,
                     rng, cfg.weight_decay, penalty=penalty)
    out = _out_dir(args)
    save_checkpoint(g_aug, res.params, genotype, out)
    write_json(os.path.join(out, CANDIDATES_FILE), {"candidates": [c.to_dict() for c in cands]})
    report = os.path.join(out, "candidates.jsonl")
    open(report, "w").close()
    write_report(round_report(cands, res.params, cfg.I_max, args.round), report)
    _emit({"checkpoint": out, "candidates": len(cands), "objective": res.epoch_objective[-1:] or None})


def cmd_finalize(args):
    """Select the top shortcuts of an augmented checkpoint, merge them, then optionally train."""
    cfg = _config(args)
    graph, params, genotype = load_checkpoint(args.checkpoint)
    with open(os.path.join(args.checkpoint, CANDIDATES_FILE), encoding="utf-8") as fh:
        cands = [CandidateSet.from_dict(d) for d in json.load(fh)["candidates"]]
    rng = np.random.default_rng([cfg.seed, args.round, 1])
    graph, params, genotype = finalize_and_tie(graph, params, genotype, cands, cfg, rng)
    if args.for_final_training:
        genotype = genotype.for_final_training()
        graph, params = build_model(genotype, seed=cfg.seed)
    epochs = cfg.epochs.child if args.train_epochs is None else args.train_epochs
    if epochs:
        data = load_dataset(cfg.dataset)
        params = train(graph, params, data.X_train, data.y_train, epochs, cfg.lr0, cfg.batch_size, rng,
                       cfg.weight_decay).params
    out = _out_dir(args)
    entry = save_checkpoint(graph, params, genotype, out)
    _emit({"checkpoint": out, "patterns": genotype.pattern_count(), "param_count": entry["param_count"],
           "cost": cost(graph, params=params)})


def cmd_eval(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    graph, params, genotype = load_checkpoint(args.checkpoint)
    _emit({"val_error": evaluate(graph, params, data.X_val, data.y_val), "cost": cost(graph, params=params),
           "param_count": params.count(), "patterns": genotype.pattern_count()})


def _hull_rows(state: SearchState):
    return [[m, state.records[m].cost, state.records[m].param_count, repr(state.records[m].val_error)]
            for m in state.hull]


def cmd_hull(args):
    state = state_from_log(args.log)
    if not state.hull:
        print("no evaluated models", file=sys.stderr)
        return 0
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["model_id", "cost", "params", "val_error"])
    w.writerows(_hull_rows(state))


def cmd_export_dot(args):
    graph, _, _ = load_checkpoint(args.checkpoint)
    text = to_dot(graph)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def plot_series(state: SearchState):
    """Scatter of every evaluated model and the cost-sorted hull polyline."""
    evaluated = sorted(state.evaluated(), key=lambda r: r.model_id)
    scatter = [{"model_id": r.model_id, "cost": r.cost, "val_error": r.val_error} for r in evaluated]
    hull = [{"model_id": m, "cost": state.records[m].cost, "val_error": state.records[m].val_error}
            for m in state.hull]
    return {"scatter": scatter, "hull": hull, "excluded": len(state.records) - len(evaluated)}


def cmd_plot_data(args):
    state = state_from_log(args.log)
    series = plot_series(state)
    print(f"{len(series['scatter'])} evaluated models, {series['excluded']} without val_error excluded",
          file=sys.stderr)
    if not series["scatter"]:
        print("warning: no evaluated models; series are empty", file=sys.stderr)
    out = _out_dir(args, default=".")
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "plot_data.json"), series)
    for name in ("scatter", "hull"):
        with open(os.path.join(out, f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "cost", "val_error"])
            w.writerows([[p["model_id"], p["cost"], repr(p["val_error"])] for p in series[name]])
    _emit({"out": out, "scatter": len(series["scatter"]), "hull": len(series["hull"])})


def cmd_fslr(args):
    X = read_matrix_csv(args.design)
    y = read_matrix_csv(args.target).ravel()
    path = fslr_run(X, y, args.step, args.iters, standardize=not args.no_standardize)
    out = args.out or os.path.join(_out_dir(args, default="."), "fslr_path.csv")
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    path.to_csv(out)
    ls = least_squares_residual(X, y, standardize=not args.no_standardize)
    _emit({"path": out, "residual_norm": path.residual_norm, "least_squares_residual": ls,
           "coefficients": path.coefficients.tolist()})


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="forwardnas", description="Forward architecture search by boosting shortcut weak learners.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, config=True, out=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="run config JSON (defaults when omitted)")
        if out:
            sp.add_argument("--out", help=f"output location (default: ${OUT_ENV} or a subcommand default)")
        sp.set_defaults(fn=fn)
        return sp

    add("seed", cmd_seed, "build and train the seed model")
    sp = add("search", cmd_search, "run the full growth search")
    sp.add_argument("--workers", type=int, help="override the configured worker count")
    sp = add("grow", cmd_grow, "attach candidates to a checkpoint and weak-learn them")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--round", type=int, default=1)
    sp = add("finalize", cmd_finalize, "finalize the weak learners of an augmented checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--round", type=int, default=1)
    sp.add_argument("--train-epochs", type=int, help="child training epochs (default: config)")
    sp.add_argument("--for-final-training", action="store_true",
                    help="rebuild from the genotype with final-training merges and fresh weights")
    sp = add("eval", cmd_eval, "validation error, cost and size of a checkpoint", out=False)
    sp.add_argument("--checkpoint", required=True)
    sp = add("hull", cmd_hull, "print the hull table from a search log", config=False, out=False)
    sp.add_argument("--log", required=True)
    sp = add("export-dot", cmd_export_dot, "write a checkpoint's graph as Graphviz DOT", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp = add("plot-data", cmd_plot_data, "scatter and hull series from a search log", config=False)
    sp.add_argument("--log", required=True)
    sp = add("fslr", cmd_fslr, "forward-stagewise linear regression path", config=False)
    sp.add_argument("--design", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--step", type=float, default=0.01)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--no-standardize", action="store_true")
    return p


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = args.fn(args)
    except ConfigError as exc:
        return _fail(3, "config", str(exc))
    except Exception as exc:
        return _fail(1, type(exc).__name__, str(exc))
    return int(rc or 0)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
