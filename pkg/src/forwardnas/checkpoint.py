"""Checkpoints: a directory holding graph JSON, binary parameters and the genotype."""

from __future__ import annotations

import hashlib
import json
import os

from .genotype import Genotype
from .graphcore import ComputationGraph, ParameterStore, SerializationError

GRAPH_FILE = "graph.json"
PARAMS_FILE = "params.bin"
GENOTYPE_FILE = "genotype.json"
_FILES = (GRAPH_FILE, PARAMS_FILE, GENOTYPE_FILE)


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def checkpoint_blobs(graph: ComputationGraph, params: ParameterStore, genotype: Genotype) -> dict[str, bytes]:
    return {
        GRAPH_FILE: graph.to_json().encode("utf-8"),
        PARAMS_FILE: params.to_bytes(),
        GENOTYPE_FILE: genotype.to_json().encode("utf-8"),
    }


def save_checkpoint(graph, params, genotype, path) -> dict:
    """Write the three files under ``path``; returns a manifest entry."""
    os.makedirs(path, exist_ok=True)
    blobs = checkpoint_blobs(graph, params, genotype)
    for name, data in blobs.items():
        with open(os.path.join(path, name), "wb") as fh:
            fh.write(data)
    return {
        "path": os.fspath(path),
        "param_count": params.count(),
        "sha256": {name: _sha(data) for name, data in blobs.items()},
    }


def load_checkpoint(path):
    """``(graph, params, genotype)``; any unreadable file fails the whole load."""
    blobs = {}
    for name in _FILES:
        full = os.path.join(path, name)
        if not os.path.exists(full):
            raise SerializationError(f"checkpoint {path} is missing {name}")
        with open(full, "rb") as fh:
            blobs[name] = fh.read()
    params = ParameterStore.from_bytes(blobs[PARAMS_FILE])
    try:
        graph = ComputationGraph.from_json(blobs[GRAPH_FILE].decode("utf-8"))
        genotype = Genotype.from_json(blobs[GENOTYPE_FILE].decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise SerializationError(f"corrupt checkpoint {path}: {exc}") from exc
    missing = [k for k in graph.param_keys() if k not in params]
    if missing:
        raise SerializationError(f"checkpoint {path} lacks parameters {missing[:3]}")
    return graph, params, genotype


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")
