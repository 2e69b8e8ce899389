"""Serializable architecture description: skeleton plus grown shortcut patterns."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

GENOTYPE_SCHEMA = "forwardnas.genotype/1"
MERGE_VARIANTS = ("cp-each", "cp-end", "ws")
MODES = ("cell", "macro")


@dataclass(frozen=True)
class Skeleton:
    kind: str = "toy"  # "toy" (feature vectors) or "image" (C, H, W)
    n_cells: int = 1  # normal cells per stage
    filters: int = 16
    stages: int = 1
    input_shape: tuple = (2,)
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("toy", "image"):
            raise ValueError(f"skeleton kind must be 'toy' or 'image', got {self.kind!r}")
        if self.n_cells < 1 or self.filters < 1 or self.stages < 1:
            raise ValueError(f"invalid skeleton: N={self.n_cells}, F={self.filters}, stages={self.stages}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        shape = tuple(int(s) for s in self.input_shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"invalid input shape {shape}")
        if self.kind == "toy" and len(shape) != 1:
            raise ValueError("toy skeletons take (D,) inputs")
        if self.kind == "image" and len(shape) != 3:
            raise ValueError("image skeletons take (C, H, W) inputs")
        object.__setattr__(self, "input_shape", shape)

    @property
    def normal_count(self) -> int:
        return self.n_cells * self.stages

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class Shortcut:
    source: str  # layer tag inside the cell
    op: str
    weight: float = 1.0  # |alpha| ranking value; the merge weight for ws

    def to_dict(self):
        return {"source": self.source, "op": self.op, "weight": self.weight}


@dataclass
class Pattern:
    """One finalized weak learner: merged shortcuts added onto ``target``."""

    target: str
    name: str
    shortcuts: list[Shortcut]
    merge: str = "cp-each"

    def __post_init__(self):
        pairs = [(s.source, s.op) for s in self.shortcuts]
        if len(set(pairs)) != len(pairs):
            raise ValueError(f"pattern {self.name} repeats a (source, op) shortcut")

    def triples(self):
        return [(s.source, self.target, s.op) for s in self.shortcuts]

    def to_dict(self):
        return {
            "target": self.target,
            "name": self.name,
            "merge": self.merge,
            "shortcuts": [s.to_dict() for s in self.shortcuts],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["target"], d["name"], [Shortcut(**s) for s in d["shortcuts"]], d.get("merge", "cp-each"))


@dataclass
class CellDescriptor:
    patterns: list[Pattern] = field(default_factory=list)

    def to_dict(self):
        return {"patterns": [p.to_dict() for p in self.patterns]}

    @classmethod
    def from_dict(cls, d):
        return cls([Pattern.from_dict(p) for p in d.get("patterns", [])])

    def triples(self):
        return [t for p in self.patterns for t in p.triples()]


@dataclass
class Genotype:
    skeleton: Skeleton
    mode: str = "macro"
    merge: str = "cp-each"
    cells: list[CellDescriptor] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.merge not in MERGE_VARIANTS:
            raise ValueError(f"merge variant must be one of {MERGE_VARIANTS}, got {self.merge!r}")
        if not self.cells:
            self.cells = [CellDescriptor() for _ in range(self.skeleton.normal_count)]
        if len(self.cells) != self.skeleton.normal_count:
            raise ValueError(f"expected {self.skeleton.normal_count} cell descriptors, got {len(self.cells)}")

    @property
    def growth_rounds(self) -> int:
        return max((len(c.patterns) for c in self.cells), default=0)

    def pattern_count(self) -> int:
        return sum(len(c.patterns) for c in self.cells)

    def copy(self) -> "Genotype":
        return Genotype.from_dict(self.to_dict())

    def to_dict(self):
        return {
            "schema": GENOTYPE_SCHEMA,
            "mode": self.mode,
            "merge": self.merge,
            "skeleton": self.skeleton.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != GENOTYPE_SCHEMA:
            raise ValueError(f"unsupported genotype schema {d.get('schema')!r}")
        return cls(
            skeleton=Skeleton(**d["skeleton"]),
            mode=d["mode"],
            merge=d["merge"],
            cells=[CellDescriptor.from_dict(c) for c in d["cells"]],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def for_final_training(self) -> "Genotype":
        """CP-end switches every weighted-sum merge to concat-projection."""
        g = self.copy()
        if g.merge == "cp-end":
            for cell in g.cells:
                for p in cell.patterns:
                    p.merge = "cp-each"
            g.merge = "cp-each"
        return g
