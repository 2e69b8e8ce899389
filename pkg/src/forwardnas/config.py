"""Run configuration: parsing, validation and round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .builder import OPSETS
from .data import DatasetSpec
from .genotype import MERGE_VARIANTS, MODES

CONFIG_SCHEMA = "forwardnas.config/1"


class ConfigError(ValueError):
    """Raised for unknown keys or out-of-range values."""


@dataclass(frozen=True)
class SkeletonConfig:
    n_cells: int = 1
    filters: int = 16
    stages: int = 1


@dataclass(frozen=True)
class EpochConfig:
    seed: int = 20  # initial training of the seed model
    weak: int = 20  # weak learning per growth iteration
    child: int = 20  # training after finalization


@dataclass(frozen=True)
class RunConfig:
    mode: str = "macro"
    opset: str = "toy"
    I_max: int = 3
    lambda_: float = 0.001
    merge_variant: str = "cp-each"
    isolated: bool = True
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    lr0: float = 0.05
    batch_size: int = 64
    weight_decay: float = 1e-4
    growth_iterations: int = 8
    workers: int = 1
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    cost_budget: float | None = None
    amortization_bound: float = 10.0

    def validate(self) -> "RunConfig":
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.opset not in OPSETS:
            problems.append(f"opset must be one of {sorted(OPSETS)}")
        if self.merge_variant not in MERGE_VARIANTS:
            problems.append(f"merge_variant must be one of {MERGE_VARIANTS}")
        if self.I_max < 1:
            problems.append("I_max must be >= 1")
        if self.lambda_ < 0:
            problems.append("lambda must be >= 0")
        if min(self.skeleton.n_cells, self.skeleton.filters, self.skeleton.stages) < 1:
            problems.append("skeleton entries must be >= 1")
        if min(self.epochs.seed, self.epochs.weak, self.epochs.child) < 0:
            problems.append("epoch counts must be >= 0")
        if not self.lr0 > 0:
            problems.append("lr0 must be > 0")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.growth_iterations < 0:
            problems.append("growth_iterations must be >= 0")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.cost_budget is not None and not self.cost_budget > 0:
            problems.append("cost_budget must be > 0")
        if not self.amortization_bound > 0:
            problems.append("amortization_bound must be > 0")
        image_data = self.dataset.kind == "tiny-image-file"
        if image_data != (self.opset == "image"):
            problems.append("the image opset goes with tiny-image-file data and only with it")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def skeleton_kind(self) -> str:
        return "image" if self.opset == "image" else "toy"

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["schema"] = CONFIG_SCHEMA
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        nested = {"skeleton": SkeletonConfig, "epochs": EpochConfig, "dataset": DatasetSpec}
        kwargs = _checked(cls, d, "config")
        for key, typ in nested.items():
            if key in kwargs:
                if not isinstance(kwargs[key], dict):
                    raise ConfigError(f"{key} must be an object")
                try:
                    kwargs[key] = typ(**_checked(typ, kwargs[key], key))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        try:
            return cls(**kwargs).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _checked(typ, d, where):
    known = {f.name for f in fields(typ)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    return dict(d)
