"""Experiment configuration: one YAML document per experiment.

Top-level sections (all optional except one dataset source)::

    data:
      synthetic: {num_id_classes: 20, ...}     # or
      csv: {train: a.csv, val: b.csv, test: c.csv, ood: {name: d.csv}}
      vary_with_seed: true                     # synthetic data seed += run seed
    partition: {mode: quantile, tail_max: 500, head_min: 10000,
                head_fraction: 0.2, tail_fraction: 0.5}
    method: {head_type: softmax, mixup_strategy: none, ...}
    eval: {checkpoint: best, score: softmax, bins: 20}
    output: runs
    seeds: [0, 1, 2, 3, 4]
    jobs: 1
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataset import (Dataset, SyntheticConfig, generate_synthetic, load_csv, partition_classes,
                      partition_quantile, split_dataset)
from .errors import ConfigError
from .trainer import MethodConfig

PARTITION_DEFAULTS = {"mode": "quantile", "tail_max": 500, "head_min": 10000,
                      "head_fraction": 0.2, "tail_fraction": 0.5}
EVAL_DEFAULTS = {"checkpoint": "best", "score": "softmax", "bins": 20}
TOP_KEYS = {"data", "partition", "method", "eval", "output", "seeds", "jobs"}


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig | None = None
    csv: dict | None = None
    vary_with_seed: bool = True
    partition: dict = field(default_factory=lambda: dict(PARTITION_DEFAULTS))
    method: MethodConfig = field(default_factory=MethodConfig)
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    output: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    jobs: int = 1

    def to_dict(self) -> dict:
        data = {"vary_with_seed": self.vary_with_seed}
        if self.synthetic is not None:
            data["synthetic"] = asdict(self.synthetic)
        else:
            data["csv"] = copy.deepcopy(self.csv)
        return {
            "data": data, "partition": dict(self.partition), "method": self.method.to_dict(),
            "eval": dict(self.eval), "output": self.output, "seeds": list(self.seeds), "jobs": self.jobs,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_method(self, **overrides) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        new.method = MethodConfig.from_dict({**self.method.to_dict(), **overrides})
        return new

    def data_digest(self) -> str:
        d = self.to_dict()
        key = {"data": d["data"], "partition": d["partition"], "eval": d["eval"]}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:10]


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    data = raw.get("data")
    if not isinstance(data, dict):
        raise ConfigError("missing required field: data")
    has_syn, has_csv = "synthetic" in data, "csv" in data
    if has_syn == has_csv:
        raise ConfigError("data must have exactly one of: synthetic, csv")
    exp = ExperimentConfig(vary_with_seed=bool(data.get("vary_with_seed", True)))
    if has_syn:
        exp.synthetic = SyntheticConfig.from_dict(data["synthetic"] or {})
        exp.synthetic.validate()
    else:
        csv = dict(data["csv"] or {})
        for key in ("train", "val", "test"):
            if key not in csv:
                raise ConfigError(f"missing required field: data.csv.{key}")
        csv["ood"] = dict(csv.get("ood") or {})
        if base_dir is not None:
            resolve = lambda p: str((base_dir / p).resolve()) if not Path(p).is_absolute() else p  # noqa: E731
            for key in ("train", "val", "test"):
                csv[key] = resolve(csv[key])
            csv["ood"] = {k: resolve(v) for k, v in csv["ood"].items()}
        exp.csv = csv
    part = {**PARTITION_DEFAULTS, **(raw.get("partition") or {})}
    if set(part) - set(PARTITION_DEFAULTS):
        raise ConfigError(f"unknown partition keys: {sorted(set(part) - set(PARTITION_DEFAULTS))}")
    if part["mode"] not in ("quantile", "absolute"):
        raise ConfigError("partition.mode must be quantile or absolute")
    exp.partition = part
    exp.method = MethodConfig.from_dict(raw.get("method") or {})
    ev = {**EVAL_DEFAULTS, **(raw.get("eval") or {})}
    if ev["checkpoint"] not in ("best", "final"):
        raise ConfigError("eval.checkpoint must be best or final")
    if ev["score"] not in ("softmax", "neg-min-distance"):
        raise ConfigError("eval.score must be softmax or neg-min-distance")
    exp.eval = ev
    exp.output = str(raw.get("output", "runs"))
    seeds = raw.get("seeds", [exp.method.seed])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a nonempty list of integers")
    exp.seeds = seeds
    exp.jobs = int(raw.get("jobs", 1))
    return exp


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"config {path} does not parse{where}: {exc}") from exc
    try:
        return from_dict(raw, path.parent)
    except TypeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


@dataclass
class ExperimentData:
    train: Dataset
    val: Dataset
    test: Dataset
    ood: dict[str, Dataset]
    partition: object


def make_partition(exp: ExperimentConfig, counts):
    p = exp.partition
    if p["mode"] == "quantile":
        return partition_quantile(counts, p["head_fraction"], p["tail_fraction"])
    return partition_classes(counts, p["tail_max"], p["head_min"])


def synthetic_for_seed(exp: ExperimentConfig, seed: int) -> SyntheticConfig:
    syn = copy.deepcopy(exp.synthetic)
    if exp.vary_with_seed:
        syn.seed = syn.seed + seed
    return syn


def build_data(exp: ExperimentConfig, seed: int = 0) -> ExperimentData:
    """Materialize splits, OOD sources and the partition for one run seed."""
    if exp.synthetic is not None:
        syn = synthetic_for_seed(exp, seed)
        id_ds, ood_ds = generate_synthetic(syn)
        partition = make_partition(exp, id_ds.counts)
        train, val, test = split_dataset(id_ds, seed=syn.seed)
        return ExperimentData(train, val, test, {"ood": ood_ds}, partition)
    c = exp.csv
    train = load_csv(c["train"], "id-train")
    M = train.class_count
    val = load_csv(c["val"], "id-eval", class_count=M)
    test = load_csv(c["test"], "id-eval", class_count=M)
    ood = {name: load_csv(p, "ood-eval") for name, p in c["ood"].items()}
    for name, ds in [("val", val), ("test", test), *ood.items()]:
        if ds.feature_dim != train.feature_dim:
            raise ConfigError(f"{name} has {ds.feature_dim} features, train has {train.feature_dim}")
    partition = make_partition(exp, train.counts + val.counts + test.counts)
    return ExperimentData(train, val, test, ood, partition)
