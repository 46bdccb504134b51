"""Long-tailed synthetic data, CSV ingestion, H/M/T partitions and splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, PartitionError, SplitError

OOD_LABEL = -1


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64; OOD_LABEL for OOD samples
    class_count: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ParseError(f"features {feats.shape} and labels {labels.shape} disagree")
        if not np.isfinite(feats).all():
            raise ParseError("features must be finite")
        id_mask = labels != OOD_LABEL
        if id_mask.any() and (labels[id_mask].min() < 0 or labels[id_mask].max() >= self.class_count):
            raise ParseError(f"labels must lie in [0, {self.class_count})")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def counts(self) -> np.ndarray:
        ids = self.labels[self.labels != OOD_LABEL]
        return np.bincount(ids, minlength=self.class_count)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.class_count)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


# -- synthetic generation -----------------------------------------------------

@dataclass
class SyntheticConfig:
    num_id_classes: int = 20
    num_ood_classes: int = 5
    feature_dim: int = 16
    superclass_count: int = 4
    superclass_scale: float = 2.4
    subcluster_spread: float = 1.6
    noise_scale: float = 0.4
    max_class_count: int = 1500
    powerlaw_exponent: float = 1.2
    ood_samples_per_class: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.num_id_classes < 3:
            raise ConfigError("num_id_classes must be >= 3")
        for name in ("num_ood_classes", "feature_dim", "superclass_count", "max_class_count",
                     "ood_samples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("superclass_scale", "noise_scale", "powerlaw_exponent"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.subcluster_spread < self.superclass_scale:
            raise ConfigError("subcluster_spread must be in [0, superclass_scale)")


def powerlaw_counts(n_max: int, exponent: float, num_classes: int) -> list[int]:
    """Class k (0-based rank) gets ``round(n_max * (k + 1) ** -exponent)`` samples."""
    return [int(math.floor(n_max * (k + 1) ** -exponent + 0.5)) for k in range(num_classes)]


def _cluster_centers(rng, cfg, n):
    sup = np.arange(n) % cfg.superclass_count
    offsets = rng.normal(size=(n, cfg.feature_dim))
    offsets *= cfg.subcluster_spread / np.sqrt(cfg.feature_dim)
    return sup, offsets


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Return ``(id_dataset, ood_dataset)`` for a long-tailed, fine-grained problem.

    Classes are isotropic Gaussian clusters. Each class (ID or OOD) sits at an
    offset of norm roughly ``subcluster_spread`` from one of
    ``superclass_count`` superclass centers, assigned round-robin, so OOD
    classes are unseen neighbours of ID classes rather than a different domain.
    """
    cfg.validate()
    counts = powerlaw_counts(cfg.max_class_count, cfg.powerlaw_exponent, cfg.num_id_classes)
    if min(counts) < 5:
        raise ConfigError(
            f"smallest class gets {min(counts)} < 5 samples; increase max_class_count "
            "or decrease powerlaw_exponent"
        )
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    sup_centers = rng.normal(size=(cfg.superclass_count, D)) * cfg.superclass_scale / np.sqrt(D)
    n_total = cfg.num_id_classes + cfg.num_ood_classes
    sup, offsets = _cluster_centers(rng, cfg, n_total)
    centers = sup_centers[sup] + offsets

    def draw(class_ids, sizes):
        feats = [centers[c] + cfg.noise_scale * rng.normal(size=(s, D)) for c, s in zip(class_ids, sizes)]
        return np.concatenate(feats)

    id_feats = draw(range(cfg.num_id_classes), counts)
    id_labels = np.repeat(np.arange(cfg.num_id_classes), counts)
    ood_ids = range(cfg.num_id_classes, n_total)
    ood_feats = draw(ood_ids, [cfg.ood_samples_per_class] * cfg.num_ood_classes)
    ood_labels = np.full(len(ood_feats), OOD_LABEL)
    return (
        Dataset(id_feats, id_labels, cfg.num_id_classes),
        Dataset(ood_feats, ood_labels, cfg.num_id_classes),
    )


# -- partitions ---------------------------------------------------------------

@dataclass(frozen=True)
class SubsetPartition:
    head: frozenset
    middle: frozenset
    tail: frozenset
    tail_max: float
    head_min: float
    mode: str = "absolute"

    def subset_of(self, cls: int) -> str:
        if cls in self.head:
            return "head"
        if cls in self.middle:
            return "middle"
        if cls in self.tail:
            return "tail"
        raise KeyError(cls)

    def membership(self, num_classes: int) -> np.ndarray:
        """Array mapping class id to 0 (head), 1 (middle) or 2 (tail)."""
        out = np.empty(num_classes, dtype=np.int64)
        for k in range(num_classes):
            out[k] = ("head", "middle", "tail").index(self.subset_of(k))
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "tail_max": self.tail_max,
            "head_min": self.head_min,
            "head": sorted(self.head),
            "middle": sorted(self.middle),
            "tail": sorted(self.tail),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetPartition":
        return cls(frozenset(d["head"]), frozenset(d["middle"]), frozenset(d["tail"]),
                   d["tail_max"], d["head_min"], d.get("mode", "absolute"))


def partition_classes(counts, tail_max=500, head_min=10000, mode="absolute") -> SubsetPartition:
    """Head: count > head_min. Tail: count < tail_max. Middle: the closed range between."""
    counts = [int(c) for c in counts]
    if not counts:
        raise PartitionError("no classes to partition")
    if tail_max > head_min:
        raise PartitionError(f"tail_max {tail_max} exceeds head_min {head_min}")
    head = frozenset(k for k, c in enumerate(counts) if c > head_min)
    tail = frozenset(k for k, c in enumerate(counts) if c < tail_max)
    middle = frozenset(range(len(counts))) - head - tail
    for name, members in (("head", head), ("middle", middle), ("tail", tail)):
        if not members:
            raise PartitionError(f"{name} subset is empty with thresholds ({tail_max}, {head_min})")
    return SubsetPartition(head, middle, tail, tail_max, head_min, mode)


def quantile_thresholds(counts, head_fraction=0.2, tail_fraction=0.5) -> tuple[int, int]:
    """Thresholds putting the top ``head_fraction`` of classes in the head and
    the bottom ``tail_fraction`` in the tail (exact when counts are distinct)."""
    ordered = sorted((int(c) for c in counts), reverse=True)
    M = len(ordered)
    n_head = max(1, int(math.floor(head_fraction * M + 0.5)))
    n_tail = max(1, int(math.floor(tail_fraction * M + 0.5)))
    if n_head + n_tail >= M:
        raise PartitionError(f"{M} classes cannot hold {n_head} head and {n_tail} tail classes plus a middle")
    head_min = ordered[n_head]
    tail_max = ordered[M - n_tail - 1]
    return tail_max, head_min


def partition_quantile(counts, head_fraction=0.2, tail_fraction=0.5) -> SubsetPartition:
    tail_max, head_min = quantile_thresholds(counts, head_fraction, tail_fraction)
    return partition_classes(counts, tail_max, head_min, mode="quantile")


# -- splitting ----------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, test_fraction=0.15, val_fraction=0.2) -> tuple[int, int, int]:
    """``(train, val, test)`` sizes for a class of ``n`` samples, each at least 1."""
    if n < 3:
        raise SplitError(f"{n} samples cannot fill train, val and test")
    test = min(max(1, _round_half_up(test_fraction * n)), n - 2)
    rest = n - test
    val = min(max(1, _round_half_up(val_fraction * rest)), rest - 1)
    return rest - val, val, test


def _stable_order(features: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # lexsort keys are last-to-first; sort rows by all columns so the result
    # does not depend on input order
    keys = features[idx].T[::-1]
    return idx[np.lexsort(keys)]


def split_dataset(ds: Dataset, seed=0, test_fraction=0.15, val_fraction=0.2):
    """Stratified train/val/test split; returns three Datasets."""
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for k, idx in enumerate(ds.class_indices()):
        n = len(idx)
        if n == 0:
            continue
        try:
            n_train, n_val, _ = split_sizes(n, test_fraction, val_fraction)
        except SplitError as exc:
            raise SplitError(f"class {k}: {exc}") from None
        order = _stable_order(ds.features, idx)
        order = order[rng.permutation(n)]
        parts["train"].append(order[:n_train])
        parts["val"].append(order[n_train:n_train + n_val])
        parts["test"].append(order[n_train + n_val:])
    return tuple(ds.subset(np.sort(np.concatenate(parts[name]))) for name in ("train", "val", "test"))


# -- CSV ----------------------------------------------------------------------

ROLES = ("id-train", "id-eval", "ood-eval")


def write_csv(ds: Dataset, path) -> Path:
    """One row per sample: features (shortest round-trip repr) then label."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for row, lab in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write(f",{int(lab)}\n")
    return path


def load_csv(path, role="id-train", class_count: int | None = None) -> Dataset:
    """Parse a features-then-label CSV.

    ``class_count`` fixes M for evaluation files; without it M is one more
    than the largest label. Labels in the ``ood-eval`` role are ignored.
    """
    if role not in ROLES:
        raise ParseError(f"unknown role {role!r}; expected one of {ROLES}")
    rows, labels = [], []
    width = None
    try:
        fh = open(path)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise ParseError(f"{path}:{lineno}: need at least one feature and a label")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
            try:
                feats = [float(c) for c in cells[:-1]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric feature cell") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(f"{path}:{lineno}: non-finite feature")
            lab_cell = cells[-1].strip()
            if role == "ood-eval":
                lab = OOD_LABEL
            else:
                try:
                    lab = int(lab_cell)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: label {lab_cell!r} is not an integer") from None
                if lab < 0 or (class_count is not None and lab >= class_count):
                    raise ParseError(f"{path}:{lineno}: unknown label {lab}")
            rows.append(feats)
            labels.append(lab)
    if not rows:
        raise ParseError(f"{path}: no samples")
    if class_count is None:
        class_count = max(labels) + 1 if role != "ood-eval" else 0
    return Dataset(np.array(rows), np.array(labels), class_count)
