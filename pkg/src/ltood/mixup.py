"""Subset-targeted mixup: strategies, pair sampling and the mixed CE loss."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _backend
from .dataset import Dataset, SubsetPartition
from .errors import ConfigError, NumericError, StrategyError


class MixupStrategy(enum.Enum):
    STANDARD = "standard"
    MX1 = "mx1"  # head-head
    MX2 = "mx2"  # middle-middle
    MX3 = "mx3"  # tail-tail
    MX4 = "mx4"  # head-middle
    MX5 = "mx5"  # middle-tail
    MX6 = "mx6"  # head-tail

    @classmethod
    def parse(cls, name) -> "MixupStrategy | None":
        if name is None or isinstance(name, cls):
            return name
        if str(name).lower() == "none":
            return None
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown mixup strategy {name!r}; expected none or one of {valid}") from None

    @property
    def subsets(self) -> tuple[str, str]:
        return _SUBSETS[self]

    @property
    def intra(self) -> bool:
        a, b = self.subsets
        return a == b


_SUBSETS = {
    MixupStrategy.STANDARD: ("all", "all"),
    MixupStrategy.MX1: ("head", "head"),
    MixupStrategy.MX2: ("middle", "middle"),
    MixupStrategy.MX3: ("tail", "tail"),
    MixupStrategy.MX4: ("head", "middle"),
    MixupStrategy.MX5: ("middle", "tail"),
    MixupStrategy.MX6: ("head", "tail"),
}


@dataclass
class MixupPair:
    x_i: np.ndarray
    x_j: np.ndarray
    y_i: int
    y_j: int
    lam: float

    @property
    def mixed_input(self) -> np.ndarray:
        return self.lam * self.x_i + (1.0 - self.lam) * self.x_j


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Draw mixing weights from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ConfigError(f"mixup alpha must be positive, got {alpha}")
    return rng.beta(alpha, alpha, size=size)


class PairSampler:
    """Class-uniform pair sampler for one strategy over a training set.

    Classes are drawn uniformly within each role's subset (not in proportion
    to their sample counts), then one sample uniformly within each class.
    """

    def __init__(self, train: Dataset, partition: SubsetPartition, strategy: MixupStrategy):
        self.train = train
        self.strategy = strategy
        by_class = train.class_indices()
        self._members = by_class
        pools = []
        for role in strategy.subsets:
            if role == "all":
                pool = range(train.class_count)
            else:
                pool = sorted(getattr(partition, role))
            pool = np.array([c for c in pool if len(by_class[c]) > 0], dtype=np.int64)
            if len(pool) < 1:
                raise StrategyError(f"strategy {strategy.value}: {role} subset has no classes with training samples")
            pools.append(pool)
        if strategy.intra and len(pools[0]) < 2:
            raise StrategyError(
                f"strategy {strategy.value} needs at least 2 classes in the "
                f"{strategy.subsets[0]} subset, found {len(pools[0])}"
            )
        self.pools = pools

    def sample_classes(self, n: int, rng: np.random.Generator):
        first, second = self.pools
        ci = first[rng.integers(len(first), size=n)]
        cj = second[rng.integers(len(second), size=n)]
        clash = np.flatnonzero(ci == cj)
        while clash.size:
            cj[clash] = second[rng.integers(len(second), size=clash.size)]
            clash = clash[ci[clash] == cj[clash]]
        return ci, cj

    def _pick(self, classes, rng):
        out = np.empty(len(classes), dtype=np.int64)
        for t, c in enumerate(classes):
            members = self._members[c]
            out[t] = members[rng.integers(len(members))]
        return out

    def sample(self, n: int, alpha: float, rng: np.random.Generator):
        """Return ``(x_i, x_j, y_i, y_j, lam)`` arrays for ``n`` pairs."""
        ci, cj = self.sample_classes(n, rng)
        ii = self._pick(ci, rng)
        jj = self._pick(cj, rng)
        lam = sample_lambda(alpha, rng, size=n)
        X = self.train.features
        return X[ii], X[jj], ci, cj, lam


def sample_pair(train: Dataset, partition: SubsetPartition, strategy: MixupStrategy,
                alpha: float, rng: np.random.Generator) -> MixupPair:
    xi, xj, yi, yj, lam = PairSampler(train, partition, strategy).sample(1, alpha, rng)
    return MixupPair(xi[0], xj[0], int(yi[0]), int(yj[0]), float(lam[0]))


def mix_inputs(x_i, x_j, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    return lam * x_i + (1.0 - lam) * x_j


def mixup_ce_rows(logits, y_i, y_j, lam, row_weights=None):
    """Batched mixed cross-entropy: per-row losses and weighted logit gradients."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    B = logits.shape[0]
    y_i = np.ascontiguousarray(y_i, dtype=np.int64)
    y_j = np.ascontiguousarray(y_j, dtype=np.int64)
    lam = np.ascontiguousarray(np.broadcast_to(lam, (B,)), dtype=np.float64)
    w = np.ones(B) if row_weights is None else np.ascontiguousarray(row_weights, dtype=np.float64)
    return _backend.kernels.xent_rows(logits, y_i, y_j, lam, w)


def mixup_ce_loss(logits, y_i: int, y_j: int, lam: float) -> float:
    """``lam * CE(logits, y_i) + (1 - lam) * CE(logits, y_j)`` for one mixed sample."""
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    loss, _ = mixup_ce_rows(z, [y_i], [y_j], lam)
    return float(loss[0])


def cross_entropy(logits, y: int) -> float:
    return mixup_ce_loss(logits, y, y, 1.0)
