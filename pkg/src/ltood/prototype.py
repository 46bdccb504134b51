"""Per-class prototypes and distance-based losses, plain and mixup-weighted."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DimensionError, InitError


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (M, embedding_dim), trained alongside the encoder
    gamma: float = 1.0  # distance temperature
    w_mse: float = 0.01

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise DimensionError("prototypes must be a (classes, embedding_dim) matrix")
        if not self.gamma > 0 or self.w_mse < 0:
            raise ValueError("gamma must be positive and w_mse non-negative")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.prototypes.shape[1]


def _as_rows(f, bank):
    f = np.ascontiguousarray(np.atleast_2d(f), dtype=np.float64)
    if f.shape[1] != bank.embedding_dim:
        raise DimensionError(f"feature width {f.shape[1]} != prototype width {bank.embedding_dim}")
    return f


def squared_distances(f, bank: PrototypeBank) -> np.ndarray:
    """``||f - p_k||^2`` for every prototype; shape (M,) for one feature or (B, M)."""
    rows = _as_rows(f, bank)
    d = _backend.kernels.sqdist(rows, bank.prototypes)
    return d[0] if np.ndim(f) == 1 else d


def prototype_rows(emb, y_i, y_j, lam, bank: PrototypeBank, row_weights=None):
    """Batched prototype losses.

    Returns ``(dce, mse, d_emb, d_protos)``; per row, ``dce`` is the
    lam-weighted distance-softmax cross-entropy against ``y_i`` and ``y_j``
    and ``mse`` the lam-weighted squared distance to their prototypes. A
    standard (unmixed) sample is the row with ``y_i == y_j``. Gradients are of
    ``sum(row_weights * (dce + w_mse * mse))``.
    """
    emb = _as_rows(emb, bank)
    B = emb.shape[0]
    y_i = np.ascontiguousarray(np.broadcast_to(y_i, (B,)), dtype=np.int64)
    y_j = np.ascontiguousarray(np.broadcast_to(y_j, (B,)), dtype=np.int64)
    lam = np.ascontiguousarray(np.broadcast_to(lam, (B,)), dtype=np.float64)
    w = np.ones(B) if row_weights is None else np.ascontiguousarray(row_weights, dtype=np.float64)
    return _backend.kernels.proto_rows(emb, bank.prototypes, y_i, y_j, lam, w,
                                       float(bank.gamma), float(bank.w_mse))


def _one(f, y_i, y_j, lam, bank):
    dce, mse, _, _ = prototype_rows(f, [y_i], [y_j], lam, bank)
    return float(dce[0]), float(mse[0])


def dce_loss(f, y: int, bank: PrototypeBank) -> float:
    return _one(f, y, y, 1.0, bank)[0]


def standard_prototype_loss(f, y: int, bank: PrototypeBank) -> float:
    dce, mse = _one(f, y, y, 1.0, bank)
    return dce + bank.w_mse * mse


def mixup_mse_loss(f_mix, y_i, y_j, lam, bank: PrototypeBank) -> float:
    return _one(f_mix, y_i, y_j, lam, bank)[1]


def mixup_dce_loss(f_mix, y_i, y_j, lam, bank: PrototypeBank) -> float:
    return _one(f_mix, y_i, y_j, lam, bank)[0]


def total_mixup_prototype_loss(f_mix, y_i, y_j, lam, bank: PrototypeBank) -> float:
    dce, mse = _one(f_mix, y_i, y_j, lam, bank)
    return dce + bank.w_mse * mse


def distance_softmax(emb, bank: PrototypeBank) -> np.ndarray:
    z = -bank.gamma * squared_distances(np.atleast_2d(emb), bank)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def init_prototypes(train, encoder, mode="class-mean", rng=None, gamma=1.0, w_mse=0.01) -> PrototypeBank:
    """Random prototypes (N(0, 1/embedding_dim)) or class-mean embeddings."""
    M, E = train.class_count, encoder.embedding_dim
    if M < 2:
        raise InitError("prototype learning needs at least two classes")
    if mode == "random":
        rng = np.random.default_rng(rng)
        protos = rng.normal(size=(M, E)) / np.sqrt(E)
    elif mode == "class-mean":
        emb, _ = encoder.forward(train.features, cache=False)
        protos = np.empty((M, E))
        for k, idx in enumerate(train.class_indices()):
            if len(idx) == 0:
                raise InitError(f"class {k} has no training samples for class-mean initialization")
            protos[k] = emb[idx].mean(axis=0)
    else:
        raise InitError(f"unknown prototype init mode {mode!r}")
    return PrototypeBank(protos, gamma=gamma, w_mse=w_mse)
