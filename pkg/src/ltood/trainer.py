"""Batch composition and the epoch loop for all method configurations."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import Dataset, SubsetPartition
from .diffcore import Adam, Encoder, GradientTape, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .mixup import MixupStrategy, PairSampler, mix_inputs, mixup_ce_rows
from .oodeval import confidence, subset_accuracy
from .prototype import PrototypeBank, init_prototypes, prototype_rows

HEAD_TYPES = ("softmax", "prototype")


@dataclass
class MethodConfig:
    head_type: str = "softmax"
    mixup_strategy: MixupStrategy | None = None
    alpha: float = 0.2
    mixup_fraction: float = 0.5
    mixup_weight: float = 1.0
    two_forward: bool = False
    epochs: int = 45
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 1.0
    w_mse: float = 0.01
    prototype_init: str = "class-mean"
    hidden: tuple = (64,)
    embedding_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        self.mixup_strategy = MixupStrategy.parse(self.mixup_strategy)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"head_type must be one of {HEAD_TYPES}, got {self.head_type!r}")
        if not 0.0 <= self.mixup_fraction <= 1.0:
            raise ConfigError("mixup_fraction must be in [0, 1]")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0 < self.decay <= 1:
            raise ConfigError("lr must be positive and decay in (0, 1]")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1 or not self.eps > 0:
            raise ConfigError("beta1, beta2 must be in (0, 1) and eps positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown method config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixup_strategy"] = self.mixup_strategy.value if self.mixup_strategy else "none"
        d["hidden"] = list(self.hidden)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:10]

    @property
    def n_mixup(self) -> int:
        if self.mixup_strategy is None:
            return 0
        return int(math.floor(self.mixup_fraction * self.batch_size + 0.5))

    @property
    def n_standard(self) -> int:
        return self.batch_size - self.n_mixup


@dataclass
class Batch:
    x_std: np.ndarray
    y_std: np.ndarray
    x_i: np.ndarray
    x_j: np.ndarray
    y_i: np.ndarray
    y_j: np.ndarray
    lam: np.ndarray

    @property
    def mixed_inputs(self) -> np.ndarray:
        return mix_inputs(self.x_i, self.x_j, self.lam)


def make_batch(train: Dataset, cfg: MethodConfig, rng, sampler: PairSampler | None = None) -> Batch:
    """Standard samples drawn uniformly from ``train`` plus mixup pairs."""
    idx = rng.integers(len(train), size=cfg.n_standard)
    D = train.feature_dim
    empty = np.empty((0, D))
    none = np.empty(0, dtype=np.int64)
    if cfg.n_mixup and sampler is not None:
        xi, xj, yi, yj, lam = sampler.sample(cfg.n_mixup, cfg.alpha, rng)
    else:
        xi, xj, yi, yj, lam = empty, empty, none, none, np.empty(0)
    return Batch(train.features[idx], train.labels[idx], xi, xj, yi, yj, lam)


def batch_objective(encoder: Encoder, bank: PrototypeBank | None, batch: Batch, cfg: MethodConfig) -> GradientTape:
    """Mean standard-sample loss plus ``mixup_weight`` times mean mixup loss,
    with gradients for every encoder parameter (and the prototypes)."""
    n_s, n_m = len(batch.y_std), len(batch.y_i)
    ones = np.ones(n_s)
    w_s = ones / max(n_s, 1)
    w_m = np.full(n_m, cfg.mixup_weight / max(n_m, 1))
    if cfg.two_forward and bank is None:
        # literal reading: each source image forwarded separately, weighted by lam
        X = np.concatenate([batch.x_std, batch.x_i, batch.x_j])
        yi = np.concatenate([batch.y_std, batch.y_i, batch.y_j])
        yj = yi
        lam = np.ones(len(yi))
        w = np.concatenate([w_s, w_m * batch.lam, w_m * (1.0 - batch.lam)])
    else:
        X = np.concatenate([batch.x_std, batch.mixed_inputs])
        yi = np.concatenate([batch.y_std, batch.y_i])
        yj = np.concatenate([batch.y_std, batch.y_j])
        lam = np.concatenate([ones, batch.lam])
        w = np.concatenate([w_s, w_m])
    emb, logits = encoder.forward(X)
    if bank is None:
        rows, g_logits = mixup_ce_rows(logits, yi, yj, lam, w)
        grads = encoder.backward(grad_logits=g_logits)
        per_row = rows
        comps = {}
    else:
        dce, mse, g_emb, g_protos = prototype_rows(emb, yi, yj, lam, bank, w)
        grads = encoder.backward(grad_embeddings=g_emb)
        grads["prototypes"] = g_protos
        per_row = dce + bank.w_mse * mse
        comps = {"dce": float(w @ dce), "mse": float(w @ mse)}
    loss = float(w @ per_row)
    comps["standard"] = float(w[:n_s] @ per_row[:n_s])
    comps["mixup"] = float(w[n_s:] @ per_row[n_s:])
    return GradientTape(loss, grads, comps)


def trainable(encoder: Encoder, bank: PrototypeBank | None) -> dict[str, np.ndarray]:
    params = encoder.parameters()
    if bank is not None:
        params["prototypes"] = bank.prototypes
    return params


def predict(encoder, bank, features):
    pred, _ = confidence(encoder, bank, features)
    return pred


HISTORY_FIELDS = ["epoch", "lr", "loss_total", "loss_standard", "loss_mixup", "loss_dce", "loss_mse",
                  "val_head", "val_middle", "val_tail", "val_total"]


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        lines = [",".join(HISTORY_FIELDS)]
        for r in self.rows:
            lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in HISTORY_FIELDS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path) -> "TrainingHistory":
        with open(path) as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)


@dataclass
class TrainResult:
    encoder: Encoder
    bank: PrototypeBank | None
    history: TrainingHistory
    best_epoch: int
    best_val_total: float
    best_encoder: Encoder
    best_bank: PrototypeBank | None


def _copy_bank(bank):
    return None if bank is None else PrototypeBank(bank.prototypes.copy(), bank.gamma, bank.w_mse)


def initial_state(cfg: MethodConfig, train: Dataset):
    rng = np.random.default_rng(cfg.seed)
    num_classes = train.class_count if cfg.head_type == "softmax" else None
    encoder = Encoder.create(train.feature_dim, cfg.hidden, cfg.embedding_dim, num_classes, rng)
    bank = None
    if cfg.head_type == "prototype":
        bank = init_prototypes(train, encoder, cfg.prototype_init, rng, cfg.gamma, cfg.w_mse)
    return encoder, bank, rng


def train(cfg: MethodConfig, train_set: Dataset, val_set: Dataset, partition: SubsetPartition,
          run_dir=None, resume=None, meta: dict | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``ceil(len(train) / batch_size)`` steps each.

    ``resume`` is a checkpoint path written by an earlier call with the same
    config; training continues from its epoch with the saved optimizer and RNG
    state, reproducing an uninterrupted run exactly.
    """
    cfg.validate()
    sampler = None
    if cfg.mixup_strategy is not None:
        # fails fast on empty or undersized subsets
        sampler = PairSampler(train_set, partition, cfg.mixup_strategy)
    run_dir = Path(run_dir) if run_dir is not None else None
    meta = dict(meta or {})
    meta.update(method=cfg.to_dict(), partition=partition.to_dict(),
                feature_dim=train_set.feature_dim, class_count=train_set.class_count)

    history = TrainingHistory()
    best_val, best_epoch = -1.0, 0
    resumed_best = None
    if resume is None:
        encoder, bank, rng = initial_state(cfg, train_set)
        optimizer = Adam(trainable(encoder, bank), cfg.lr, cfg.decay, cfg.beta1, cfg.beta2, cfg.eps)
        start = 0
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(run_dir / "checkpoint_init.npz", encoder, optimizer, bank, rng,
                            {**meta, "epoch": 0, "best_val_total": best_val, "best_epoch": 0})
    else:
        ck = load_checkpoint(resume)
        encoder, bank, optimizer, rng = ck.encoder, ck.bank, ck.optimizer, ck.rng
        start = int(ck.meta["epoch"])
        best_val, best_epoch = ck.meta["best_val_total"], ck.meta["best_epoch"]
        if run_dir is not None and (run_dir / "checkpoint_best.npz").exists():
            best = load_checkpoint(run_dir / "checkpoint_best.npz")
            resumed_best = (best.encoder, best.bank)
        if run_dir is not None and (run_dir / "history.csv").exists():
            history = TrainingHistory.from_csv(run_dir / "history.csv")
            history.rows = [r for r in history.rows if r["epoch"] <= start]
    best_encoder, best_bank = resumed_best or (encoder.copy(), _copy_bank(bank))
    params = trainable(encoder, bank)

    steps = math.ceil(len(train_set) / cfg.batch_size)
    for epoch in range(start, cfg.epochs):
        sums = dict.fromkeys(("total", "standard", "mixup", "dce", "mse"), 0.0)
        for step in range(steps):
            batch = make_batch(train_set, cfg, rng, sampler)
            try:
                tape = batch_objective(encoder, bank, batch, cfg)
                if not math.isfinite(tape.loss):
                    raise NumericError("non-finite loss")
                optimizer.step(params, tape, epoch)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            sums["total"] += tape.loss
            for k, v in tape.components.items():
                sums[k] += v
        acc = subset_accuracy(predict(encoder, bank, val_set.features), val_set.labels, partition)
        history.rows.append({
            "epoch": epoch + 1, "lr": optimizer.effective_lr(epoch),
            **{f"loss_{k}": v / steps for k, v in sums.items()},
            **{f"val_{k}": v for k, v in acc.items()},
        })
        if acc["total"] > best_val:
            best_val, best_epoch = acc["total"], epoch + 1
            best_encoder, best_bank = encoder.copy(), _copy_bank(bank)
            if run_dir is not None:
                save_checkpoint(run_dir / "checkpoint_best.npz", encoder, optimizer, bank, rng,
                                {**meta, "epoch": epoch + 1, "best_val_total": best_val, "best_epoch": best_epoch})

    if run_dir is not None:
        if cfg.epochs > start:
            save_checkpoint(run_dir / "checkpoint_final.npz", encoder, optimizer, bank, rng,
                            {**meta, "epoch": cfg.epochs, "best_val_total": best_val, "best_epoch": best_epoch})
        (run_dir / "history.csv").write_text(history.to_csv())
    return TrainResult(encoder, bank, history, best_epoch, best_val, best_encoder, best_bank)
