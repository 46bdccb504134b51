"""Dense encoder with hand-written reverse mode, Adam, and checkpoints.

The encoder is a chain of affine layers with ReLU between them (none after
the last one). Its output is the embedding ``f(x)``. An optional affine
classifier head maps embeddings to logits. Each ``forward`` call caches the
activations that ``backward`` needs; the loss heads in ``mixup`` and
``prototype`` return gradients with respect to logits or embeddings, which
``backward`` propagates to every parameter.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .errors import DimensionError, LoadError, NumericError, StateError


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Dense:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out))


class Encoder:
    """Feature extractor ``f`` with an optional softmax classifier head."""

    def __init__(self, layers: list[Dense], head: Dense | None = None):
        if not layers:
            raise DimensionError("encoder needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise DimensionError(
                    f"layer {k} expects width {layers[k].in_dim}, "
                    f"layer {k - 1} produces {layers[k - 1].out_dim}"
                )
        if head is not None and head.in_dim != layers[-1].out_dim:
            raise DimensionError("classifier head width does not match embedding_dim")
        self.layers = layers
        self.head = head
        self._cache = None

    @classmethod
    def create(cls, input_dim, hidden=(64,), embedding_dim=32, num_classes=None, rng=None):
        rng = np.random.default_rng(rng)
        widths = [input_dim, *hidden, embedding_dim]
        layers = [glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        head = glorot(rng, embedding_dim, num_classes) if num_classes else None
        return cls(layers, head)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (live references, not copies)."""
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"layer{k}.weight"] = layer.weight
            params[f"layer{k}.bias"] = layer.bias
        if self.head is not None:
            params["head.weight"] = self.head.weight
            params["head.bias"] = self.head.bias
        return params

    def copy(self) -> "Encoder":
        layers = [Dense(l.weight.copy(), l.bias.copy()) for l in self.layers]
        head = Dense(self.head.weight.copy(), self.head.bias.copy()) if self.head else None
        return Encoder(layers, head)

    def forward(self, inputs: np.ndarray, cache: bool = True):
        """Return ``(embeddings, logits)``; logits is None without a head."""
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected inputs of shape (B>=1, {self.input_dim}), got {x.shape}")
        acts = [x]
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            with np.errstate(over="ignore", invalid="ignore"):
                h = layer(acts[-1])
            if k < last:
                h = np.maximum(h, 0.0)
            if not np.isfinite(h).all():
                raise NumericError(f"non-finite activation in layer {k}")
            acts.append(h)
        emb = acts[-1]
        logits = None
        if self.head is not None:
            logits = self.head(emb)
            if not np.isfinite(logits).all():
                raise NumericError("non-finite activation in classifier head")
        if cache:
            self._cache = acts
        return emb, logits

    def hidden_activations(self) -> list[np.ndarray]:
        """Cached activations of the last forward pass, input first."""
        if self._cache is None:
            raise StateError("no forward pass has been run")
        return self._cache

    def backward(self, grad_embeddings=None, grad_logits=None) -> dict[str, np.ndarray]:
        """Propagate output gradients to every encoder parameter.

        Consumes the cache of the preceding ``forward``; a second call without
        a new forward pass raises :class:`StateError`.
        """
        if self._cache is None:
            raise StateError("backward called without a preceding forward pass")
        acts, self._cache = self._cache, None
        grads = {}
        emb = acts[-1]
        g = np.zeros_like(emb) if grad_embeddings is None else np.array(grad_embeddings, dtype=np.float64)
        if grad_logits is not None:
            if self.head is None:
                raise StateError("logit gradient given but the encoder has no classifier head")
            grads["head.weight"] = grad_logits.T @ emb
            grads["head.bias"] = grad_logits.sum(axis=0)
            g = g + grad_logits @ self.head.weight
        elif self.head is not None:
            grads["head.weight"] = np.zeros_like(self.head.weight)
            grads["head.bias"] = np.zeros_like(self.head.bias)
        for k in range(len(self.layers) - 1, -1, -1):
            if k < len(self.layers) - 1:
                g = g * (acts[k + 1] > 0.0)
            grads[f"layer{k}.weight"] = g.T @ acts[k]
            grads[f"layer{k}.bias"] = g.sum(axis=0)
            g = g @ self.layers[k].weight
        return grads


@dataclass
class GradientTape:
    """Loss value plus one gradient buffer per named parameter."""

    loss: float
    grads: dict[str, np.ndarray]
    components: dict[str, float] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "GradientTape":
        return cls(0.0, {k: np.zeros_like(v) for k, v in params.items()})


class Adam:
    """Bias-corrected adaptive moments with per-epoch exponential decay."""

    def __init__(self, params, lr=1e-4, decay=0.95, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def effective_lr(self, epoch: int) -> float:
        return self.lr * self.decay**epoch

    def step(self, params: dict[str, np.ndarray], tape: GradientTape, epoch: int) -> None:
        if set(tape.grads) != set(self.m):
            raise DimensionError(f"gradient keys {sorted(tape.grads)} do not match {sorted(self.m)}")
        for name, grad in tape.grads.items():
            if grad.shape != params[name].shape:
                raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {params[name].shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        lr = self.effective_lr(epoch)
        kern = _backend.kernels
        for name in self.m:
            p = params[name]
            if not p.flags.c_contiguous:
                raise StateError(f"parameter {name} must be C-contiguous for in-place updates")
            kern.adam_update(
                p.reshape(-1), np.ascontiguousarray(tape.grads[name], dtype=np.float64).reshape(-1),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, bc1, bc2,
            )
            if not np.isfinite(p).all():
                raise NumericError(f"parameter {name} became non-finite at step {t}")

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "decay": self.decay, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "step_count": self.step_count,
        }


def check_gradients(loss_fn, params: dict[str, np.ndarray], step=1e-5, names=None, floor=1e-8):
    """Compare ``loss_fn() -> (loss, grads)`` against central differences.

    Perturbs each entry of ``params`` in place (restoring it afterwards) and
    returns the worst relative error ``|a - n| / max(|a| + |n|, floor)``.
    ``floor`` keeps entries whose true value is below the difference
    quotient's roundoff (about eps * |loss| / step) from dominating.
    """
    _, analytic = loss_fn()
    analytic = {k: v.copy() for k, v in analytic.items()}
    worst = 0.0
    for name in names or params:
        p = params[name].reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(p.size):
            orig = p[i]
            p[i] = orig + step
            up = loss_fn()[0]
            p[i] = orig - step
            down = loss_fn()[0]
            p[i] = orig
            num = (up - down) / (2.0 * step)
            err = abs(a[i] - num) / max(abs(a[i]) + abs(num), floor)
            worst = max(worst, err)
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, encoder: Encoder, optimizer: Adam | None = None, bank=None,
                    rng: np.random.Generator | None = None, meta: dict | None = None) -> Path:
    """Write everything needed to resume training into one ``.npz`` file."""
    arrays = {f"param/{k}": v for k, v in encoder.parameters().items()}
    header = {
        "layers": [[l.out_dim, l.in_dim] for l in encoder.layers],
        "head": None if encoder.head is None else [encoder.head.out_dim, encoder.head.in_dim],
        "meta": meta or {},
    }
    if bank is not None:
        arrays["prototypes"] = bank.prototypes
        header["bank"] = {"gamma": bank.gamma, "w_mse": bank.w_mse}
    if optimizer is not None:
        for k in optimizer.m:
            arrays[f"adam_m/{k}"] = optimizer.m[k]
            arrays[f"adam_v/{k}"] = optimizer.v[k]
        header["optimizer"] = optimizer.state_dict()
    if rng is not None:
        header["rng"] = rng.bit_generator.state
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            # fixed timestamp keeps reruns byte-identical
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)
    return path


@dataclass
class Checkpoint:
    encoder: Encoder
    bank: object = None
    optimizer: Adam | None = None
    rng: np.random.Generator | None = None
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    from .prototype import PrototypeBank

    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"]))
    except (OSError, KeyError, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    layers = [
        Dense(data[f"param/layer{k}.weight"].copy(), data[f"param/layer{k}.bias"].copy())
        for k in range(len(header["layers"]))
    ]
    head = None
    if header["head"] is not None:
        head = Dense(data["param/head.weight"].copy(), data["param/head.bias"].copy())
    encoder = Encoder(layers, head)
    bank = None
    if "bank" in header:
        bank = PrototypeBank(data["prototypes"].copy(), **header["bank"])
    optimizer = None
    if "optimizer" in header:
        st = header["optimizer"]
        params = encoder.parameters()
        if bank is not None:
            params["prototypes"] = bank.prototypes
        optimizer = Adam(params, lr=st["lr"], decay=st["decay"], beta1=st["beta1"],
                         beta2=st["beta2"], eps=st["eps"])
        optimizer.step_count = st["step_count"]
        for k in optimizer.m:
            optimizer.m[k] = data[f"adam_m/{k}"].copy()
            optimizer.v[k] = data[f"adam_v/{k}"].copy()
    rng = None
    if "rng" in header:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    return Checkpoint(encoder, bank, optimizer, rng, header.get("meta", {}))
