"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. Inputs are float64 / int64 arrays; outputs are new
arrays except for :func:`adam_update`, which works in place.
"""
import numpy as np

NAME = "python"


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _soft_targets(shape, yi, yj, lam):
    rows = np.arange(shape[0])
    q = np.zeros(shape)
    q[rows, yi] += lam
    q[rows, yj] += 1.0 - lam
    return q


def sqdist(emb, protos):
    diff = emb[:, None, :] - protos[None, :, :]
    return np.einsum("bme,bme->bm", diff, diff)


def xent_rows(logits, yi, yj, lam, row_w):
    """Per-row mixed cross-entropy and the row-weighted logit gradient.

    Row r contributes ``lam[r] * CE(z_r, yi[r]) + (1 - lam[r]) * CE(z_r, yj[r])``.
    """
    rows = np.arange(logits.shape[0])
    ls = _log_softmax(logits)
    loss = -(lam * ls[rows, yi] + (1.0 - lam) * ls[rows, yj])
    grad = np.exp(ls) - _soft_targets(logits.shape, yi, yj, lam)
    return loss, grad * row_w[:, None]


def proto_rows(emb, protos, yi, yj, lam, row_w, gamma, w_mse):
    """Distance-softmax cross-entropy and squared-distance terms per row.

    Returns ``(dce_rows, mse_rows, d_emb, d_protos)`` where the gradients are
    of ``sum_r row_w[r] * (dce_rows[r] + w_mse * mse_rows[r])``.
    """
    rows = np.arange(emb.shape[0])
    diff = emb[:, None, :] - protos[None, :, :]
    d = np.einsum("bme,bme->bm", diff, diff)
    ls = _log_softmax(-gamma * d)
    dce = -(lam * ls[rows, yi] + (1.0 - lam) * ls[rows, yj])
    mse = lam * d[rows, yi] + (1.0 - lam) * d[rows, yj]
    q = _soft_targets(d.shape, yi, yj, lam)
    g_d = (-gamma * (np.exp(ls) - q) + w_mse * q) * row_w[:, None]
    d_emb = 2.0 * np.einsum("bm,bme->be", g_d, diff)
    d_protos = -2.0 * np.einsum("bm,bme->me", g_d, diff)
    return dce, mse, d_emb, d_protos


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One bias-corrected adaptive-moment step, in place on flat arrays.

    Overflow is left to the caller's finiteness check, as in the compiled twin.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def rank_auc(id_scores, ood_scores):
    """Mann-Whitney AUROC with midranks for ties; ID scores are positives."""
    n, m = len(id_scores), len(ood_scores)
    allsc = np.concatenate([id_scores, ood_scores])
    _, inverse, counts = np.unique(allsc, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts).astype(np.float64)
    midrank = upper - (counts - 1) / 2.0
    rank_sum = midrank[inverse[:n]].sum()
    return (rank_sum - n * (n + 1) / 2.0) / (n * m)
