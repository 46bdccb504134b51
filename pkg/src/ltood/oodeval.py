"""Confidence scoring, closed-set metrics, AUROC and density export."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .dataset import SubsetPartition
from .errors import DimensionError, MetricError
from .prototype import PrototypeBank, distance_softmax, squared_distances

log = logging.getLogger(__name__)

SUBSETS = ("head", "middle", "tail")


def softmax(z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def confidence(encoder, bank: PrototypeBank | None, x, score="softmax"):
    """Predicted class and confidence score for each row of ``x``.

    With a prototype bank the distribution is the softmax over negative
    scaled squared distances; ``score="neg-min-distance"`` returns the raw
    ``-min_k d_k`` instead (not bounded to (0, 1]).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != encoder.input_dim:
        raise DimensionError(f"input width {x.shape[1]} != encoder input {encoder.input_dim}")
    emb, logits = encoder.forward(x, cache=False)
    if bank is None:
        p = softmax(logits)
    elif score == "neg-min-distance":
        d = squared_distances(emb, bank)
        return d.argmin(axis=1), -d.min(axis=1)
    else:
        p = distance_softmax(emb, bank)
    return p.argmax(axis=1), p.max(axis=1)


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score) with ties counted 1/2."""
    a = np.ascontiguousarray(id_scores, dtype=np.float64).ravel()
    b = np.ascontiguousarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("AUROC needs nonempty ID and OOD score lists")
    return float(_backend.kernels.rank_auc(a, b))


def auroc_bruteforce(id_scores, ood_scores) -> float:
    a = np.asarray(id_scores, dtype=np.float64)[:, None]
    b = np.asarray(ood_scores, dtype=np.float64)[None, :]
    return float(((a > b).sum() + 0.5 * (a == b).sum()) / (a.size * b.size))


def precision_recall_f1(predictions, labels, num_classes):
    """Per-class precision, recall and F1 with 0/0 taken as 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (lab, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    prec = np.divide(tp, pred_n, out=np.zeros(num_classes), where=pred_n > 0)
    rec = np.divide(tp, true_n, out=np.zeros(num_classes), where=true_n > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(num_classes), where=denom > 0)
    return prec, rec, f1


def subset_accuracy(predictions, labels, partition: SubsetPartition) -> dict[str, float]:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    correct = pred == lab
    acc = {}
    for name in SUBSETS:
        mask = np.isin(lab, sorted(getattr(partition, name)))
        acc[name] = float(correct[mask].mean()) if mask.any() else 0.0
    acc["total"] = float(correct.mean()) if correct.size else 0.0
    return acc


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    precision: float
    recall: float
    f1: float
    auroc: dict[str, float] = field(default_factory=dict)
    confidence_summary: dict[str, dict[str, float]] = field(default_factory=dict)
    subset_counts: dict[str, int] = field(default_factory=dict)
    partition_mode: str = "absolute"
    averaging: str = "macro"
    orientation: str = "ID positive"
    checkpoint: str = ""

    def flat(self) -> dict[str, object]:
        out = {f"acc_{k}": v for k, v in self.accuracy.items()}
        out.update(precision=self.precision, recall=self.recall, f1=self.f1)
        for src, v in self.auroc.items():
            out[f"auroc_{src}"] = v
        for group, summ in self.confidence_summary.items():
            for stat, v in summ.items():
                out[f"conf_{group}_{stat}"] = v
        for name, n in self.subset_counts.items():
            out[f"n_{name}"] = n
        out.update(partition_mode=self.partition_mode, averaging=self.averaging,
                   orientation=self.orientation, checkpoint=self.checkpoint)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat().items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = dict(list(csv.reader(io.StringIO(text)))[1:])
        num = lambda k: float(rows[k])  # noqa: E731
        rep = cls(
            accuracy={k: num(f"acc_{k}") for k in (*SUBSETS, "total")},
            precision=num("precision"), recall=num("recall"), f1=num("f1"),
            partition_mode=rows["partition_mode"], averaging=rows["averaging"],
            orientation=rows["orientation"], checkpoint=rows.get("checkpoint", ""),
        )
        for k, v in rows.items():
            if k.startswith("auroc_"):
                rep.auroc[k[len("auroc_"):]] = float(v)
            elif k.startswith("n_"):
                rep.subset_counts[k[2:]] = int(v)
        return rep

    def to_text(self) -> str:
        lines = [
            f"# partition mode: {self.partition_mode}; precision/recall/F1: {self.averaging}; "
            f"AUROC orientation: {self.orientation}"
            + (f"; checkpoint: {self.checkpoint}" if self.checkpoint else ""),
        ]
        header = ["Head", "Middle", "Tail", "Total"]
        vals = [f"{100 * self.accuracy[k]:.2f}" for k in (*SUBSETS, "total")]
        header += ["ID(pre)", "ID(rec)", "ID(f1)"]
        vals += [f"{self.precision:.3f}", f"{self.recall:.3f}", f"{self.f1:.3f}"]
        for src, v in self.auroc.items():
            header.append(f"OOD({src})")
            vals.append(f"{100 * v:.2f}")
        lines.append(format_table(header, [vals]))
        return "\n".join(lines) + "\n"


def format_table(header, rows) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = lambda r: " | ".join(str(c).rjust(w) for c, w in zip(r, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *(fmt(r) for r in rows)])


def classification_report(predictions, labels, partition: SubsetPartition, num_classes: int) -> EvalReport:
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise MetricError(f"{pred.size} predictions for {lab.size} labels")
    prec, rec, f1 = precision_recall_f1(pred, lab, num_classes)
    counts = {name: int(np.isin(lab, sorted(getattr(partition, name))).sum()) for name in SUBSETS}
    counts["total"] = int(lab.size)
    return EvalReport(
        accuracy=subset_accuracy(pred, lab, partition),
        precision=float(prec.mean()), recall=float(rec.mean()), f1=float(f1.mean()),
        subset_counts=counts, partition_mode=partition.mode,
    )


def _summary(scores) -> dict[str, float]:
    s = np.asarray(scores, dtype=np.float64)
    return {"n": float(s.size), "mean": float(s.mean()), "median": float(np.median(s))}


@dataclass
class Evaluation:
    report: EvalReport
    predictions: list[tuple]  # (group, index, label, predicted, score)
    groups: dict[str, np.ndarray]


def evaluate(encoder, bank, test, partition: SubsetPartition, ood_sources: dict | None = None,
             score="softmax") -> Evaluation:
    """Closed-set metrics on ``test`` plus AUROC against each OOD source."""
    pred, conf = confidence(encoder, bank, test.features, score=score)
    report = classification_report(pred, test.labels, partition, test.class_count)
    member = partition.membership(test.class_count)[test.labels]
    groups = {name[0].upper(): conf[member == i] for i, name in enumerate(SUBSETS)}
    rows = [(("H", "M", "T")[member[i]], i, int(test.labels[i]), int(pred[i]), float(conf[i]))
            for i in range(len(test))]
    for src, ds in (ood_sources or {}).items():
        opred, oconf = confidence(encoder, bank, ds.features, score=score)
        report.auroc[src] = auroc(conf, oconf)
        groups[src] = oconf
        rows += [(src, i, -1, int(opred[i]), float(oconf[i])) for i in range(len(ds))]
    report.confidence_summary = {g: _summary(s) for g, s in groups.items() if len(s)}
    return Evaluation(report, rows, groups)


def predictions_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "index", "label", "predicted", "score"])
    for g, i, lab, p, s in rows:
        w.writerow([g, i, lab, p, repr(s)])
    return buf.getvalue()


def density_export(groups: dict, bins: int = 20, lo=0.0, hi=1.0):
    """Normalized histograms per group: rows ``(group, bin_center, density)``.

    Empty groups are skipped; their names are returned as warnings.
    """
    if bins < 2:
        raise MetricError("density export needs at least 2 bins")
    edges = np.linspace(lo, hi, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2.0
    rows, warnings = [], []
    for name, scores in groups.items():
        s = np.asarray(scores, dtype=np.float64)
        if s.size == 0:
            log.warning("density export: group %s is empty, omitted", name)
            warnings.append(name)
            continue
        dens, _ = np.histogram(np.clip(s, lo, hi), bins=edges, density=True)
        rows += [(name, float(c), float(d)) for c, d in zip(centers, dens)]
    return rows, warnings


def density_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "bin_center", "density"])
    for g, c, d in rows:
        w.writerow([g, repr(c), repr(d)])
    return buf.getvalue()


def density_text(rows) -> str:
    return format_table(["group", "bin_center", "density"],
                        [[g, f"{c:.4f}", f"{d:.4f}"] for g, c, d in rows]) + "\n"
