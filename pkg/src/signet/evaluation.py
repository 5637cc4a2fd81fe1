"""Classification metrics, report files and penultimate-feature export.

F1, recall and AUC are macro (unweighted) averages over classes. Predictions
are the argmax of the logits, with ties going to the lowest class index.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .sigsynth import SignalDataset

__all__ = [
    "EvalReport",
    "confusion_matrix",
    "macro_f1",
    "macro_recall",
    "roc_auc_ovr",
    "softmax",
    "build_report",
    "evaluate",
    "write_report",
    "write_accuracy_vs_snr",
    "export_features",
    "read_features",
]


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Raw counts, rows = true class, columns = predicted class."""
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return out


def _precision_recall(conf):
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    pred = conf.sum(axis=0)
    true = conf.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    return precision, recall


def macro_recall(conf) -> float:
    return float(np.mean(_precision_recall(conf)[1]))


def macro_f1(conf) -> float:
    p, r = _precision_recall(conf)
    s = p + r
    f1 = np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)
    return float(np.mean(f1))


def roc_auc_ovr(scores, labels):
    """One-vs-rest AUC per class from the Mann-Whitney rank statistic.

    Tied scores get mid-ranks. A class without both positives and negatives
    has an undefined AUC (NaN) and is left out of the macro mean.
    Returns ``(per_class, macro)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"AUC undefined for class {c}: needs positive and negative samples", RuntimeWarning)
            continue
        ranks = rankdata(scores[:, c])
        per_class[c] = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    defined = per_class[~np.isnan(per_class)]
    return per_class, (float(defined.mean()) if defined.size else float("nan"))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class EvalReport:
    accuracy: float
    snr_values: list
    per_snr_accuracy: list
    per_snr_count: list
    confusion: np.ndarray
    macro_f1: float
    macro_recall: float
    auc_per_class: np.ndarray
    macro_auc: float
    n_samples: int
    class_names: list
    averaging: str = "macro"

    @property
    def confusion_normalized(self):
        rows = self.confusion.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def build_report(logits, labels, snrs, class_names) -> EvalReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    snrs = np.asarray(snrs, dtype=np.int64)
    C = logits.shape[1]
    pred = np.argmax(logits, axis=1)
    conf = confusion_matrix(labels, pred, C)
    n = len(labels)
    accuracy = float(np.trace(conf) / n) if n else float("nan")
    snr_values = sorted(set(snrs.tolist()))
    per_snr, counts = [], []
    for s in snr_values:
        m = snrs == s
        counts.append(int(m.sum()))
        per_snr.append(float(np.mean(pred[m] == labels[m])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        auc, macro_auc = roc_auc_ovr(softmax(logits), labels)
    return EvalReport(
        accuracy=accuracy,
        snr_values=snr_values,
        per_snr_accuracy=per_snr,
        per_snr_count=counts,
        confusion=conf,
        macro_f1=macro_f1(conf),
        macro_recall=macro_recall(conf),
        auc_per_class=auc,
        macro_auc=macro_auc,
        n_samples=n,
        class_names=list(class_names),
    )


def evaluate(model, test_set: SignalDataset) -> EvalReport:
    """Evaluate ``model`` (batch-norm in eval mode) on every sample of ``test_set``."""
    return build_report(model.logits(test_set.X), test_set.labels, test_set.snrs, test_set.class_names)


def _f(v):
    return "nan" if v != v else repr(float(v))


def write_report(report: EvalReport, path) -> None:
    """key=value summary followed by CSV blocks for per-SNR accuracy,
    per-class AUC and the raw confusion counts."""
    lines = [
        f"samples={report.n_samples}",
        f"accuracy={_f(report.accuracy)}",
        f"macro_f1={_f(report.macro_f1)}",
        f"macro_recall={_f(report.macro_recall)}",
        f"macro_auc={_f(report.macro_auc)}",
        f"averaging={report.averaging}",
        f"classes={','.join(report.class_names)}",
        "",
        "[per_snr]",
        "snr,accuracy,count",
    ]
    lines += [f"{s},{_f(a)},{n}" for s, a, n in zip(report.snr_values, report.per_snr_accuracy, report.per_snr_count)]
    lines += ["", "[auc]", "class,auc"]
    lines += [f"{name},{_f(a)}" for name, a in zip(report.class_names, report.auc_per_class)]
    lines += ["", "[confusion]", "true\\pred," + ",".join(report.class_names)]
    lines += [f"{name}," + ",".join(str(int(v)) for v in row) for name, row in zip(report.class_names, report.confusion)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_accuracy_vs_snr(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr", "accuracy", "count"])
        for s, a, n in zip(report.snr_values, report.per_snr_accuracy, report.per_snr_count):
            w.writerow([s, _f(a), n])


def export_features(model, samples: SignalDataset, path) -> np.ndarray:
    """Write penultimate activations (input of the final dense layer) as CSV."""
    feats = model.features(samples.X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "snr"] + [f"f{j}" for j in range(feats.shape[1])])
        for idx in range(len(samples)):
            w.writerow([idx, int(samples.labels[idx]), int(samples.snrs[idx])] + [f"{v:.12g}" for v in feats[idx]])
    return feats


def read_features(path):
    """Inverse of :func:`export_features`: ``(index, label, snr, features)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2].astype(np.int64), data[:, 3:]
