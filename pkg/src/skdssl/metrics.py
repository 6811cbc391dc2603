"""One-vs-rest detection metrics and four-class accuracy."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, MetricError

UNDEFINED = None


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class
    class_names: list

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else UNDEFINED


@dataclass
class EvalReport:
    sen: float
    spe: float
    hm: float
    auc: float
    acc: float
    positive_class: str
    confusion: ConfusionMatrix

    METRICS = ("sen", "spe", "hm", "auc", "acc")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.METRICS}


def confusion(y_true, y_pred, num_classes, class_names=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"label arrays differ in length: {y_true.shape} vs {y_pred.shape}")
    if y_true.size and (max(y_true.max(), y_pred.max()) >= num_classes or min(y_true.min(), y_pred.min()) < 0):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def binary_rates(cm, positive):
    """Sensitivity and specificity with ``positive`` against all other classes.

    A rate whose denominator is zero is returned as ``None``.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if not 0 <= positive < counts.shape[0]:
        raise ContractError(f"positive class index {positive} out of range")
    tp = counts[positive, positive]
    fn = counts[positive].sum() - tp
    fp = counts[:, positive].sum() - tp
    tn = counts.sum() - tp - fn - fp
    sen = float(tp / (tp + fn)) if tp + fn else UNDEFINED
    spe = float(tn / (tn + fp)) if tn + fp else UNDEFINED
    return sen, spe


def harmonic_mean(sen, spe):
    if sen is UNDEFINED or spe is UNDEFINED:
        return UNDEFINED
    if sen + spe == 0:
        return 0.0
    return 2.0 * sen * spe / (sen + spe)


def roc_auc(scores, y_binary):
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_binary).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def report_from_predictions(probs, y_true, class_names, positive_class):
    if positive_class not in class_names:
        raise ContractError(f"positive class {positive_class!r} not among {list(class_names)}")
    probs = np.asarray(probs)
    if probs.shape[1] != len(class_names):
        raise ContractError(f"model emits {probs.shape[1]} classes, dataset has {len(class_names)}")
    pos = list(class_names).index(positive_class)
    y_true = np.asarray(y_true)
    cm = confusion(y_true, probs.argmax(axis=1), len(class_names), class_names)
    sen, spe = binary_rates(cm, pos)
    is_pos = y_true == pos
    auc = roc_auc(probs[:, pos], is_pos) if 0 < is_pos.sum() < len(is_pos) else UNDEFINED
    return EvalReport(sen, spe, harmonic_mean(sen, spe), auc, cm.accuracy(), positive_class, cm)


def evaluate(model, test, positive_class="COVID"):
    """Score ``model.predict_proba`` on a dataset.

    AUC uses the softmax probability of the positive class.
    """
    if positive_class not in test.class_names:
        raise ContractError(f"positive class {positive_class!r} not in dataset classes {test.class_names}")
    probs = model.predict_proba(test.images)
    return report_from_predictions(probs, test.labels, test.class_names, positive_class)


def aggregate(reports):
    """Mean and sample standard deviation of each metric over several reports."""
    out = {}
    for key in EvalReport.METRICS:
        vals = np.array([getattr(r, key) for r in reports if getattr(r, key) is not UNDEFINED], dtype=np.float64)
        if len(vals) == 0:
            out[key] = (UNDEFINED, UNDEFINED)
        else:
            out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def _fmt(v):
    return "undefined" if v is UNDEFINED else repr(float(v))


def write_report_csv(report, path):
    """``metric,value`` rows, a blank line, then the confusion block.

    The confusion block has a header ``confusion,<class...>`` followed by one
    row per true class.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in EvalReport.METRICS:
            w.writerow([key, _fmt(getattr(report, key))])
        w.writerow(["positive_class", report.positive_class])
        w.writerow([])
        w.writerow(["confusion"] + list(report.confusion.class_names))
        for name, row in zip(report.confusion.class_names, report.confusion.counts):
            w.writerow([name] + [int(v) for v in row])


def read_report_csv(path):
    metrics, names, rows = {}, None, []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        section = "metrics"
        for row in reader:
            if not row:
                section = "confusion"
                continue
            if section == "metrics":
                if row[0] in ("metric",):
                    continue
                metrics[row[0]] = row[1]
            elif names is None:
                names = row[1:]
            else:
                rows.append([int(v) for v in row[1:]])
    return metrics, ConfusionMatrix(np.array(rows, dtype=np.int64), names or [])
