"""Accuracy, NLL and confusion matrices over a manifest split."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import DISTRACTION_CLASSES, EMOTION_CLASSES, Provenance
from .errors import DataError
from .model import DIST, EMO
from .tensor import log_softmax_np, no_grad


def confusion_matrix(targets, preds, k):
    """Rows are true classes, columns predictions."""
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.asarray(targets).tolist(), np.asarray(preds).tolist()):
        cm[t, p] += 1
    return cm


def mean_nll(logits, targets):
    """Mean natural-log negative log-likelihood of the targets."""
    logp = log_softmax_np(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets)
    # fixed-order summation keeps the result bitwise reproducible
    return float(np.sum(-logp[np.arange(len(targets)), targets]) / len(targets))


@dataclass
class EvalReport:
    count: int
    accuracy: float | None
    nll: float | None
    confusion: np.ndarray | None
    per_class_accuracy: np.ndarray | None
    emotion_count: int
    emotion_accuracy: float | None
    emotion_nll: float | None
    emotion_confusion: np.ndarray | None

    def accuracy_text(self):
        return "-" if self.accuracy is None else f"{self.accuracy:.4f}"

    def emotion_text(self):
        return "-" if self.emotion_accuracy is None else f"{self.emotion_accuracy:.4f}"

    def table(self):
        lines = []
        if self.accuracy is not None:
            lines.append(f"{'samples':<24}{self.count:>10d}")
            lines.append(f"{'distraction accuracy':<24}{self.accuracy:>10.4f}")
            lines.append(f"{'distraction NLL':<24}{self.nll:>10.4f}")
        lines.append(f"{'emotion samples':<24}{self.emotion_count:>10d}")
        lines.append(f"{'emotion accuracy':<24}{self.emotion_text():>10}")
        if self.per_class_accuracy is not None:
            lines.append("")
            lines.append(f"{'class':<28}{'n':>6}{'acc':>10}")
            for i, name in enumerate(DISTRACTION_CLASSES[:len(self.per_class_accuracy)]):
                n = int(self.confusion[i].sum())
                acc = "-" if n == 0 else f"{self.per_class_accuracy[i]:.4f}"
                lines.append(f"{f'C{i} {name}':<28}{n:>6d}{acc:>10}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["samples", self.count])
        for key in ("accuracy", "nll", "emotion_accuracy", "emotion_nll"):
            value = getattr(self, key)
            w.writerow([key, "" if value is None else repr(float(value))])
        w.writerow(["emotion_samples", self.emotion_count])
        if self.confusion is not None:
            for i, row in enumerate(self.confusion):
                w.writerow([f"confusion_C{i}", " ".join(str(int(v)) for v in row)])
        if self.emotion_confusion is not None:
            for i, row in enumerate(self.emotion_confusion):
                w.writerow([f"emotion_confusion_{EMOTION_CLASSES[i]}", " ".join(str(int(v)) for v in row)])
        return buf.getvalue()


def report_from_logits(dist_logits=None, dist_targets=None, emo_logits=None, emo_targets=None,
                       num_dist=len(DISTRACTION_CLASSES), num_emo=len(EMOTION_CLASSES)):
    acc = nll = cm = per_class = None
    count = 0
    if dist_logits is not None:
        dist_logits = np.asarray(dist_logits)
        dist_targets = np.asarray(dist_targets)
        count = len(dist_targets)
        if count == 0:
            raise DataError("cannot evaluate an empty split")
        preds = dist_logits.argmax(axis=1)
        cm = confusion_matrix(dist_targets, preds, num_dist)
        acc = float(np.trace(cm) / count)
        nll = mean_nll(dist_logits, dist_targets)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.diag(cm) / cm.sum(axis=1)
    e_acc = e_nll = e_cm = None
    e_count = 0
    if emo_logits is not None and len(emo_targets):
        emo_logits = np.asarray(emo_logits)
        emo_targets = np.asarray(emo_targets)
        e_count = len(emo_targets)
        e_cm = confusion_matrix(emo_targets, emo_logits.argmax(axis=1), num_emo)
        e_acc = float(np.trace(e_cm) / e_count)
        e_nll = mean_nll(emo_logits, emo_targets)
    return EvalReport(count, acc, nll, cm, per_class, e_count, e_acc, e_nll, e_cm)


def evaluate_arrays(logits, targets, config, emotion_mask=None):
    """Report from precomputed logits; ``emotion_mask`` selects emotion rows."""
    num_dist = config.num_distraction_classes
    num_emo = config.num_emotion_classes
    emo_logits = logits.get(EMO)
    emo_targets = targets.get(EMO)
    if emo_logits is not None and emotion_mask is not None:
        emo_logits, emo_targets = emo_logits[emotion_mask], emo_targets[emotion_mask]
    if DIST not in logits:
        if emo_targets is None or len(emo_targets) == 0:
            raise DataError("cannot evaluate an empty split")
    return report_from_logits(logits.get(DIST), targets.get(DIST), emo_logits, emo_targets,
                              num_dist or len(DISTRACTION_CLASSES), num_emo)


def evaluate(params, config, records, base_dir, include_pseudo=False, threads=1, batch_size=64):
    """Augmentation-free pass over a manifest split.

    Emotion metrics only count ground-truth emotion labels unless
    ``include_pseudo`` is set.
    """
    from .model import forward_tokens
    from .training import load_manifest_arrays

    if not records:
        raise DataError("cannot evaluate an empty split")
    data = load_manifest_arrays(records, base_dir, config, threads)
    logits = {name: [] for name, _ in config.tasks}
    with no_grad():
        for lo in range(0, len(data), batch_size):
            out, _ = forward_tokens({m: x[lo:lo + batch_size] for m, x in data.images.items()}, params, config)
            for name in logits:
                logits[name].append(out[name].data)
    logits = {k: np.concatenate(v) for k, v in logits.items()}
    mask = None
    if not include_pseudo:
        mask = np.array([r.provenance is Provenance.GROUND_TRUTH for r in records])
    return evaluate_arrays(logits, data.targets, config, mask)
