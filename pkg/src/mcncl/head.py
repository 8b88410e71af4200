"""Fusion classifier, training objective and weighted-F1 evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from mcncl import numcore as nc
from mcncl.nn import Affine
from mcncl.numcore import TapeTensor


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 256
    hidden2: int = 128

    def __post_init__(self):
        if self.hidden < 1 or self.hidden2 < 1:
            raise ValueError("classifier widths must be positive")


@dataclass
class ClassifierParams:
    fc: Affine  # 3D -> hidden
    mlp1: Affine  # hidden -> hidden, then ReLU
    mlp2: Affine  # hidden -> hidden2
    out: Affine  # hidden2 -> K

    @classmethod
    def init(cls, rng, dim: int, num_classes: int, config: ClassifierConfig) -> "ClassifierParams":
        return cls(
            Affine.init(rng, 3 * dim, config.hidden),
            Affine.init(rng, config.hidden, config.hidden),
            Affine.init(rng, config.hidden, config.hidden2),
            Affine.init(rng, config.hidden2, num_classes),
        )

    @property
    def num_classes(self) -> int:
        return self.out.d_out


def classifier_logits(f_text, f_audio, f_visual, params: ClassifierParams) -> TapeTensor:
    """Batched logits (n, K) from per-utterance modality features (n, D) each."""
    h = params.fc(nc.concat_cols([f_text, f_audio, f_visual]))
    h = params.mlp2(nc.relu(params.mlp1(h)))
    return params.out(h)


def classify(f_text, f_audio, f_visual, params: ClassifierParams) -> TapeTensor:
    """Class probabilities for a single utterance given three D-vectors."""
    feats = [nc.constant(f) for f in (f_text, f_audio, f_visual)]
    for f in feats:
        if f.values.ndim != 1:
            raise nc.ShapeError(f"classify expects vectors, got shape {f.shape}")
        if not np.isfinite(f.values).all():
            raise ValueError("classify: non-finite input feature")
    rows = [nc.reshape(f, (1, f.shape[0])) for f in feats]
    probs = nc.softmax_lastdim(classifier_logits(*rows, params))
    return nc.reshape(probs, (params.num_classes,))


def predict(logits: TapeTensor) -> np.ndarray:
    return np.argmax(logits.values, axis=-1)


def cross_entropy(logits, labels) -> TapeTensor:
    """Mean −log softmax(logits)[label] over rows (a single vector is one row)."""
    return nc.cross_entropy_logits(logits, labels)


def total_loss(ce, contrast, lam: float) -> TapeTensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return nc.constant(ce)
    return nc.add(ce, nc.scale(contrast, lam))


@dataclass
class EvalReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted

    @property
    def num_classes(self) -> int:
        return len(self.support)

    def to_dict(self) -> dict:
        return {
            "weighted_f1": float(self.weighted_f1),
            "n": int(self.support.sum()),
            "per_class": [
                {
                    "class": c,
                    "precision": float(self.precision[c]),
                    "recall": float(self.recall[c]),
                    "f1": float(self.f1[c]),
                    "support": int(self.support[c]),
                }
                for c in range(self.num_classes)
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_table(self) -> str:
        lines = [f"{'class':>5}  {'prec':>7}  {'recall':>7}  {'f1':>7}  {'support':>7}"]
        for c in range(self.num_classes):
            lines.append(
                f"{c:>5}  {self.precision[c]:7.4f}  {self.recall[c]:7.4f}  {self.f1[c]:7.4f}  {self.support[c]:>7d}"
            )
        lines.append(f"weighted F1: {self.weighted_f1:.4f}  (n={int(self.support.sum())})")
        lines.append("confusion (rows=true, cols=pred):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:>5d}" for v in row))
        return "\n".join(lines)


def weighted_f1(predictions, labels, num_classes: int) -> EvalReport:
    preds = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("predictions and labels must be 1-D and of equal length")
    if labels.size == 0:
        raise ValueError("weighted_f1 of an empty evaluation set")
    for arr in (preds, labels):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"class id outside 0..{num_classes - 1}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    # rational arithmetic per class, one rounding at the end
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    prec, rec, f1 = [], [], []
    for c in range(num_classes):
        tp = int(confusion[c, c])
        p = Fraction(tp, int(predicted[c])) if predicted[c] else Fraction(0)
        r = Fraction(tp, int(support[c])) if support[c] else Fraction(0)
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else Fraction(0))
    wf1 = sum(int(n) * f for n, f in zip(support, f1)) / int(labels.size)
    as_array = lambda xs: np.array([float(x) for x in xs])
    return EvalReport(as_array(prec), as_array(rec), as_array(f1), support, float(wf1), confusion)
