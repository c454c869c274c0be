from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix as _sk_confusion

from .data import Dataset, Partition
from .errors import ContractViolation
from .model import ImageGeometry, ModelDims, ModelParams, classify, ce_loss, encode, patchify
from .numerics import Tensor, no_grad


@dataclass
class F1Report:
    per_class: np.ndarray
    macro: float
    absent: np.ndarray


@dataclass
class EvalResult:
    accuracy: float
    f1_macro: float
    loss: float
    per_class_f1: np.ndarray
    absent_classes: np.ndarray
    num_samples: int


@dataclass
class HeterogeneityReport:
    counts: pd.DataFrame
    skew: float

    def to_csv(self, path) -> None:
        self.counts.to_csv(path, index=False)


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.size == 0:
        raise ContractViolation("Métricas sobre entrada vazia")
    if p.size != y.size:
        raise ContractViolation(f"{p.size} predições para {y.size} rótulos")
    return p, y


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Linhas = classe verdadeira, colunas = classe predita."""
    p, y = _check_pair(preds, labels)
    return _sk_confusion(y, p, labels=np.arange(num_classes)).astype(np.int64)


def accuracy(preds, labels) -> float:
    p, y = _check_pair(preds, labels)
    return float(np.mean(p == y))


def f1_per_class(preds, labels, num_classes: int) -> F1Report:
    """F1_j = 2TP / (2TP + FP + FN); classes sem instâncias nem predições valem 1.0 e ficam marcadas."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    absent = denom == 0
    f1 = np.where(absent, 1.0, 2 * tp / np.where(absent, 1.0, denom))
    return F1Report(per_class=f1, macro=float(f1.mean()), absent=absent)


def heterogeneity_report(part: Partition, ds: Dataset) -> HeterogeneityReport:
    rows = []
    for k, indices in enumerate(part.client_indices):
        hist = np.bincount(ds.labels[indices], minlength=ds.num_classes)
        rows.extend({"client_id": k, "class_id": j, "count": int(c)} for j, c in enumerate(hist))
    counts = pd.DataFrame(rows, columns=["client_id", "class_id", "count"])

    table = counts.pivot(index="class_id", columns="client_id", values="count").to_numpy(dtype=np.float64)
    totals = table.sum(axis=1, keepdims=True)
    shares = np.divide(table, totals, out=np.zeros_like(table), where=totals > 0)
    present = totals[:, 0] > 0
    skew = float(shares[present].max(axis=1).mean()) if present.any() else 0.0
    return HeterogeneityReport(counts=counts, skew=skew)


def predict_logits(
    params: ModelParams,
    images: np.ndarray,
    g: ImageGeometry,
    dims: ModelDims,
    batch_size: int = 64,
) -> np.ndarray:
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            patches = patchify(images[start : start + batch_size], g)
            outputs.append(classify(encode(patches, g, params, dims), params).data)
    return np.concatenate(outputs) if outputs else np.empty((0, dims.num_classes))


def evaluate_params(
    params: ModelParams,
    ds: Dataset,
    g: ImageGeometry,
    dims: ModelDims,
    batch_size: int = 64,
) -> EvalResult:
    logits = predict_logits(params, ds.images, g, dims, batch_size)
    preds = logits.argmax(axis=1)
    with no_grad():
        loss = float(ce_loss(Tensor(logits), ds.labels).data)
    f1 = f1_per_class(preds, ds.labels, ds.num_classes)
    return EvalResult(
        accuracy=accuracy(preds, ds.labels),
        f1_macro=f1.macro,
        loss=loss,
        per_class_f1=f1.per_class,
        absent_classes=f1.absent,
        num_samples=len(ds),
    )
