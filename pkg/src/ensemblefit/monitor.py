"""Validation-loss consistency checks and evaluation artifacts (metrics, confidence, correlation, curves)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import write_pgm
from .tensor_net import Conv2D, LayeredModel, ShapeError, forward
from .transfer import TrainingHistory

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")
GAP_COLUMN = "loss_gap"  # val_loss - train_loss, diagnostic only


@dataclass(frozen=True)
class ConsistencyCriterion:
    epsilon: float = 0.001
    window: int = 3

    def __post_init__(self):
        if self.epsilon < 0 or not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite and >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class ConsistencyReport:
    deltas: np.ndarray = field(repr=False)
    first_stable_epoch: int | None
    empirical_epsilon: float
    reusable: bool
    epsilon: float
    window: int
    tail: int

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "window": self.window, "tail": self.tail,
                "first_stable_epoch": self.first_stable_epoch,
                "empirical_epsilon": self.empirical_epsilon, "reusable": self.reusable}


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _val_losses(history) -> np.ndarray:
    values = history.val_loss if isinstance(history, TrainingHistory) else history
    return np.asarray(values, dtype=np.float64)


def successive_deltas(history) -> np.ndarray:
    """|val_loss[t+1] - val_loss[t]| for each pair of consecutive epochs."""
    v = _val_losses(history)
    if v.size < 2:
        raise ValueError("need at least 2 epochs")
    return np.abs(np.diff(v))


def first_stable_epoch(history, criterion: ConsistencyCriterion) -> int | None:
    """Smallest t with deltas t .. t+window-1 all within epsilon, or None."""
    d = successive_deltas(history)
    if d.size < criterion.window:
        raise ValueError(f"need at least window + 1 = {criterion.window + 1} epochs, got {d.size + 1}")
    ok = d <= criterion.epsilon
    run = 0
    for t, good in enumerate(ok):
        run = run + 1 if good else 0
        if run == criterion.window:
            return t - criterion.window + 1
    return None


def default_tail(epochs: int) -> int:
    """Last quarter of the run, at least 3 deltas, never more than exist."""
    return max(1, min(max(3, math.ceil(0.25 * epochs)), epochs - 1))


def empirical_epsilon(history, tail: int | None = None) -> float:
    """Largest of the last ``tail`` deltas."""
    d = successive_deltas(history)
    tail = default_tail(d.size + 1) if tail is None else tail
    if not 1 <= tail <= d.size:
        raise ValueError(f"tail must be in 1..{d.size}, got {tail}")
    return float(d[-tail:].max())


def consistency_report(history, criterion: ConsistencyCriterion | None = None,
                       tail: int | None = None) -> ConsistencyReport:
    criterion = criterion or ConsistencyCriterion()
    d = successive_deltas(history)
    tail = default_tail(d.size + 1) if tail is None else tail
    eps = empirical_epsilon(history, tail)
    stable = first_stable_epoch(history, criterion) if d.size >= criterion.window else None
    return ConsistencyReport(d, stable, eps, eps <= criterion.epsilon, criterion.epsilon, criterion.window, tail)


# -- metrics ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()  # metrics whose ratio was 0/0 and reported as 0

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "confusion": asdict(self.confusion), "undefined": list(self.undefined)}


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    undefined: list[str] = []
    p = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    r = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    f1 = _ratio(2 * p * r, p + r, "f1", undefined)
    return Metrics(cm, (cm.tp + cm.tn) / cm.total, p, r, f1, tuple(undefined))


def compute_metrics(predictions, labels, threshold: float = 0.5) -> Metrics:
    """Confusion-based metrics with ``probability >= threshold`` counted as defect."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ValueError("empty input")
    if p.size != y.size:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pred, truth = p >= threshold, y == 1
    cm = ConfusionMatrix(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                         int(np.sum(~pred & truth)), int(np.sum(~pred & ~truth)))
    return metrics_from_confusion(cm)


# -- confidence ------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceRow:
    item_id: str
    probability: float
    predicted: int
    true: int | None


def batch_confidence(model, X, labels=None, item_ids: Sequence[str] | None = None,
                     threshold: float = 0.5) -> list[ConfidenceRow]:
    """One row per item. ``model`` is a LayeredModel or an EnsembleModel."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty batch")
    if isinstance(model, LayeredModel):
        probs = forward(model, X)[:, 0]
    else:
        from .ensemble import predict

        if tuple(X.shape[1:]) != tuple(model.expected_shape):
            raise ShapeError(f"batch shape {X.shape} does not match (batch,) + {tuple(model.expected_shape)}")
        probs = predict(model, X)
        threshold = model.threshold
    ids = [str(i) for i in range(len(X))] if item_ids is None else [str(i) for i in item_ids]
    truth = [None] * len(X) if labels is None else [int(v) for v in np.asarray(labels).reshape(-1)]
    if len(ids) != len(X) or len(truth) != len(X):
        raise ValueError("item_ids and labels must match the batch length")
    return [ConfidenceRow(i, float(p), int(p >= threshold), t) for i, p, t in zip(ids, probs, truth)]


def write_confidence_csv(rows: Sequence[ConfidenceRow], path) -> Path:
    path = _prepare(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("item_id", "probability", "predicted", "true"))
        for r in rows:
            w.writerow((r.item_id, f"{r.probability:.10g}", r.predicted, "" if r.true is None else r.true))
    return path


# -- feature correlation -----------------------------------------------------------------


@dataclass(frozen=True)
class Correlation:
    matrix: np.ndarray
    constant_channels: tuple[int, ...]  # rows/cols set to 0, diagonal included


def last_conv_index(model: LayeredModel) -> int:
    idx = [i for i, layer in enumerate(model.layers) if isinstance(layer, Conv2D)]
    if not idx:
        raise ValueError("model has no conv layer")
    return idx[-1]


def channel_correlation(activation: np.ndarray) -> Correlation:
    """Pearson correlation between the flattened maps of a (C, H, W) activation."""
    a = np.asarray(activation, dtype=np.float64).reshape(activation.shape[0], -1)
    centered = a - a.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered**2, axis=1))
    scale = np.abs(a).max(axis=1)
    constant = norms <= 1e-12 * np.maximum(scale, 1.0) * math.sqrt(a.shape[1])
    safe = np.where(constant, 1.0, norms)
    unit = centered / safe[:, None]
    unit[constant] = 0.0
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    live = ~constant
    corr[np.diag_indices_from(corr)] = np.where(live, 1.0, 0.0)
    return Correlation(corr, tuple(int(i) for i in np.flatnonzero(constant)))


def feature_correlation(model: LayeredModel, image, layer_index: int | None = None) -> Correlation:
    """Channel correlation of a conv layer's output for one (C, H, W) image; default is the last conv layer."""
    layer_index = last_conv_index(model) if layer_index is None else layer_index
    if not 0 <= layer_index < len(model.layers) or not isinstance(model.layers[layer_index], Conv2D):
        raise ValueError(f"layer {layer_index} is not a conv layer")
    x = np.asarray(image, dtype=np.float64)
    act = forward(model, x[None], upto=layer_index + 1)[0]
    return channel_correlation(act)


def heatmap_pixels(matrix) -> np.ndarray:
    """Map [-1, 1] to 0..255 with floor((v + 1) / 2 * 255); 0 maps to 127."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), -1.0, 1.0)
    return np.floor((m + 1.0) / 2.0 * 255.0).astype(np.uint8)


def render_heatmap(matrix, path) -> Path:
    path = _prepare(path)
    write_pgm(path, heatmap_pixels(matrix))
    return path


# -- curves and report -----------------------------------------------------------------------


def export_curves(history: TrainingHistory, path, gap: bool = True) -> Path:
    """history.csv with 10 significant digits, plus the loss-gap diagnostic column."""
    path = _prepare(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS + ((GAP_COLUMN,) if gap else ()))
        for e in range(history.epochs):
            row = [history.train_loss[e], history.val_loss[e], history.train_acc[e], history.val_acc[e]]
            if gap:
                row.append(history.val_loss[e] - history.train_loss[e])
            w.writerow([e, *(f"{v:.10g}" for v in row)])
    return path


def read_curves(path) -> TrainingHistory:
    history = TrainingHistory()
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CURVE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            history.append(row["train_loss"], row["val_loss"], row["train_acc"], row["val_acc"])
    return history


def build_report(metrics: Metrics, threshold: float, consistency: ConsistencyReport | None = None,
                 **extra) -> dict:
    doc = {**metrics.to_json(), "threshold": threshold}
    if consistency is not None:
        doc["consistency"] = consistency.to_json()
    doc.update(extra)
    return doc


def write_report(doc: dict, path) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
