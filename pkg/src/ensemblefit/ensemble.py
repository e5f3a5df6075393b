"""Shape-gated ensembles of fine-tuned members: min-loss selection and weighted logits."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_net import LayeredModel, bce_loss, forward, load_model, logits, save_model, sigmoid

log = logging.getLogger(__name__)

MIN_LOSS, RECIPROCAL, CALIBRATED = "min_loss", "reciprocal", "calibrated"
MODES = (MIN_LOSS, RECIPROCAL, CALIBRATED)
WEIGHT_FLOOR = 1e-8
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MemberRecord:
    model_id: str
    model: LayeredModel = field(repr=False, compare=False)
    input_shape: tuple[int, ...]
    val_loss: float | None = None
    weight: float | None = None


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple[MemberRecord, ...]
    expected_shape: tuple[int, ...]
    mode: str = MIN_LOSS
    threshold: float = 0.5
    combine: str = "logit"  # "logit": sigmoid of weighted logits; "prob": weighted mean probability
    rejected: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.combine not in ("logit", "prob"):
            raise ValueError(f"unknown combine rule {self.combine!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        for m in self.members:
            if tuple(m.input_shape) != tuple(self.expected_shape):
                raise ValueError(f"member {m.model_id} has shape {m.input_shape}, expected {self.expected_shape}")

    @property
    def losses(self) -> list[float | None]:
        return [m.val_loss for m in self.members]

    @property
    def weights(self) -> np.ndarray | None:
        w = [m.weight for m in self.members]
        return None if any(x is None for x in w) else np.array(w, dtype=np.float64)

    def with_weights(self, weights, mode: str) -> EnsembleModel:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(self.members),):
            raise ValueError(f"need {len(self.members)} weights, got shape {weights.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        members = tuple(replace(m, weight=float(w)) for m, w in zip(self.members, weights))
        return replace(self, members=members, mode=mode)


def build_ensemble(candidates: Sequence[LayeredModel], expected_shape, n: int,
                   model_ids: Sequence[str] | None = None, **kwargs) -> EnsembleModel:
    """Admit, in order, up to ``n`` candidates whose input shape equals ``expected_shape``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    expected_shape = tuple(int(d) for d in expected_shape)
    ids = list(model_ids) if model_ids is not None else [f"member{i}" for i in range(len(candidates))]
    admitted, rejected = [], []
    for model_id, model in zip(ids, candidates):
        if len(admitted) == n:
            rejected.append((model_id, "ensemble full"))
        elif tuple(model.input_shape) != expected_shape:
            rejected.append((model_id, f"input shape {tuple(model.input_shape)} != {expected_shape}"))
            log.info("rejected %s: input shape %s", model_id, tuple(model.input_shape))
        else:
            admitted.append(MemberRecord(model_id, model, tuple(model.input_shape)))
    if not admitted:
        raise ValueError("no shape-compatible candidates")
    return EnsembleModel(tuple(admitted), expected_shape, rejected=tuple(rejected), **kwargs)


def _batched(fn, model, X, chunk=128):
    return np.concatenate([fn(model, X[i : i + chunk]) for i in range(0, len(X), chunk)])


def member_probs(ensemble: EnsembleModel, X) -> np.ndarray:
    """(n_members, n_items) sigmoid outputs."""
    return np.stack([_batched(forward, m.model, X)[:, 0] for m in ensemble.members])


def member_logits(ensemble: EnsembleModel, X) -> np.ndarray:
    """(n_members, n_items) pre-sigmoid outputs."""
    return np.stack([_batched(logits, m.model, X)[:, 0] for m in ensemble.members])


def evaluate_members(ensemble: EnsembleModel, X, y) -> EnsembleModel:
    """Fill each member's ``val_loss`` with its mean BCE on (X, y)."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty validation set")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    probs = member_probs(ensemble, X)
    members = tuple(replace(m, val_loss=bce_loss(p, y)[0]) for m, p in zip(ensemble.members, probs))
    return replace(ensemble, members=members)


def select_min_loss(ensemble: EnsembleModel) -> int:
    """Index of the lowest validation loss; ties go to the lowest index."""
    losses = ensemble.losses
    if any(loss is None for loss in losses):
        raise ValueError("member validation losses not computed")
    best = 0
    for i, loss in enumerate(losses):
        if loss < losses[best]:
            best = i
    return best


def predict_min_loss(ensemble: EnsembleModel, X) -> np.ndarray:
    member = ensemble.members[select_min_loss(ensemble)]
    return _batched(forward, member.model, np.asarray(X, dtype=np.float64))[:, 0]


def reciprocal_weights(losses: Sequence[float]) -> np.ndarray:
    """Weights proportional to 1 / loss, normalised to sum to one."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("no losses given")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and nonnegative")
    inv = 1.0 / np.maximum(losses, WEIGHT_FLOOR)
    return inv / inv.sum()


def apply_reciprocal_weights(ensemble: EnsembleModel) -> EnsembleModel:
    if any(loss is None for loss in ensemble.losses):
        raise ValueError("member validation losses not computed")
    return ensemble.with_weights(reciprocal_weights(ensemble.losses), RECIPROCAL)


def _combine(ensemble: EnsembleModel, weights: np.ndarray, member_out: np.ndarray) -> np.ndarray:
    if ensemble.combine == "logit":
        return sigmoid(weights @ member_out)
    return weights @ member_out


def combine_weighted(ensemble: EnsembleModel, X, weights=None) -> np.ndarray:
    """Weighted combination of member outputs (see ``EnsembleModel.combine``)."""
    weights = ensemble.weights if weights is None else np.asarray(weights, dtype=np.float64)
    if weights is None:
        raise ValueError("ensemble weights are not set")
    X = np.asarray(X, dtype=np.float64)
    out = member_logits(ensemble, X) if ensemble.combine == "logit" else member_probs(ensemble, X)
    return _combine(ensemble, weights, out)


def simplex_grid(n: int, grid_step: float = 0.1) -> np.ndarray:
    """All weight vectors on the ``grid_step`` simplex lattice, first member's weight descending.

    Row order is the tie-break order: (1, 0, ..., 0) comes first.
    """
    k = round(1.0 / grid_step)
    if k < 1 or abs(k * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid_step must divide 1 evenly, got {grid_step}")
    rows = [c for c in itertools.product(range(k, -1, -1), repeat=n) if sum(c) == k]
    return np.array(rows, dtype=np.float64) / k


def calibration_objective(ensemble: EnsembleModel, member_out: np.ndarray, y: np.ndarray,
                          weights: np.ndarray, lam: float) -> np.ndarray:
    """Accuracy minus ``lam`` times mean BCE, for each row of ``weights``."""
    probs = _combine(ensemble, np.atleast_2d(weights), member_out)
    acc = np.mean((probs >= ensemble.threshold) == (y >= 0.5), axis=1)
    p = np.clip(probs, 1e-7, 1 - 1e-7)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p), axis=1)
    return acc - lam * bce


def calibrate_weights(ensemble: EnsembleModel, X, y, lam: float = 1.0, grid_step: float = 0.1) -> EnsembleModel:
    """Exhaustive simplex-grid search for the weights maximising accuracy - lam * BCE."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty validation set")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    grid = simplex_grid(len(ensemble.members), grid_step)
    out = member_logits(ensemble, X) if ensemble.combine == "logit" else member_probs(ensemble, X)
    scores = calibration_objective(ensemble, out, y, grid, lam)
    return ensemble.with_weights(grid[int(np.argmax(scores))], CALIBRATED)


def classify(probability, threshold: float = 0.5):
    """1 where ``probability >= threshold`` else 0 (scalar in, int out)."""
    out = (np.asarray(probability) >= threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def predict(ensemble: EnsembleModel, X) -> np.ndarray:
    """Positive-class probabilities under the ensemble's mode."""
    if ensemble.mode == MIN_LOSS:
        return predict_min_loss(ensemble, X)
    return combine_weighted(ensemble, X)


# -- manifest ------------------------------------------------------------------------


def save_ensemble(ensemble: EnsembleModel, out_dir, models_subdir: str = "members") -> Path:
    """Write member models and ``ensemble.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    members = []
    for m in ensemble.members:
        rel = f"{models_subdir}/{m.model_id}.json"
        save_model(m.model, out_dir / rel)
        members.append({"model_id": m.model_id, "model_path": rel, "val_loss": m.val_loss, "weight": m.weight})
    doc = {
        "format_version": FORMAT_VERSION,
        "mode": ensemble.mode,
        "combine": ensemble.combine,
        "threshold": ensemble.threshold,
        "expected_shape": list(ensemble.expected_shape),
        "members": members,
    }
    path = out_dir / "ensemble.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_ensemble(path) -> EnsembleModel:
    path = Path(path)
    if path.is_dir():
        path = path / "ensemble.json"
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"ensemble format_version mismatch: found {doc.get('format_version')!r}, "
                         f"expected {FORMAT_VERSION}")
    members = []
    for entry in doc["members"]:
        model = load_model(path.parent / entry["model_path"])
        members.append(MemberRecord(entry["model_id"], model, tuple(model.input_shape),
                                    entry.get("val_loss"), entry.get("weight")))
    return EnsembleModel(tuple(members), tuple(doc["expected_shape"]), doc["mode"],
                         doc["threshold"], doc.get("combine", "logit"))
