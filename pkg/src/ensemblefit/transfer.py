"""Backbone pretraining, head grafting, layer freezing and fine-tuning."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import AugmentPipeline, Dataset, augment_batch
from .tensor_net import (
    Conv2D,
    Dense,
    Flatten,
    LayeredModel,
    SgdSchedule,
    Sigmoid,
    ShapeError,
    backward,
    bce_loss,
    averaging_kernel,
    build_layers,
    forward,
    make_optimizer,
)

log = logging.getLogger(__name__)

# Three desk-scale stand-ins of differing depth and width. Layer 0 is a 1x1 input
# adapter (the layer grafting replaces); everything after the Flatten is the head.
# Coarse max pooling before the head keeps features roughly position-invariant.
ADAPTER = {"conv": 1, "k": 1, "init": "average"}
BACKBONES: dict[str, list[dict]] = {
    "small": [
        ADAPTER,
        {"conv": 8}, {"relu": 1}, {"pool": 2},
        {"conv": 16}, {"relu": 1}, {"pool": 4},
        {"flatten": 1}, {"dense": 1}, {"sigmoid": 1},
    ],
    "medium": [
        ADAPTER,
        {"conv": 8}, {"relu": 1}, {"pool": 2},
        {"conv": 16}, {"relu": 1}, {"pool": 2},
        {"conv": 16}, {"relu": 1}, {"pool": 2},
        {"flatten": 1}, {"dense": 1}, {"sigmoid": 1},
    ],
    "wide": [
        ADAPTER,
        {"conv": 24, "k": 5}, {"relu": 1}, {"pool": 8},
        {"flatten": 1}, {"dense": 1}, {"sigmoid": 1},
    ],
}

Arrays = tuple[np.ndarray, np.ndarray]


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.val_loss)

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def append(self, train_loss, val_loss, train_acc, val_acc):
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.train_acc.append(float(train_acc))
        self.val_acc.append(float(val_acc))


@dataclass
class PretrainedModel:
    model: LayeredModel
    source_task_id: str
    epochs: int
    final_train_acc: float

    @property
    def source_meta(self) -> dict:
        return {"source_task_id": self.source_task_id, "epochs": self.epochs,
                "final_train_acc": self.final_train_acc}


@dataclass
class FineTuneConfig:
    batch_size: int = 32
    epochs: int = 10
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    # "backbone": freeze the transferred middle layers; None: keep the model's own flags
    freeze_range: tuple[int, int] | str | None = "backbone"
    optimizer: str = "adam"  # "sgd" applies sgd_step to the raw gradients
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


def build_backbone(spec: str | list[dict], input_shape, seed: int = 0) -> LayeredModel:
    entries = BACKBONES[spec] if isinstance(spec, str) else spec
    rng = np.random.default_rng([seed, 11])
    return LayeredModel(build_layers(entries, input_shape, rng), tuple(input_shape))


def as_arrays(data, image_size=None) -> Arrays:
    if isinstance(data, Dataset):
        from .data import to_arrays

        size = image_size or data.items[0].pixels.shape[:2]
        return to_arrays(data, size)
    X, y = data
    y = np.asarray(y, dtype=np.float64)
    return np.asarray(X, dtype=np.float64), y.reshape(len(y), -1)


def predict(model: LayeredModel, X: np.ndarray, chunk: int = 128) -> np.ndarray:
    if len(X) == 0:
        raise ValueError("empty input")
    return np.concatenate([forward(model, X[i : i + chunk]) for i in range(0, len(X), chunk)])


def evaluate(model: LayeredModel, X, y, threshold: float = 0.5) -> tuple[float, float]:
    """Mean BCE and accuracy of ``model`` on (X, y)."""
    p = predict(model, X)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    loss, _ = bce_loss(p, y)
    return loss, float(np.mean((p >= threshold) == (y >= 0.5)))


def head_start(model: LayeredModel) -> int:
    """Index of the first head layer (the one following the last Flatten)."""
    flat = [i for i, layer in enumerate(model.layers) if isinstance(layer, Flatten)]
    if not flat:
        raise ValueError("model has no Flatten layer separating backbone and head")
    return flat[-1] + 1


def backbone_range(model: LayeredModel) -> tuple[int, int]:
    """Transferred layers: everything between the input adapter and the head."""
    return 1, head_start(model)


def freeze(model: LayeredModel, layer_range: tuple[int, int] | None = None) -> LayeredModel:
    """Copy of ``model`` with layers ``range(*layer_range)`` marked non-trainable."""
    if not model.layers:
        raise ValueError("cannot freeze an empty model")
    start, stop = backbone_range(model) if layer_range is None else layer_range
    if not 0 <= start <= stop <= len(model.layers):
        raise ValueError(f"freeze range {(start, stop)} outside 0..{len(model.layers)}")
    out = model.copy()
    for layer in out.layers[start:stop]:
        layer.trainable = False
    return out


def train_epochs(model: LayeredModel, train: Arrays, val: Arrays | None, config: FineTuneConfig,
                 augment: AugmentPipeline | None = None,
                 callback: Callable[[int, LayeredModel, TrainingHistory], None] | None = None) -> TrainingHistory:
    """Mini-batch SGD on BCE, in place. One history row per epoch."""
    X, y = train
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {n}")
    rng = np.random.default_rng([config.seed, 7])
    optimizer = make_optimizer(config.optimizer)
    history = TrainingHistory()
    for epoch in range(config.epochs):
        lr = config.schedule.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum = correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = X[idx] if augment is None else augment_batch(X[idx], augment, epoch, idx)
            pred = forward(model, xb)
            loss, grad = bce_loss(pred, y[idx])
            optimizer.step(model, backward(model, grad), lr)
            loss_sum += loss * len(idx)
            correct += float(np.sum((pred >= 0.5) == (y[idx] >= 0.5))) / y.shape[1]
        if val is not None:
            val_loss, val_acc = evaluate(model, *val)
        else:
            val_loss, val_acc = float("nan"), float("nan")
        history.append(loss_sum / n, val_loss, correct / n, val_acc)
        log.debug("epoch %d lr %.5g train_loss %.4f val_loss %.4f val_acc %.3f",
                  epoch, lr, history.train_loss[-1], val_loss, val_acc)
        if callback is not None:
            callback(epoch, model, history)
    return history


def pretrain_backbone(source, backbone_spec: str | list[dict], config: FineTuneConfig,
                      source_task_id: str = "synthetic-scratch-vs-plain") -> PretrainedModel:
    """Train every layer of a freshly initialised backbone on the source task."""
    X, y = as_arrays(source)
    if len(X) == 0:
        raise ValueError("empty source dataset")
    if len(np.unique(y, axis=0)) < 2:
        raise ValueError("source dataset needs at least two classes")
    model = build_backbone(backbone_spec, X.shape[1:], seed=config.seed)
    if model.output_shape != (y.shape[1],):
        raise ShapeError(f"backbone head outputs {model.output_shape}, labels have {y.shape[1]} columns")
    history = train_epochs(model, (X, y), None, config)
    return PretrainedModel(model, source_task_id, config.epochs, history.train_acc[-1])


def graft_head(pretrained: PretrainedModel | LayeredModel, new_input_shape, n_outputs: int = 1,
               seed: int = 0) -> LayeredModel:
    """Swap in a fresh input convolution and a fresh Dense + Sigmoid output head.

    Middle layers are copied with their pretrained values; the new layers are trainable.
    A 1x1 input layer starts as a channel average of the new input so the frozen
    layers initially see the intensities they were trained on.
    """
    source = pretrained.model if isinstance(pretrained, PretrainedModel) else pretrained
    first = source.layers[0]
    if not isinstance(first, Conv2D):
        raise ValueError("backbone must start with a Conv2D input layer")
    if n_outputs < 1:
        raise ValueError("n_outputs must be positive")
    new_input_shape = tuple(int(d) for d in new_input_shape)
    rng = np.random.default_rng([seed, 13])
    stem = Conv2D(new_input_shape[0], first.out_ch, first.kernel_h, first.kernel_w,
                  first.stride, first.padding, rng=rng)
    if (first.kernel_h, first.kernel_w) == (1, 1):
        stem.params["weight"] = averaging_kernel(stem.params["weight"].shape)
    middle = copy.deepcopy(source.layers[1 : head_start(source)])
    shape = stem.output_shape(new_input_shape)
    for offset, layer in enumerate(middle, start=1):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"grafted layer {offset} ({layer!r}) incompatible with new input: {exc}") from None
    head = [Dense(shape[0], n_outputs, rng=rng), Sigmoid()]
    return LayeredModel([stem, *middle, *head], new_input_shape)


def finetune(model: LayeredModel, train, val, config: FineTuneConfig,
             augment: AugmentPipeline | None = None, callback=None) -> tuple[LayeredModel, TrainingHistory]:
    """Fine-tune a copy of ``model``; layers in ``config.freeze_range`` are frozen first.

    With ``freeze_range=None`` the model's own trainable flags are used as-is.
    """
    if not model.layers or not isinstance(model.layers[-1], Sigmoid):
        raise ValueError("finetune expects a sigmoid-headed model")
    train, val = as_arrays(train), as_arrays(val)
    if config.freeze_range is None:
        tuned = model.copy()
    else:
        tuned = freeze(model, None if config.freeze_range == "backbone" else tuple(config.freeze_range))
    history = train_epochs(tuned, train, val, config, augment, callback)
    return tuned, history


def from_scratch(backbone_spec, input_shape, seed: int = 0) -> LayeredModel:
    """Baseline with the same topology as a grafted backbone, all layers trainable."""
    return build_backbone(backbone_spec, input_shape, seed=seed)
