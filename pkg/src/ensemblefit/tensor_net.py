"""Small differentiable CNN engine on float64 numpy arrays.

Tensors are plain ``np.ndarray`` objects in (batch, channels, height, width)
layout for images and (batch, features) for dense activations. A model is an
ordered stack of layers; ``forward`` caches what ``backward`` needs on the
model itself, so one model instance serves one evaluation context at a time.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1
BCE_EPS = 1e-7

Shape = tuple[int, ...]
Grads = dict[int, dict[str, np.ndarray]]


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def averaging_kernel(shape: Shape) -> np.ndarray:
    """1x1 kernel whose every output channel is the mean of the input channels."""
    out_ch, in_ch, kh, kw = shape
    if (kh, kw) != (1, 1):
        raise ValueError("averaging init needs a 1x1 kernel")
    return np.full(shape, 1.0 / in_ch)


class Layer:
    """Base layer. Subclasses with parameters keep them in ``self.params``."""

    kind = "layer"

    def __init__(self, trainable: bool = True):
        self.trainable = trainable
        self.params: dict[str, np.ndarray] = {}

    def hyperparams(self) -> dict:
        return {}

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparams().items())
        return f"{type(self).__name__}({hp}{', frozen' if not self.trainable else ''})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel_h=3, kernel_w=None, stride=1, padding=1,
                 rng: np.random.Generator | None = None, trainable=True):
        super().__init__(trainable)
        kernel_w = kernel_h if kernel_w is None else kernel_w
        if min(in_ch, out_ch, kernel_h, kernel_w, stride) < 1 or padding < 0:
            raise ValueError("Conv2D sizes must be positive and padding nonnegative")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel_h, self.kernel_w = int(kernel_h), int(kernel_w)
        self.stride, self.padding = int(stride), int(padding)
        shape = (self.out_ch, self.in_ch, self.kernel_h, self.kernel_w)
        if rng is None:
            weight = np.zeros(shape)
        else:
            rf = self.kernel_h * self.kernel_w
            weight = glorot_uniform(rng, shape, self.in_ch * rf, self.out_ch * rf)
        self.params = {"weight": weight, "bias": np.zeros(self.out_ch)}

    def hyperparams(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel_h": self.kernel_h,
                "kernel_w": self.kernel_w, "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"expects ({self.in_ch}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {tuple(in_shape)} too small for kernel")
        return (self.out_ch, ho, wo)

    def forward(self, x):
        p, s = self.padding, self.stride
        kh, kw = self.kernel_h, self.kernel_w
        n = x.shape[0]
        _, ho, wo = self.output_shape(x.shape[1:])
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        xt = xp.transpose(1, 0, 2, 3)
        # receptive fields laid out as (C, kh, kw, N, Ho, Wo)
        cols = np.empty((self.in_ch, kh, kw, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
        cols = cols.reshape(self.in_ch * kh * kw, -1)
        out = self.params["weight"].reshape(self.out_ch, -1) @ cols + self.params["bias"][:, None]
        out = out.reshape(self.out_ch, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), (cols, xp.shape)

    def backward(self, dout, cache, need_dx=True, need_params=True):
        cols, xp_shape = cache
        n, _, ho, wo = dout.shape
        kh, kw, s, p = self.kernel_h, self.kernel_w, self.stride, self.padding
        weight = self.params["weight"]
        dt = dout.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
        grads = {}
        if need_params:
            grads = {"weight": (dt @ cols.T).reshape(weight.shape), "bias": dt.sum(axis=1)}
        if not need_dx:
            return None, grads
        dcols = (weight.reshape(self.out_ch, -1).T @ dt).reshape(self.in_ch, kh, kw, n, ho, wo)
        dxp = np.zeros((xp_shape[1], xp_shape[0], xp_shape[2], xp_shape[3]))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j]
        dx = dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), grads


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "maxpool2d"

    def __init__(self, k_h=2, k_w=None, trainable=True):
        super().__init__(trainable)
        self.k_h = int(k_h)
        self.k_w = self.k_h if k_w is None else int(k_w)

    def hyperparams(self):
        return {"k_h": self.k_h, "k_w": self.k_w}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.k_h or w < self.k_w:
            raise ShapeError(f"input {tuple(in_shape)} smaller than pool window")
        return (c, h // self.k_h, w // self.k_w)

    def forward(self, x):
        n, c, h, w = x.shape
        kh, kw = self.k_h, self.k_w
        ho, wo = h // kh, w // kw
        xc = x[:, :, : ho * kh, : wo * kw]
        blocks = xc.reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        shape, idx = cache
        n, c, h, w = shape
        kh, kw = self.k_h, self.k_w
        ho, wo = h // kh, w // kw
        blocks = np.zeros((n, c, ho, wo, kh * kw))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, : ho * kh, : wo * kw] = (
            blocks.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        )
        return dx, {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        out = sigmoid(x)
        return out, out

    def backward(self, dout, out):
        return dout * out * (1.0 - out), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng: np.random.Generator | None = None, trainable=True):
        super().__init__(trainable)
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        shape = (self.out_dim, self.in_dim)
        weight = np.zeros(shape) if rng is None else glorot_uniform(rng, shape, self.in_dim, self.out_dim)
        self.params = {"weight": weight, "bias": np.zeros(self.out_dim)}

    def hyperparams(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"expects ({self.in_dim},) input, got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dout, x):
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"], grads


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool2D, ReLU, Sigmoid, Flatten, Dense)}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


@dataclass
class LayeredModel:
    layers: list[Layer]
    input_shape: Shape
    _cache: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes()

    def shapes(self) -> list[Shape]:
        """Output shape of every layer; raises ShapeError naming the first bad layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from None
            out.append(shape)
        return out

    @property
    def output_shape(self) -> Shape:
        return self.shapes()[-1] if self.layers else self.input_shape

    @property
    def trainable_parameter_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers if layer.trainable)

    @property
    def parameter_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def copy(self) -> LayeredModel:
        return LayeredModel(copy.deepcopy(self.layers), self.input_shape)


def forward(model: LayeredModel, batch: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Run ``batch`` through ``model.layers[:upto]`` and cache activations for ``backward``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match (batch,) + {model.input_shape}")
    layers = model.layers if upto is None else model.layers[:upto]
    in_shapes = [model.input_shape] + model.shapes()
    caches = []
    for i, layer in enumerate(layers):
        if x.shape[1:] != in_shapes[i]:
            raise ShapeError(f"layer {i} ({layer!r}) got input {x.shape[1:]}, expected {in_shapes[i]}")
        x, c = layer.forward(x)
        caches.append(c)
    model._cache = caches if upto is None else None
    return x


def logits(model: LayeredModel, batch: np.ndarray) -> np.ndarray:
    """Pre-sigmoid output of a sigmoid-headed model."""
    if not model.layers or not isinstance(model.layers[-1], Sigmoid):
        raise ValueError("model does not end in a Sigmoid layer")
    return forward(model, batch, upto=len(model.layers) - 1)


def backward(model: LayeredModel, loss_grad: np.ndarray) -> Grads:
    """Backpropagate ``loss_grad`` through the cached forward pass.

    Returns ``{layer_index: {param_name: grad}}`` for trainable layers only.
    """
    if model._cache is None:
        raise RuntimeError("backward called before forward (no activation cache)")
    grads: Grads = {}
    d = np.asarray(loss_grad, dtype=np.float64)
    # layers below the lowest trainable one need no input gradient
    lowest = next((i for i, layer in enumerate(model.layers) if layer.trainable and layer.params), None)
    if lowest is None:
        return grads
    for i in range(len(model.layers) - 1, lowest - 1, -1):
        layer = model.layers[i]
        if isinstance(layer, Conv2D):
            d, g = layer.backward(d, model._cache[i], need_dx=i > lowest, need_params=layer.trainable)
        else:
            d, g = layer.backward(d, model._cache[i])
        if layer.trainable and g:
            grads[i] = g
    return grads


def bce_loss(pred, target, eps: float = BCE_EPS) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / pred.size
    return float(loss.mean()), grad


def sgd_step(model: LayeredModel, grads: Grads, lr: float) -> LayeredModel:
    """In-place ``p -= lr * g`` on trainable layers; frozen layers are never touched."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    for i, g in grads.items():
        layer = model.layers[i]
        if not layer.trainable:
            continue
        for name, gv in g.items():
            p = layer.params[name]
            if gv.shape != p.shape:
                raise ShapeError(f"layer {i} {name}: grad shape {gv.shape} != param shape {p.shape}")
            p -= lr * gv
    return model


class Sgd:
    """Plain gradient descent; ``step`` is exactly ``sgd_step``."""

    def step(self, model: LayeredModel, grads: Grads, lr: float) -> None:
        sgd_step(model, grads, lr)


class Momentum(Sgd):
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model, grads, lr):
        direction: Grads = {}
        for i, g in grads.items():
            direction[i] = {}
            for name, gv in g.items():
                v = self.momentum * self.velocity.get((i, name), 0.0) + gv
                self.velocity[(i, name)] = v
                direction[i][name] = v
        sgd_step(model, direction, lr)


class Adam(Sgd):
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, model, grads, lr):
        self.t += 1
        c1, c2 = 1 - self.beta1**self.t, 1 - self.beta2**self.t
        direction: Grads = {}
        for i, g in grads.items():
            direction[i] = {}
            for name, gv in g.items():
                m, v = self.moments.get((i, name), (0.0, 0.0))
                m = self.beta1 * m + (1 - self.beta1) * gv
                v = self.beta2 * v + (1 - self.beta2) * gv * gv
                self.moments[(i, name)] = (m, v)
                direction[i][name] = (m / c1) / (np.sqrt(v / c2) + self.eps)
        sgd_step(model, direction, lr)


OPTIMIZERS = {"sgd": Sgd, "momentum": Momentum, "adam": Adam}


def make_optimizer(name: str) -> Sgd:
    try:
        return OPTIMIZERS[name]()
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None


@dataclass(frozen=True)
class SgdSchedule:
    initial_lr: float = 0.003
    decay: float = 0.9

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return lr_at(self, epoch)


def lr_at(schedule: SgdSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.initial_lr * schedule.decay**epoch


def model_loss(model: LayeredModel, batch, targets) -> float:
    return bce_loss(forward(model, batch), targets)[0]


def loss_and_grads(model: LayeredModel, batch, targets) -> tuple[float, Grads]:
    loss, g = bce_loss(forward(model, batch), targets)
    return loss, backward(model, g)


def finite_difference_grads(model: LayeredModel, batch, targets, h: float = 1e-5, loss_fn=None) -> Grads:
    """Central-difference gradient estimate for every trainable parameter entry.

    ``loss_fn(model)`` overrides the default BCE-of-forward loss.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if loss_fn is None:
        def loss_fn(m):
            return model_loss(m, batch, targets)
    out: Grads = {}
    for i, layer in enumerate(model.layers):
        if not layer.trainable or not layer.params:
            continue
        out[i] = {}
        for name, p in layer.params.items():
            g = np.zeros_like(p)
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_fn(model)
                flat[k] = orig - h
                down = loss_fn(model)
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            out[i][name] = g
    model._cache = None
    return out


def build_layers(spec: Iterable[dict], input_shape: Shape, rng: np.random.Generator) -> list[Layer]:
    """Instantiate layers from compact dicts, inferring input sizes.

    Recognised entries: ``{"conv": out_ch, "k": 3, "stride": 1, "padding": 1, "init": "average"}``,
    ``{"pool": 2}``, ``{"relu": True}``, ``{"sigmoid": True}``, ``{"flatten": True}``,
    ``{"dense": out_dim}``.
    """
    layers: list[Layer] = []
    shape = tuple(input_shape)
    for entry in spec:
        if "conv" in entry:
            k = entry.get("k", 3)
            layer = Conv2D(shape[0], entry["conv"], k, k, entry.get("stride", 1),
                           entry.get("padding", (k - 1) // 2), rng=rng)
            if entry.get("init") == "average":
                layer.params["weight"] = averaging_kernel(layer.params["weight"].shape)
        elif "pool" in entry:
            layer = MaxPool2D(entry["pool"])
        elif "relu" in entry:
            layer = ReLU()
        elif "sigmoid" in entry:
            layer = Sigmoid()
        elif "flatten" in entry:
            layer = Flatten()
        elif "dense" in entry:
            if len(shape) != 1:
                raise ShapeError(f"dense layer needs flat input, got {shape}")
            layer = Dense(shape[0], entry["dense"], rng=rng)
        else:
            raise ValueError(f"unknown layer entry {entry!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers


# -- serialization ---------------------------------------------------------------


def model_to_dict(model: LayeredModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [
            {
                "kind": layer.kind,
                "hyperparams": layer.hyperparams(),
                "trainable": layer.trainable,
                "params": {name: p.tolist() for name, p in layer.params.items()},
            }
            for layer in model.layers
        ],
    }


def model_from_dict(doc: dict) -> LayeredModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"model format_version mismatch: found {version!r}, expected {FORMAT_VERSION}")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        cls = LAYER_KINDS.get(entry["kind"])
        if cls is None:
            raise ValueError(f"layer {i}: unknown kind {entry['kind']!r}")
        layer = cls(**entry.get("hyperparams", {}), trainable=bool(entry.get("trainable", True)))
        params = entry.get("params", {})
        if set(params) != set(layer.params):
            raise ValueError(f"layer {i}: expected params {sorted(layer.params)}, found {sorted(params)}")
        for name, value in params.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != layer.params[name].shape:
                raise ShapeError(f"layer {i} {name}: stored shape {arr.shape}, expected {layer.params[name].shape}")
            layer.params[name] = arr
        layers.append(layer)
    return LayeredModel(layers, tuple(doc["input_shape"]))


def save_model(model: LayeredModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model)))
    return path


def load_model(path) -> LayeredModel:
    return model_from_dict(json.loads(Path(path).read_text()))
