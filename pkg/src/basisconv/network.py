"""A small sequential CNN with manual backpropagation and SGD.

Layers: :class:`~basisconv.layer.ConvLayer`, :class:`~basisconv.layer.BasisConvLayer`,
:class:`ReLU`, :class:`MaxPool`, :class:`FullyConnected` and :class:`Softmax`.
The final softmax is paired with a mean cross-entropy loss.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import random_orthonormal
from .layer import BasisConvLayer, ConvLayer
from .tensor import ShapeError

log = logging.getLogger(__name__)

PHASES = ("all", "coeffs_only", "non_conv_only")


class ReLU:
    kind = "relu"

    def __init__(self):
        self._mask = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return {}

    def trainable(self, phase="all"):
        return ()

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout, need_input_grad=True):
        dx = dout * self._mask
        self._mask = None
        return dx


class MaxPool:
    """Max pooling over ``window x window`` patches at the given stride, no padding."""

    kind = "maxpool"

    def __init__(self, window=3, stride=2):
        self.window = int(window)
        self.stride = int(stride)
        self._cache = None

    def output_shape(self, in_shape):
        m, n, l = in_shape
        if self.window > min(m, n):
            raise ShapeError(f"maxpool window {self.window} larger than input {m}x{n}")
        return ((m - self.window) // self.stride + 1,
                (n - self.window) // self.stride + 1, l)

    def params(self):
        return {}

    def trainable(self, phase="all"):
        return ()

    def _slice(self, i, mo):
        return slice(i, i + self.stride * (mo - 1) + 1, self.stride)

    def forward(self, x, train=False):
        b, m, n, l = x.shape
        mo, no, _ = self.output_shape((m, n, l))
        out = None
        arg = np.zeros((b, mo, no, l), dtype=np.int64) if train else None
        for i in range(self.window):
            for j in range(self.window):
                v = x[:, self._slice(i, mo), self._slice(j, no), :]
                if out is None:
                    out = v.copy()
                    continue
                if train:
                    arg[v > out] = i * self.window + j  # strict: first max wins ties
                np.maximum(out, v, out=out)
        if train:
            self._cache = (arg, x.shape)
        return out

    def backward(self, dout, need_input_grad=True):
        arg, in_shape = self._cache
        mo, no = dout.shape[1:3]
        dx = np.zeros(in_shape, dtype=dout.dtype)
        for i in range(self.window):
            for j in range(self.window):
                sel = arg == i * self.window + j
                dx[:, self._slice(i, mo), self._slice(j, no), :] += dout * sel
        self._cache = None
        return dx


class FullyConnected:
    """Dense layer on the row-major flattened input: ``weights`` is ``(out, in)``."""

    kind = "fc"

    def __init__(self, weights, biases):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(f"fc weights {self.weights.shape} / biases {self.biases.shape}")
        self.grads = {}
        self._cache = None

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.weights.shape[1]:
            raise ShapeError(f"fc expects {self.weights.shape[1]} inputs, got {in_shape}")
        return (1, 1, self.weights.shape[0])

    def params(self):
        return {"weights": self.weights, "biases": self.biases}

    def trainable(self, phase="all"):
        return () if phase == "coeffs_only" else ("weights", "biases")

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if train:
            self._cache = (flat, x.shape)
        out = flat @ self.weights.T + self.biases
        return out.reshape(x.shape[0], 1, 1, -1)

    def backward(self, dout, need_input_grad=True):
        flat, in_shape = self._cache
        g = dout.reshape(dout.shape[0], -1)
        self.grads = {"weights": g.T @ flat, "biases": g.sum(axis=0)}
        self._cache = None
        return (g @ self.weights).reshape(in_shape) if need_input_grad else None


class Softmax:
    kind = "softmax"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return {}

    def trainable(self, phase="all"):
        return ()

    def forward(self, x, train=False):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class Model:
    """Ordered layer stack with a validated shape chain."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if isinstance(layer, BasisConvLayer) and not layer.frozen:
                raise ValueError("basis layers must keep their basis frozen")

    @property
    def output_shape(self):
        return self.shapes[-1]

    def __len__(self):
        return len(self.layers)

    def copy(self):
        return copy.deepcopy(self)

    def named_params(self, phase=None):
        """Yield ``(layer_index, name, array)``; only trainable ones when ``phase`` is given."""
        for i, layer in enumerate(self.layers):
            ps = layer.params()
            names = ps.keys() if phase is None else layer.trainable(phase)
            for name in names:
                yield i, name, ps[name]

    def has_basis_layers(self):
        return any(isinstance(l, BasisConvLayer) for l in self.layers)


def _stack(batch):
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([np.asarray(b) for b in batch])
    if x.ndim == 3:
        x = x[None]
    return np.asarray(x, dtype=np.float64)


def forward(model: Model, batch, train=False) -> np.ndarray:
    """Class-probability vectors ``(B, classes)`` for a batch of ``(M, N, L)`` inputs."""
    x = _stack(batch)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"model expects input {model.input_shape}, got {x.shape[1:]}")
    for layer in model.layers:
        x = layer.forward(x, train=train)
    return x.reshape(x.shape[0], -1)


def backward(model: Model, batch, labels, phase="all"):
    """Mean cross-entropy loss and its gradients.

    Returns:
        (loss, probs, grads) where grads maps ``(layer_index, name)`` to an
        array shaped like the parameter.  Only parameters trainable under
        ``phase`` appear; frozen bases never do.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if not model.layers or not isinstance(model.layers[-1], Softmax):
        raise ValueError("training needs a model ending in softmax")
    x = _stack(batch)
    labels = np.asarray(labels, dtype=np.int64)
    probs = forward(model, x, train=True)
    n_classes = probs.shape[1]
    if labels.shape != (x.shape[0],) or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be {x.shape[0]} class indices in [0, {n_classes})")
    b = x.shape[0]
    rows = np.arange(b)
    loss = float(-np.log(np.clip(probs[rows, labels], 1e-300, None)).mean())
    g = probs.copy()
    g[rows, labels] -= 1.0
    g = (g / b).reshape(b, 1, 1, n_classes)

    # lowest layer that owns a trainable parameter; nothing below needs gradients
    lowest = min((i for i, _, _ in model.named_params(phase)), default=len(model.layers))
    grads = {}
    for i in range(len(model.layers) - 2, lowest - 1, -1):
        layer = model.layers[i]
        g = layer.backward(g, need_input_grad=i > lowest)
        for name in layer.trainable(phase):
            grads[(i, name)] = layer.grads[name]
    return loss, probs, grads


@dataclass
class TrainConfig:
    """SGD settings. ``lr_schedule`` lists ``(epoch_start, rate)`` pairs."""

    epochs: int = 10
    batch_size: int = 32
    lr_schedule: list = field(default_factory=lambda: [(0, 0.01)])
    momentum: float = 0.9
    seed: int = 0
    phase: str = "all"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr_schedule or any(r < 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be non-negative")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        self.lr_schedule = sorted((int(e), float(r)) for e, r in self.lr_schedule)

    def rate(self, epoch):
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if epoch >= start:
                rate = r
        return rate


@dataclass
class EpochStats:
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float
    phase: str


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    def __getitem__(self, i):
        return self.epochs[i]

    def extend(self, other):
        self.epochs.extend(other.epochs)

    @property
    def lrs(self):
        return [e.lr for e in self.epochs]


def _dataset_arrays(data):
    if hasattr(data, "images"):
        return np.asarray(data.images, dtype=np.float64), np.asarray(data.labels)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def predict(model: Model, images, batch_size=256) -> np.ndarray:
    """Argmax class per sample (ties go to the lowest class index)."""
    images = np.asarray(images, dtype=np.float64)
    out = [forward(model, images[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, dataset, batch_size=256) -> float:
    x, y = _dataset_arrays(dataset)
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, x, batch_size) == y).mean())


def train(model: Model, dataset, config: TrainConfig, eval_data=None) -> TrainHistory:
    """Minibatch SGD with momentum over a seeded shuffle.

    Update rule: ``v = momentum * v + grad``; ``p -= lr * v``.
    """
    x, y = _dataset_arrays(dataset)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    params = {(i, n): p for i, n, p in model.named_params(config.phase)}
    velocity = {k: np.zeros_like(p) for k, p in params.items()}
    history = TrainHistory()
    for epoch in range(config.epochs):
        lr = config.rate(epoch)
        order = rng.permutation(len(x))
        loss_sum = correct = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, probs, grads = backward(model, x[idx], y[idx], config.phase)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
            for key, grad in grads.items():
                v = velocity[key]
                v *= config.momentum
                v += grad
                params[key] -= lr * v
        stats = EpochStats(
            train_loss=loss_sum / len(x),
            train_acc=correct / len(x),
            eval_acc=evaluate(model, eval_data) if eval_data is not None else float("nan"),
            lr=lr,
            phase=config.phase,
        )
        log.info("epoch %d  phase=%s lr=%g loss=%.4f train_acc=%.4f eval_acc=%.4f",
                 epoch + 1, config.phase, lr, stats.train_loss, stats.train_acc, stats.eval_acc)
        history.epochs.append(stats)
    return history


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def finetune_schedule(scale=1.0):
    """Epoch counts and step rates of the two-step fine-tune.

    Step one trains coefficients for ``15*scale`` epochs from rate 0.1,
    dividing by 10 every ``5*scale`` epochs; step two trains the remaining
    non-convolutional parameters for ``10*scale`` epochs at 5e-4.

    Returns:
        (coeff_epochs, coeff_schedule, tail_epochs, tail_rate)
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    n1 = _round_half_up(15 * scale)
    step = max(1, _round_half_up(5 * scale))
    sched = [(e, 0.1 / 10 ** (e // step)) for e in range(0, max(n1, 1), step)]
    return n1, sched, _round_half_up(10 * scale), 5e-4


# the schedule opens at rate 0.1; with momentum 0.9 that step kills the ReLUs
FINETUNE_MOMENTUM = 0.5


def finetune(model: Model, dataset, scale=1.0, eval_data=None, batch_size=32,
             momentum=FINETUNE_MOMENTUM, seed=0) -> TrainHistory:
    """Two-step recovery training of a compressed model (bases stay frozen)."""
    if not model.has_basis_layers():
        raise ValueError("finetune needs at least one basis conv layer")
    n1, sched, n2, tail_rate = finetune_schedule(scale)
    history = TrainHistory()
    if n1 == 0 and n2 == 0:
        log.warning("finetune scale %g gives zero epochs; model left unchanged", scale)
        return history
    if n1:
        history.extend(train(model, dataset, TrainConfig(
            epochs=n1, batch_size=batch_size, lr_schedule=sched, momentum=momentum,
            seed=seed, phase="coeffs_only"), eval_data))
    if n2:
        history.extend(train(model, dataset, TrainConfig(
            epochs=n2, batch_size=batch_size, lr_schedule=[(0, tail_rate)],
            momentum=momentum, seed=seed + 1, phase="non_conv_only"), eval_data))
    return history


# (filters, input channels) of the three convolution stages
TOY_CONVS = ((32, 3), (32, 32), (64, 32))
TOY_INPUT = (32, 32, 3)


def build_toy_net(kind="direct", seed=0, input_shape=TOY_INPUT, convs=TOY_CONVS,
                  size=5, hidden=64, classes=10) -> Model:
    """Three conv stages (5x5, same padding) with relu + 3x3/2 maxpool, then two fc layers.

    ``kind="basis"`` swaps each conv for a frozen random orthonormal basis
    with Q equal to the filter count and a trainable 1x1 stage.  Weights
    use He-normal scaling; basis coefficients ``N(0, 1/Q)``; biases zero.
    """
    if kind not in ("direct", "basis"):
        raise ValueError(f"unknown toy net kind {kind!r}")
    rng = np.random.default_rng(seed)
    pad = size // 2
    layers = []
    shape = tuple(input_shape)
    for stage, (p, l) in enumerate(convs):
        if kind == "direct":
            fan_in = l * size * size
            w = rng.standard_normal((p, size, size, l)) * np.sqrt(2.0 / fan_in)
            conv = ConvLayer(w, np.zeros(p), pad=pad)
        else:
            basis = random_orthonormal(size, l, p, seed=seed * 1000 + stage)
            coeffs = rng.standard_normal((p, p)) * np.sqrt(1.0 / p)
            conv = BasisConvLayer(basis, coeffs, np.zeros(p), np.zeros(p), pad=pad)
        for layer in (conv, ReLU(), MaxPool(3, 2)):
            layers.append(layer)
            shape = layer.output_shape(shape)
    flat = math.prod(shape)
    for n_out, n_in in ((hidden, flat), (classes, hidden)):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        layers.append(FullyConnected(w, np.zeros(n_out)))
        if n_out == hidden:
            layers.append(ReLU())
    layers.append(Softmax())
    return Model(layers, input_shape)
