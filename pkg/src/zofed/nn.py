"""Forward-only neural network engine.

Models are stacks of layer descriptors. All trainable parameters live in one
flat vector so that a perturbation ``W + delta`` is a single vector addition.

Every forward routine carries a leading *parameter-set* axis: a ``(P, n)``
matrix of parameter vectors is evaluated on the same batch in one pass, which
is how the K perturbed models of a round are scored without a Python loop.

Flat layout, in layer order:

* ``Dense``: weight ``(in, out)`` row-major, then bias ``(out,)``.
* ``Conv2d``: weight ``(out_ch, in_ch, k, k)`` row-major, then bias ``(out_ch,)``.
* ``GroupNorm``: scale ``(channels,)``, then shift ``(channels,)``.
* ``Activation`` and ``Flatten`` own no parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, NumericError

ACTIVATIONS = ("relu", "selu", "hardswish", "identity")

_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}, expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class GroupNorm:
    groups: int
    channels: int
    eps: float = 1e-5


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2d, Activation, GroupNorm, Flatten]


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    name: str
    offset: int
    length: int
    shape: tuple


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ConfigError("model has no layers")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        shapes = _infer_shapes(self.layers, self.input_shape)
        if shapes[-1] != (self.num_classes,):
            raise ConfigError(
                f"model output shape {shapes[-1]} does not match num_classes={self.num_classes}"
            )
        layout = _build_layout(self.layers)
        if not layout:
            raise ConfigError("model has no trainable parameters")
        object.__setattr__(self, "_shapes", tuple(shapes))
        object.__setattr__(self, "_layout", tuple(layout))

    @property
    def shapes(self) -> tuple:
        """Tensor shape (without batch axis) entering each layer, plus the output."""
        return self._shapes

    @property
    def layout(self) -> tuple:
        return self._layout

    @property
    def num_params(self) -> int:
        last = self._layout[-1]
        return last.offset + last.length


@dataclass
class ParamVector:
    """Flat trainable parameters of a model."""

    values: np.ndarray
    layout: tuple = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError("ParamVector values must be one-dimensional")

    def __len__(self):
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels)
        if inputs.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")
        if labels.shape != (inputs.shape[0],):
            raise ConfigError(f"labels shape {labels.shape} does not match {inputs.shape[0]} inputs")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ConfigError("labels must be integer class indices")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]


def _infer_shapes(layers, input_shape):
    shapes = [input_shape]
    shape = input_shape
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if shape != (layer.in_features,):
                raise ConfigError(f"layer {i} Dense expects input ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ConfigError(
                    f"layer {i} Conv2d expects ({layer.in_channels}, H, W) input, got {shape}"
                )
            if layer.kernel < 1 or layer.stride < 1:
                raise ConfigError(f"layer {i} Conv2d kernel and stride must be >= 1")
            h = (shape[1] - layer.kernel) // layer.stride + 1
            w = (shape[2] - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"layer {i} Conv2d kernel {layer.kernel} larger than input {shape}")
            shape = (layer.out_channels, h, w)
        elif isinstance(layer, GroupNorm):
            if layer.groups < 1 or layer.channels % layer.groups:
                raise ConfigError(
                    f"layer {i} GroupNorm: {layer.channels} channels not divisible by {layer.groups} groups"
                )
            if shape[0] != layer.channels:
                raise ConfigError(f"layer {i} GroupNorm expects {layer.channels} channels, got {shape}")
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Activation):
            pass
        else:
            raise ConfigError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        shapes.append(shape)
    return shapes


def _build_layout(layers):
    slots = []
    offset = 0

    def add(i, name, shape):
        nonlocal offset
        length = int(np.prod(shape))
        slots.append(ParamSlot(i, name, offset, length, tuple(shape)))
        offset += length

    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            add(i, "weight", (layer.in_features, layer.out_features))
            if layer.bias:
                add(i, "bias", (layer.out_features,))
        elif isinstance(layer, Conv2d):
            add(i, "weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            if layer.bias:
                add(i, "bias", (layer.out_channels,))
        elif isinstance(layer, GroupNorm):
            add(i, "scale", (layer.channels,))
            add(i, "shift", (layer.channels,))
    return slots


def mlp(sizes: Sequence[int], activation: str = "hardswish", groupnorm: int = 0) -> ModelSpec:
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with an activation between layers.

    ``groupnorm > 0`` inserts a GroupNorm with that many groups before each
    hidden activation.
    """
    layers: list = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            if groupnorm:
                layers.append(GroupNorm(groupnorm, b))
            layers.append(Activation(activation))
    return ModelSpec(tuple(layers), (sizes[0],), sizes[-1])


def lenet_lite(input_shape=(1, 28, 28), num_classes=10, activation="hardswish") -> ModelSpec:
    """Two-conv desk-scale LeNet analogue."""
    c, h, w = input_shape
    h1, w1 = h - 4, w - 4
    h2, w2 = h1 - 4, w1 - 4
    layers = (
        Conv2d(c, 8, 5),
        Activation(activation),
        Conv2d(8, 16, 5),
        Activation(activation),
        Flatten(),
        Dense(16 * h2 * w2, num_classes),
    )
    return ModelSpec(layers, input_shape, num_classes)


def init_params(spec: ModelSpec, seed: int = 0) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; GroupNorm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    values = np.empty(spec.num_params)
    for slot in spec.layout:
        layer = spec.layers[slot.layer]
        if isinstance(layer, GroupNorm):
            fill = 1.0 if slot.name == "scale" else 0.0
            values[slot.offset : slot.offset + slot.length] = fill
            continue
        if isinstance(layer, Dense):
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
        bound = math.sqrt(1.0 / fan_in)
        values[slot.offset : slot.offset + slot.length] = rng.uniform(-bound, bound, slot.length)
    return ParamVector(values, spec.layout)


def flatten_params(spec: ModelSpec, weights: Sequence[dict]) -> ParamVector:
    """Pack per-layer ``{name: array}`` dicts (one per layer, empty for parameter-free ones)."""
    if len(weights) != len(spec.layers):
        raise ConfigError(f"expected {len(spec.layers)} layer entries, got {len(weights)}")
    values = np.empty(spec.num_params)
    for slot in spec.layout:
        arr = np.asarray(weights[slot.layer][slot.name], dtype=np.float64)
        if arr.shape != slot.shape:
            raise ConfigError(f"layer {slot.layer} {slot.name}: shape {arr.shape}, expected {slot.shape}")
        values[slot.offset : slot.offset + slot.length] = arr.ravel()
    return ParamVector(values, spec.layout)


def unflatten_params(spec: ModelSpec, params) -> list:
    values = _values(params)
    if values.shape != (spec.num_params,):
        raise ConfigError(f"parameter vector has length {values.shape}, model needs {spec.num_params}")
    out: list = [{} for _ in spec.layers]
    for slot in spec.layout:
        out[slot.layer][slot.name] = values[slot.offset : slot.offset + slot.length].reshape(slot.shape).copy()
    return out


def _values(params) -> np.ndarray:
    if isinstance(params, ParamVector):
        return params.values
    return np.asarray(params)


def hardswish(x):
    """``x * min(max(x + 3, 0), 6) / 6``."""
    # dividing the clipped gate first keeps h(x) == x exact for x >= 3
    if np.ndim(x) == 0:
        return x * (min(max(x + 3.0, 0.0), 6.0) / 6.0)
    y = x + 3.0
    np.maximum(y, 0.0, out=y)
    np.minimum(y, 6.0, out=y)
    y /= 6.0
    y *= x
    return y


def relu(x):
    return np.maximum(x, 0.0)


def selu(x):
    return _SELU_SCALE * np.where(x > 0, x, _SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def activate(kind: str, x):
    if kind == "hardswish":
        return hardswish(x)
    if kind == "relu":
        return relu(x)
    if kind == "selu":
        return selu(x)
    return x


def group_norm(features, groups: int, eps: float = 1e-5):
    """Normalize ``(B, C, *spatial)`` features per sample and per channel group.

    Affine scale/shift is not applied here.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 2:
        raise ConfigError("group_norm expects (batch, channels, ...) features")
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible by {groups} groups")
    return _group_norm(x, groups, eps, axis=1)


def _group_norm(x, groups, eps, axis):
    lead = x.shape[:axis]
    c = x.shape[axis]
    rest = x.shape[axis + 1 :]
    g = x.reshape(lead + (groups, c // groups) + rest)
    red = tuple(range(axis + 1, g.ndim))
    mean = g.mean(axis=red, keepdims=True)
    var = ((g - mean) ** 2).mean(axis=red, keepdims=True)
    return ((g - mean) / np.sqrt(var + eps)).reshape(x.shape)


def _conv2d(x, weight, bias, stride):
    # x: (P, B, C, H, W); weight: (P, O, C, k, k)
    p = weight.shape[0]
    if x.shape[0] != p:
        x = np.broadcast_to(x, (p,) + x.shape[1:])
    k = weight.shape[-1]
    ho = (x.shape[3] - k) // stride + 1
    wo = (x.shape[4] - k) // stride + 1
    out = np.zeros((p, x.shape[1], weight.shape[1], ho, wo), dtype=np.result_type(x, weight))
    for u in range(k):
        for v in range(k):
            patch = x[:, :, :, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride]
            out += np.einsum("pbchw,poc->pbohw", patch, weight[:, :, :, u, v])
    if bias is not None:
        out += bias[:, None, :, None, None]
    return out


def _layer_params(spec: ModelSpec, mat: np.ndarray):
    per_layer: list = [{} for _ in spec.layers]
    p = mat.shape[0]
    for slot in spec.layout:
        per_layer[slot.layer][slot.name] = mat[:, slot.offset : slot.offset + slot.length].reshape((p,) + slot.shape)
    return per_layer


def _dtype(precision: str):
    if precision == "f64":
        return np.float64
    if precision == "f32":
        return np.float32
    raise ConfigError(f"precision must be 'f32' or 'f64', got {precision!r}")


def _param_matrix(spec: ModelSpec, params) -> np.ndarray:
    mat = _values(params)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2 or mat.shape[1] != spec.num_params:
        raise ConfigError(f"parameters of shape {mat.shape} do not match model size n={spec.num_params}")
    return mat


def forward_logits(spec: ModelSpec, params, inputs, precision: str = "f64") -> np.ndarray:
    """Logits of shape ``(P, B, num_classes)`` for a ``(P, n)`` parameter matrix."""
    dtype = _dtype(precision)
    mat = _param_matrix(spec, params).astype(dtype, copy=False)
    x = np.asarray(inputs, dtype=dtype)
    if x.shape[1:] != spec.input_shape:
        raise ConfigError(f"input shape {x.shape[1:]} does not match model input {spec.input_shape}")
    per_layer = _layer_params(spec, mat)
    h = x[None, ...]
    for i, layer in enumerate(spec.layers):
        lp = per_layer[i]
        if isinstance(layer, Dense):
            h = np.matmul(h, lp["weight"])
            if layer.bias:
                h += lp["bias"][:, None, :]
        elif isinstance(layer, Conv2d):
            h = _conv2d(h, lp["weight"], lp.get("bias"), layer.stride)
        elif isinstance(layer, Activation):
            h = activate(layer.kind, h)
        elif isinstance(layer, GroupNorm):
            if h.shape[0] != mat.shape[0]:
                h = np.broadcast_to(h, (mat.shape[0],) + h.shape[1:])
            h = _group_norm(h, layer.groups, layer.eps, axis=2)
            extra = (1,) * (h.ndim - 3)
            h = h * lp["scale"].reshape((mat.shape[0], 1, layer.channels) + extra)
            h = h + lp["shift"].reshape((mat.shape[0], 1, layer.channels) + extra)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[:2] + (-1,))
        # a sum is finite iff every entry is, barring overflow of huge finite values
        if not np.isfinite(h.sum()) and not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite values after {type(layer).__name__}", layer=i)
    if h.shape[0] != mat.shape[0]:
        h = np.broadcast_to(h, (mat.shape[0],) + h.shape[1:])
    return h


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean cross-entropy over the batch axis for ``(..., B, L)`` logits."""
    zmax = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(logits, labels.reshape((1,) * (logits.ndim - 2) + (-1, 1)), axis=-1)[..., 0]
    return (lse - picked).mean(axis=-1)


def _check_labels(spec: ModelSpec, batch: Batch):
    labels = batch.labels
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ConfigError(f"labels must lie in [0, {spec.num_classes})")


def forward_losses(spec: ModelSpec, params, batch: Batch, precision: str = "f64") -> np.ndarray:
    """Mean cross-entropy for each row of a ``(P, n)`` parameter matrix."""
    _check_labels(spec, batch)
    logits = forward_logits(spec, params, batch.inputs, precision)
    return cross_entropy(logits, batch.labels).astype(np.float64)


def forward_loss(spec: ModelSpec, params, batch: Batch, precision: str = "f64") -> float:
    values = _values(params)
    if values.ndim != 1:
        raise ConfigError("forward_loss takes a single parameter vector")
    return float(forward_losses(spec, values, batch, precision)[0])


def predict(spec: ModelSpec, params, inputs, precision: str = "f64") -> np.ndarray:
    return forward_logits(spec, _values(params), inputs, precision)[0].argmax(axis=-1)


def evaluate(spec: ModelSpec, params, inputs, labels, precision: str = "f64", chunk: int = 4096):
    """Return ``(mean loss, accuracy)`` on a full dataset, chunked over samples."""
    labels = np.asarray(labels)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(labels), chunk):
        x = inputs[start : start + chunk]
        y = labels[start : start + chunk]
        logits = forward_logits(spec, _values(params), x, precision)[0]
        total_loss += float(cross_entropy(logits, y)) * len(y)
        correct += int((logits.argmax(axis=-1) == y).sum())
    return total_loss / len(labels), correct / len(labels)
