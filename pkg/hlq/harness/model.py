"""Model description, construction, and the forward / backward step."""
import logging
from dataclasses import dataclass, field

import numpy as np

from hlq.errors.handlers import DimensionError, ParameterError, StateError
from hlq.harness.layers import LAYER_KINDS, StepContext, im2col, softmax_cross_entropy
from hlq.models.tensor import LayerDims

logger = logging.getLogger(__name__)

LOSS_KINDS = ("softmax_ce",)
REFERENCE_CNN_LAYERS = ("conv0", "conv3", "linear7", "linear9")
INIT_SCHEMES = ("he",)


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    dims: linear (in, out); conv (in_ch, out_ch, kernel[, stride[, padding]]);
    avgpool (kernel,); empty for relu, flatten, tokens and tokenmean.
    `strategy` overrides the global backward strategy for this layer;
    `calibrate` asks for L1 basis selection at the end of warmup.
    """

    kind: str
    dims: tuple = ()
    strategy: object = None
    calibrate: bool = False
    name: str = None


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    loss: str = "softmax_ce"
    init: str = "he"
    seed: int = 0

    def validate(self):
        """Walk the shape chain; returns the per-sample output shape."""
        if self.loss not in LOSS_KINDS:
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.init not in INIT_SCHEMES:
            raise ParameterError(f"unknown init scheme {self.init!r}")
        shape = tuple(self.input_shape)
        for layer in build_layers(self):
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise DimensionError(f"model ends in shape {shape}, expected ({self.num_classes},)")
        return shape


def _layer_name(spec, index):
    return spec.name or f"{spec.kind}{index}"


def build_layers(model_spec, dtype=np.float32):
    layers = []
    for index, spec in enumerate(model_spec.layers):
        cls = LAYER_KINDS.get(spec.kind)
        if cls is None:
            raise ParameterError(f"unknown layer kind {spec.kind!r}")
        name = _layer_name(spec, index)
        seed = np.random.SeedSequence([model_spec.seed, index])
        if spec.kind == "linear":
            in_f, out_f = spec.dims
            layers.append(cls(name, in_f, out_f, index=index, seed=seed, dtype=dtype))
        elif spec.kind == "conv":
            in_ch, out_ch, kernel, *rest = spec.dims
            stride = rest[0] if len(rest) > 0 else 1
            padding = rest[1] if len(rest) > 1 else 0
            layers.append(cls(name, in_ch, out_ch, kernel, stride, padding, index=index, seed=seed, dtype=dtype))
        elif spec.kind == "avgpool":
            layers.append(cls(name, *spec.dims, index=index))
        else:
            layers.append(cls(name, index=index))
    return layers


class Model:
    def __init__(self, spec, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = build_layers(spec, dtype)
        self._overrides = {
            layer.name: layer_spec.strategy
            for layer, layer_spec in zip(self.layers, spec.layers)
            if layer_spec.strategy is not None
        }
        self.calibrated_layers = tuple(
            layer.name for layer, layer_spec in zip(self.layers, spec.layers)
            if layer_spec.calibrate and layer.trainable
        )

    @property
    def trainable_layers(self):
        return [layer for layer in self.layers if layer.trainable]

    def named_parameters(self):
        return [
            (f"{layer.name}.{key}", value)
            for layer in self.trainable_layers
            for key, value in layer.params.items()
        ]

    @property
    def param_count(self):
        return sum(value.size for _, value in self.named_parameters())

    def strategy_map(self, strategy, bases=None):
        """Per-layer strategy: override or `strategy`, with frozen bases applied."""
        bases = bases or {}
        resolved = {}
        for layer in self.trainable_layers:
            chosen = self._overrides.get(layer.name, strategy)
            if layer.name in bases and chosen.grad_w.low_rank:
                chosen = chosen.with_bases(bases[layer.name])
            resolved[layer.name] = chosen
        return resolved

    def snapshot(self):
        return {name: value.copy() for name, value in self.named_parameters()}

    def load(self, snapshot):
        for layer in self.trainable_layers:
            for key in layer.params:
                layer.params[key] = snapshot[f"{layer.name}.{key}"].astype(self.dtype, copy=True)


@dataclass
class ForwardPass:
    logits: np.ndarray
    loss: float
    loss_grad: np.ndarray
    caches: list = field(default_factory=list)
    ctx: StepContext = None
    inputs: dict = field(default_factory=dict)


def forward(model, batch, ctx=None, keep_inputs=()):
    """Full-precision forward; layers on an ACBP strategy keep only the compressed activation.

    `keep_inputs` names layers whose raw (B, L, I) input is also returned, for
    basis calibration.
    """
    images, labels = batch
    ctx = ctx or StepContext()
    expected = tuple(model.spec.input_shape)
    if images.ndim != len(expected) + 1 or tuple(images.shape[1:]) != expected:
        raise DimensionError(f"batch of shape {images.shape} does not match model input {expected}")
    if labels.shape != (images.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {images.shape[0]} samples")
    x = images.astype(model.dtype, copy=False)
    caches = []
    inputs = {}
    for layer in model.layers:
        if layer.name in keep_inputs:
            inputs[layer.name] = _as_rows(layer, x)
        x, cache = layer.forward(x, ctx)
        caches.append(cache)
    loss, grad = softmax_cross_entropy(x, labels)
    return ForwardPass(x, loss, grad, caches, ctx, inputs)


def _as_rows(layer, x):
    if layer.kind == "conv":
        return im2col(x, layer.kernel, layer.stride, layer.padding)
    return x[:, None, :] if x.ndim == 2 else x


def backward_step(model, forward_pass):
    """Chain per-layer backward from the loss gradient; returns {param name: grad}."""
    if forward_pass is None or len(forward_pass.caches) != len(model.layers):
        raise StateError("backward_step needs the forward pass of this step")
    if not forward_pass.ctx.training:
        raise StateError("forward ran in evaluation mode; no activations were kept")
    grad = forward_pass.loss_grad
    grads = {}
    for layer, cache in zip(reversed(model.layers), reversed(forward_pass.caches)):
        grad, layer_grads = layer.backward(grad, cache, forward_pass.ctx)
        for key, value in layer_grads.items():
            grads[f"{layer.name}.{key}"] = value
    return grads


def predict(model, images, batch_size=256):
    ctx = StepContext(training=False)
    labels = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size].astype(model.dtype, copy=False)
        for layer in model.layers:
            x, _ = layer.forward(x, ctx)
        labels.append(np.argmax(x, axis=1))
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def reference_cnn(num_classes=10, image_size=16, channels=(16, 32), hidden=64, in_channels=1, seed=0,
                  overrides=None, calibrate=False):
    """Two conv layers and a two-layer head applied to each of the (image_size / 4)^2 positions.

    The head's logits are averaged over positions, so every linear layer sees
    L = (image_size / 4)^2 tokens. `overrides` maps layer name to a strategy.
    """
    overrides = overrides or {}
    c1, c2 = channels
    plan = [
        ("conv", (in_channels, c1, 3, 1, 1), "conv0"),
        ("relu", (), None),
        ("avgpool", (2,), None),
        ("conv", (c1, c2, 3, 1, 1), "conv3"),
        ("relu", (), None),
        ("avgpool", (2,), None),
        ("tokens", (), None),
        ("linear", (c2, hidden), "linear7"),
        ("relu", (), None),
        ("linear", (hidden, num_classes), "linear9"),
        ("tokenmean", (), None),
    ]
    layers = tuple(
        LayerSpec(kind, dims, overrides.get(name), calibrate and name is not None, name)
        for kind, dims, name in plan
    )
    return ModelSpec(layers, (in_channels, image_size, image_size), num_classes, seed=seed)


def small_cnn(num_classes=10, image_size=8, channels=4, seed=0):
    """Under 10^4 parameters, for finite-difference checks; one linear layer shared by all positions."""
    layers = (
        LayerSpec("conv", (1, channels, 3, 1, 1)),
        LayerSpec("relu"),
        LayerSpec("avgpool", (2,)),
        LayerSpec("tokens"),
        LayerSpec("linear", (channels, num_classes)),
        LayerSpec("tokenmean"),
    )
    return ModelSpec(layers, (1, image_size, image_size), num_classes, seed=seed)


def reference_mlp(image_size=8, hidden=32, num_classes=10, seed=0):
    """Flat MLP; its linear layers see L = 1 and transform along the batch."""
    layers = (
        LayerSpec("flatten"),
        LayerSpec("linear", (image_size * image_size, hidden)),
        LayerSpec("relu"),
        LayerSpec("linear", (hidden, num_classes)),
    )
    return ModelSpec(layers, (1, image_size, image_size), num_classes, seed=seed)


def layer_dims(model_spec, batch):
    """(name, LayerDims) of every linear/conv layer at batch size `batch`, conv lowered by im2col."""
    dims = []
    shape = tuple(model_spec.input_shape)
    for layer in build_layers(model_spec):
        out = layer.output_shape(shape)
        if layer.kind == "conv":
            dims.append((layer.name, LayerDims(batch, out[1] * out[2], layer.in_features, layer.out_features)))
        elif layer.kind == "linear":
            L = shape[0] if len(shape) == 2 else 1
            dims.append((layer.name, LayerDims(batch, L, layer.in_features, layer.out_features)))
        shape = out
    return dims
