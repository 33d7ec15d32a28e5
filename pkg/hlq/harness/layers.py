"""Layers of the micro training stack.

Linear and Conv2d lower to the (B, L, I) x (O, I) layout of hlq.ops.backprop
and hand their backward GEMMs to the strategy in effect; conv goes through
im2col with L = H_out * W_out. Forward runs in the dtype of its input, so a
float64 forward is available for finite differences.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from hlq.errors.handlers import DimensionError, ParameterError, StateError
from hlq.models.strategy import BackwardStrategy
from hlq.models.tensor import Tensor
from hlq.ops.backprop import acbp_plan, backward, hlq_gw_forward_stage, transform_weight

logger = logging.getLogger(__name__)

FORWARD_STREAM = 0
BACKWARD_STREAM = 1

_VANILLA = BackwardStrategy.vanilla()


@dataclass
class StepContext:
    """Per-step state threaded through forward and backward."""

    rng: object = None
    strategies: dict = field(default_factory=dict)
    training: bool = True

    def strategy_for(self, layer_name):
        return self.strategies.get(layer_name, _VANILLA)

    def rng_for(self, index, stream):
        return self.rng.split(index, stream) if self.rng is not None else None


@dataclass(frozen=True)
class GemmCache:
    stored: object
    strategy: BackwardStrategy
    transformed_weight: Tensor = None


class Layer:
    kind = "layer"
    trainable = False

    def __init__(self, name, index=0):
        self.name = name
        self.index = index
        self.params = {}

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, grad, cache, ctx):
        raise NotImplementedError

    def output_shape(self, input_shape):
        return input_shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class GemmLayer(Layer):
    """Shared weight (O, I) / bias (O,) handling for Linear and Conv2d."""

    trainable = True

    def __init__(self, name, in_features, out_features, index=0, bias=True, seed=0, dtype=np.float32):
        super().__init__(name, index)
        if in_features <= 0 or out_features <= 0:
            raise ParameterError(f"{name}: features must be positive, got {in_features} -> {out_features}")
        self.in_features = in_features
        self.out_features = out_features
        rng = np.random.default_rng(seed)
        std = np.sqrt(2.0 / in_features)
        self.params["weight"] = (rng.standard_normal((out_features, in_features)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=dtype)

    @property
    def weight(self):
        return self.params["weight"]

    def _gemm_forward(self, x3, ctx):
        w = self.weight.astype(x3.dtype, copy=False)
        y = x3 @ w.T
        if "bias" in self.params:
            y = y + self.params["bias"].astype(x3.dtype, copy=False)
        return y, self._keep(x3, ctx)

    def _keep(self, x3, ctx):
        if not ctx.training:
            return None
        strategy = ctx.strategy_for(self.name)
        if strategy.stores_acbp:
            plan = acbp_plan(strategy, x3.shape)
            stored = hlq_gw_forward_stage(
                Tensor(x3), plan, strategy.grad_w.bits,
                ctx.rng_for(self.index, FORWARD_STREAM), strategy.rounding, strategy.per_channel_gw,
            )
        else:
            stored = Tensor(x3)
        transformed = None
        if strategy.cache_weight_ht and strategy.grad_x.hadamard and not strategy.grad_x.low_rank:
            transformed = transform_weight(Tensor(self.weight), strategy.block_size)
        return GemmCache(stored, strategy, transformed)

    def _gemm_backward(self, g3, cache, ctx):
        if cache is None:
            raise StateError(f"{self.name}: backward called without a training forward")
        pair = backward(
            cache.stored, Tensor(self.weight), Tensor(g3), cache.strategy,
            ctx.rng_for(self.index, BACKWARD_STREAM), cache.transformed_weight,
        )
        grads = {"weight": pair.g_w.numpy()}
        if "bias" in self.params:
            grads["bias"] = (g3.sum(axis=(0, 1)) / g3.shape[0]).astype(np.float32)
        return pair.g_x.numpy(), grads


class Linear(GemmLayer):
    kind = "linear"

    def forward(self, x, ctx):
        if x.ndim not in (2, 3) or x.shape[-1] != self.in_features:
            raise DimensionError(f"{self.name}: expected (..., {self.in_features}), got {x.shape}")
        x3 = x[:, None, :] if x.ndim == 2 else x
        y, cache = self._gemm_forward(x3, ctx)
        return (y[:, 0, :] if x.ndim == 2 else y), cache

    def backward(self, grad, cache, ctx):
        g3 = grad[:, None, :] if grad.ndim == 2 else grad
        g_x, grads = self._gemm_backward(g3, cache, ctx)
        return (g_x[:, 0, :] if grad.ndim == 2 else g_x), grads

    def output_shape(self, input_shape):
        if input_shape[-1] != self.in_features:
            raise DimensionError(f"{self.name}: expects {self.in_features} features, gets {input_shape[-1]}")
        return input_shape[:-1] + (self.out_features,)


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise DimensionError(f"kernel {kernel} does not fit extent {size} with padding {padding}")
    return out


def im2col(x, kernel, stride=1, padding=0):
    """(B, C, H, W) -> (B, H_out * W_out, C * k * k), columns ordered (C, kh, kw)."""
    B, C, H, W = x.shape
    H_out = conv_output_size(H, kernel, stride, padding)
    W_out = conv_output_size(W, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    sB, sC, sH, sW = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, H_out, W_out, C, kernel, kernel),
        strides=(sB, stride * sH, stride * sW, sC, sH, sW),
        writeable=False,
    )
    return patches.reshape(B, H_out * W_out, C * kernel * kernel)


def col2im(cols, x_shape, kernel, stride=1, padding=0):
    """Scatter-add columns back to an image; adjoint of im2col."""
    B, C, H, W = x_shape
    H_out = conv_output_size(H, kernel, stride, padding)
    W_out = conv_output_size(W, kernel, stride, padding)
    x = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(B, H_out, W_out, C, kernel, kernel)
    for kh in range(kernel):
        h_end = kh + stride * H_out
        for kw in range(kernel):
            w_end = kw + stride * W_out
            x[:, :, kh:h_end:stride, kw:w_end:stride] += cols[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
    if padding:
        x = x[:, :, padding:-padding, padding:-padding]
    return x


class Conv2d(GemmLayer):
    kind = "conv"

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, padding=0, index=0,
                 bias=True, seed=0, dtype=np.float32):
        super().__init__(name, in_channels * kernel * kernel, out_channels, index, bias, seed, dtype)
        self.in_channels = in_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"{self.name}: expected (B, {self.in_channels}, H, W), got {x.shape}")
        B, _, H, W = x.shape
        H_out = conv_output_size(H, self.kernel, self.stride, self.padding)
        W_out = conv_output_size(W, self.kernel, self.stride, self.padding)
        cols = im2col(x, self.kernel, self.stride, self.padding)
        y3, cache = self._gemm_forward(cols, ctx)
        y = y3.transpose(0, 2, 1).reshape(B, self.out_features, H_out, W_out)
        return y, (cache, x.shape)

    def backward(self, grad, cache, ctx):
        if cache is None:
            raise StateError(f"{self.name}: backward called without a training forward")
        gemm_cache, x_shape = cache
        B, O, H_out, W_out = grad.shape
        g3 = grad.reshape(B, O, H_out * W_out).transpose(0, 2, 1)
        g_cols, grads = self._gemm_backward(np.ascontiguousarray(g3), gemm_cache, ctx)
        return col2im(g_cols, x_shape, self.kernel, self.stride, self.padding), grads

    def output_shape(self, input_shape):
        C, H, W = input_shape
        if C != self.in_channels:
            raise DimensionError(f"{self.name}: expects {self.in_channels} channels, gets {C}")
        return (
            self.out_features,
            conv_output_size(H, self.kernel, self.stride, self.padding),
            conv_output_size(W, self.kernel, self.stride, self.padding),
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache, ctx):
        return grad * cache, {}


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, name, kernel=2, index=0):
        super().__init__(name, index)
        self.kernel = kernel

    def forward(self, x, ctx):
        B, C, H, W = x.shape
        k = self.kernel
        if H % k or W % k:
            raise DimensionError(f"{self.name}: {H}x{W} is not divisible by pool size {k}")
        return x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5)), x.shape

    def backward(self, grad, cache, ctx):
        k = self.kernel
        spread = np.repeat(np.repeat(grad, k, axis=2), k, axis=3)
        return spread / (k * k), {}

    def output_shape(self, input_shape):
        C, H, W = input_shape
        if H % self.kernel or W % self.kernel:
            raise DimensionError(f"{self.name}: {H}x{W} is not divisible by pool size {self.kernel}")
        return (C, H // self.kernel, W // self.kernel)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, ctx):
        return grad.reshape(cache), {}

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Tokens(Layer):
    """(B, C, H, W) feature map to (B, H * W, C): one token per position."""

    kind = "tokens"

    def forward(self, x, ctx):
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expected (B, C, H, W), got {x.shape}")
        B, C = x.shape[:2]
        return np.ascontiguousarray(x.reshape(B, C, -1).transpose(0, 2, 1)), x.shape

    def backward(self, grad, cache, ctx):
        B, C, H, W = cache
        return grad.transpose(0, 2, 1).reshape(B, C, H, W), {}

    def output_shape(self, input_shape):
        C, H, W = input_shape
        return (H * W, C)


class TokenMean(Layer):
    kind = "tokenmean"

    def forward(self, x, ctx):
        if x.ndim != 3:
            raise DimensionError(f"{self.name}: expected (B, L, K), got {x.shape}")
        return x.mean(axis=1), x.shape[1]

    def backward(self, grad, cache, ctx):
        return np.repeat(grad[:, None, :] / cache, cache, axis=1), {}

    def output_shape(self, input_shape):
        if len(input_shape) != 2:
            raise DimensionError(f"{self.name}: expects (L, K) tokens, gets {input_shape}")
        return input_shape[1:]


def softmax_cross_entropy(logits, labels):
    """Mean loss and the per-sample gradient of the summed loss w.r.t. logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad


LAYER_KINDS = {
    "linear": Linear,
    "conv": Conv2d,
    "relu": ReLU,
    "avgpool": AvgPool2d,
    "flatten": Flatten,
    "tokens": Tokens,
    "tokenmean": TokenMean,
}
