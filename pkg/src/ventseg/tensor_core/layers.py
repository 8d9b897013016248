"""Differentiable layers built on the conv primitives.

Every layer exposes:

``forward(x, train=False, rng=None)``
    Runs the op, caching whatever the backward pass needs.  ``rng`` is only
    consumed by layers with stochastic forward behavior (dropout).

``backward(grad_out)``
    Consumes the forward cache, accumulates parameter gradients into
    ``Param.grad`` and returns the gradient w.r.t. the layer input.

``params()`` / ``buffers()``
    Learnable parameters and non-learned running state (for checkpoints).

Parameters live in float32 by default; computation follows the input dtype
so gradient checks can run the identical code in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError
from . import conv as C

__all__ = [
    "Param",
    "Layer",
    "Conv3d",
    "CrossConv3d",
    "TransposeConv3d",
    "MaxPool3d",
    "BatchNorm",
    "ReLU",
    "Sigmoid",
    "Dropout",
    "Linear",
    "Flatten",
    "Sequential",
    "softmax2",
]


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a trailing axis of exactly 2 logits."""
    logits = np.asarray(logits)
    if logits.shape[-1] != 2:
        raise ShapeError(f"softmax2 expects a trailing axis of 2, got {logits.shape}")
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


class Param:
    """A named learnable array with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class Layer:
    """Base class; subclasses fill in forward/backward."""

    name: str = ""

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def zero_grads(self) -> None:
        for p in self.params():
            p.grad[...] = 0

    def cast_(self, dtype) -> None:
        """Cast parameters, gradients and buffers in place (for grad checks)."""
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for attr in getattr(self, "_buffer_attrs", ()):
            setattr(self, attr, getattr(self, attr).astype(dtype))

    def forward(self, x, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / max(fan_in, 1)))


class Conv3d(Layer):
    """Dense 3D convolution with bias."""

    def __init__(self, in_ch, out_ch, kernel, *, stride=1, padding="same",
                 rng=None, method="auto", name="conv"):
        rng = rng or np.random.default_rng(0)
        k = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
        std = _he_std(in_ch * int(np.prod(k)))
        self.name = name
        self.stride = stride
        self.padding = padding
        self.method = method
        self.w = Param(f"{name}.w", rng.normal(0.0, std, (out_ch, in_ch) + k).astype(np.float32))
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=np.float32))
        self._ctx = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        y, self._ctx = C.conv3d_forward(
            x, self.w.value, self.b.value,
            stride=self.stride, padding=self.padding, method=self.method,
        )
        return y

    def backward(self, grad_out):
        gx, gw, gb = C.conv3d_backward(self._ctx, self.w.value, grad_out)
        self._ctx = None
        self.w.grad += gw
        self.b.grad += gb
        return gx


class CrossConv3d(Layer):
    """Conv whose kernel is a sum of three orthogonal 1D filter lines."""

    def __init__(self, in_ch, out_ch, kernel=7, *, rng=None, name="cross"):
        rng = rng or np.random.default_rng(0)
        std = _he_std(in_ch * 3 * kernel)
        shape = (out_ch, in_ch, kernel)
        self.name = name
        self.wz = Param(f"{name}.wz", rng.normal(0.0, std, shape).astype(np.float32))
        self.wy = Param(f"{name}.wy", rng.normal(0.0, std, shape).astype(np.float32))
        self.wx = Param(f"{name}.wx", rng.normal(0.0, std, shape).astype(np.float32))
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=np.float32))
        self._cache = None

    def params(self):
        return [self.wz, self.wy, self.wx, self.b]

    def dense_kernel(self) -> np.ndarray:
        return C.materialize_cross_kernel(self.wz.value, self.wy.value, self.wx.value)

    def forward(self, x, train=False, rng=None):
        y, self._cache = C.cross_conv3d_forward(
            x, self.wz.value, self.wy.value, self.wx.value, self.b.value
        )
        return y

    def backward(self, grad_out):
        gx, gwz, gwy, gwx, gb = C.cross_conv3d_backward(
            self._cache, self.wz.value, self.wy.value, self.wx.value, grad_out
        )
        self._cache = None
        self.wz.grad += gwz
        self.wy.grad += gwy
        self.wx.grad += gwx
        self.b.grad += gb
        return gx


class TransposeConv3d(Layer):
    """Stride-2 upsampler, the exact adjoint of a stride-2 kernel-2 conv."""

    def __init__(self, in_ch, out_ch, *, stride=2, rng=None, name="tconv"):
        rng = rng or np.random.default_rng(0)
        s = stride
        std = _he_std(in_ch)
        self.name = name
        self.stride = s
        self.w = Param(
            f"{name}.w",
            rng.normal(0.0, std, (in_ch, out_ch, s, s, s)).astype(np.float32),
        )
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=np.float32))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        y, self._cache = C.transpose_conv3d_forward(
            x, self.w.value, self.b.value, stride=self.stride
        )
        return y

    def backward(self, grad_out):
        gx, gw, gb = C.transpose_conv3d_backward(
            self._cache, self.w.value, grad_out, stride=self.stride
        )
        self._cache = None
        self.w.grad += gw
        self.b.grad += gb
        return gx


class MaxPool3d(Layer):
    def __init__(self, k: int = 2, name="pool"):
        self.name = name
        self.k = k
        self._argmax = None
        self._in_shape = None

    def forward(self, x, train=False, rng=None):
        y, self._argmax = C.maxpool3d_forward(x, self.k)
        self._in_shape = x.shape
        return y

    def backward(self, grad_out):
        gx = C.maxpool3d_backward(grad_out, self._argmax, self._in_shape, self.k)
        self._argmax = None
        return gx


class BatchNorm(Layer):
    """Batch normalization over all axes except the channel axis (dim 1).

    Works for (B, C) and (B, C, D, H, W) inputs alike.  Batch statistics use
    the biased variance; running stats follow
    ``r <- (1 - momentum) * r + momentum * batch_stat``.
    """

    _buffer_attrs = ("running_mean", "running_var")

    def __init__(self, ch: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 name="bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(ch, dtype=np.float32))
        self.beta = Param(f"{name}.beta", np.zeros(ch, dtype=np.float32))
        self.running_mean = np.zeros(ch, dtype=np.float32)
        self.running_var = np.ones(ch, dtype=np.float32)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    @staticmethod
    def _cshape(x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, train=False, rng=None):
        if x.size == 0:
            raise ShapeError(f"batchnorm got an empty input of shape {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        cs = self._cshape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(cs)) * inv.reshape(cs)
            m = self.momentum
            self.running_mean[...] = ((1 - m) * self.running_mean
                                      + m * mean.astype(self.running_mean.dtype))
            self.running_var[...] = ((1 - m) * self.running_var
                                     + m * var.astype(self.running_var.dtype))
            self._cache = ("train", xhat, inv, axes)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(cs)) * inv.reshape(cs)
            self._cache = ("eval", xhat, inv, axes)
        return self.gamma.value.reshape(cs) * xhat + self.beta.value.reshape(cs)

    def backward(self, grad_out):
        mode, xhat, inv, axes = self._cache
        self._cache = None
        cs = self._cshape(grad_out)
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.value.reshape(cs)
        if mode == "eval":
            return dxhat * inv.reshape(cs)
        n = grad_out.size // grad_out.shape[1]
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv.reshape(cs) / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad_out):
        g = np.where(self._mask, grad_out, 0)
        self._mask = None
        return g


class Sigmoid(Layer):
    def __init__(self, name="sigmoid"):
        self.name = name
        self._y = None

    def forward(self, x, train=False, rng=None):
        self._y = expit(x)
        return self._y

    def backward(self, grad_out):
        g = grad_out * self._y * (1.0 - self._y)
        self._y = None
        return g


class Dropout(Layer):
    """Inverted dropout: active only in training, identity at inference."""

    def __init__(self, rate: float, name="dropout"):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.name = name
        self.rate = rate
        self._scale_mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._scale_mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._scale_mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._scale_mask

    def backward(self, grad_out):
        if self._scale_mask is None:
            return grad_out
        g = grad_out * self._scale_mask
        self._scale_mask = None
        return g


class Linear(Layer):
    def __init__(self, in_features, out_features, *, rng=None, name="linear"):
        rng = rng or np.random.default_rng(0)
        std = _he_std(in_features)
        self.name = name
        self.w = Param(
            f"{name}.w",
            rng.normal(0.0, std, (out_features, in_features)).astype(np.float32),
        )
        self.b = Param(f"{name}.b", np.zeros(out_features, dtype=np.float32))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2:
            raise ShapeError(f"linear expects (B, N), got {x.shape}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, grad_out):
        self.w.grad += grad_out.T @ self._x
        self.b.grad += grad_out.sum(axis=0)
        gx = grad_out @ self.w.value
        self._x = None
        return gx


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        g = grad_out.reshape(self._shape)
        self._shape = None
        return g


class Sequential(Layer):
    """Chain of layers run in order; backward replays them reversed."""

    def __init__(self, layers: list[Layer], name="seq"):
        self.name = name
        self.layers = layers

    def params(self):
        return [p for lyr in self.layers for p in lyr.params()]

    def buffers(self):
        return [b for lyr in self.layers for b in lyr.buffers()]

    def cast_(self, dtype):
        for lyr in self.layers:
            lyr.cast_(dtype)

    def forward(self, x, train=False, rng=None):
        for lyr in self.layers:
            x = lyr.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad_out):
        for lyr in reversed(self.layers):
            grad_out = lyr.backward(grad_out)
        return grad_out
