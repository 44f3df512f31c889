"""Network building blocks with explicit forward and backward passes.

Every layer caches what its backward pass needs during forward, accumulates
parameter gradients into Param.grad buffers, and returns the gradient with
respect to its input. Gradients are verified against central finite
differences (see gradcheck).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, resolve_dtype


class Param:
    """A learnable tensor plus its gradient accumulation buffer."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    """Base class: named, with params/buffers and forward/backward."""

    def __init__(self, name: str):
        self.name = name

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv3D(Layer):
    """Direct 3D cross-correlation with bias, cubic kernel of size 1 or 3."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, dtype="f32",
                 rng: np.random.Generator | None = None):
        super().__init__(name)
        if kernel not in (1, 3):
            raise ValueError(f"{name}: kernel must be 1 or 3, got {kernel}")
        if stride < 1:
            raise ValueError(f"{name}: stride must be positive, got {stride}")
        dt = resolve_dtype(dtype)
        rng = rng or np.random.Generator(np.random.PCG64(0))
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        if self.padding < 0:
            raise ValueError(f"{name}: padding must be nonnegative")
        w = kaiming_normal(rng, (c_out, c_in, kernel, kernel, kernel),
                           c_in * kernel ** 3, dt)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dt))
        self._xp = None
        self._out_shape = None

    def params(self):
        return [self.w, self.b]

    def out_dims(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        dims = tuple((s + 2 * self.padding - self.kernel) // self.stride + 1
                     for s in spatial)
        if min(dims) < 1:
            raise ShapeError(
                f"{self.name}: input {spatial} collapses to non-positive output "
                f"dims {dims} (kernel {self.kernel}, stride {self.stride}, "
                f"padding {self.padding})")
        return dims

    def forward(self, x, mode="train"):
        if x.ndim != 5 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (N,{self.c_in},D,H,W), got {x.shape}")
        od, oh, ow = self.out_dims(x.shape[2:])
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x)
        out = np.empty((x.shape[0], self.c_out, od, oh, ow), dtype=x.dtype)
        kernels.conv3d_forward(xp, self.w.data, self.b.data, self.stride, out)
        self._xp = xp
        self._out_shape = out.shape
        return out

    def backward(self, grad_out):
        if self._xp is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if grad_out.shape != self._out_shape:
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != "
                             f"forward output {self._out_shape}")
        grad_out = np.ascontiguousarray(grad_out)
        dw = np.empty_like(self.w.data)
        kernels.conv3d_grad_weights(self._xp, grad_out, self.stride, dw)
        self.w.grad += dw
        self.b.grad += grad_out.sum(axis=(0, 2, 3, 4), dtype=grad_out.dtype)
        dxp = np.zeros_like(self._xp)
        kernels.conv3d_grad_input(grad_out, self.w.data, self.stride, dxp)
        p = self.padding
        if p:
            return np.ascontiguousarray(dxp[:, :, p:-p, p:-p, p:-p])
        return dxp


class BatchNorm3D(Layer):
    """Per-channel normalization over (N, D, H, W).

    Train mode normalizes by batch statistics (biased variance) and updates
    the running estimates; eval mode normalizes by the running estimates.
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 epsilon: float = 1e-5, dtype="f32"):
        super().__init__(name)
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"{name}: momentum must be in (0,1)")
        if epsilon <= 0:
            raise ValueError(f"{name}: epsilon must be positive")
        dt = resolve_dtype(dtype)
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma_scale = Param(f"{name}.gamma_scale", np.ones(channels, dtype=dt))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self._cache = None

    def params(self):
        return [self.gamma_scale, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x, mode="train"):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected (N,{self.channels},D,H,W), got {x.shape}")
        n, c, d, h, w = x.shape
        count = n * d * h * w
        axes = (0, 2, 3, 4)
        g = self.gamma_scale.data.reshape(1, c, 1, 1, 1)
        b = self.beta.data.reshape(1, c, 1, 1, 1)
        if mode == "train":
            if count < 2:
                raise ShapeError(f"{self.name}: train mode needs >= 2 values per "
                                 f"channel, got {count}")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
            xhat = (x - mean.reshape(1, c, 1, 1, 1)) * inv_std.reshape(1, c, 1, 1, 1)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
            self._cache = ("train", xhat, inv_std, count)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + x.dtype.type(self.epsilon))
            xhat = (x - self.running_mean.reshape(1, c, 1, 1, 1)) * inv_std.reshape(1, c, 1, 1, 1)
            self._cache = ("eval", xhat, inv_std, count)
        return g * xhat + b

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        mode, xhat, inv_std, count = self._cache
        if grad_out.shape != xhat.shape:
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != {xhat.shape}")
        c = self.channels
        axes = (0, 2, 3, 4)
        self.beta.grad += grad_out.sum(axis=axes)
        self.gamma_scale.grad += (grad_out * xhat).sum(axis=axes)
        dxhat = grad_out * self.gamma_scale.data.reshape(1, c, 1, 1, 1)
        if mode == "eval":
            return dxhat * inv_std.reshape(1, c, 1, 1, 1)
        sum_d = dxhat.sum(axis=axes).reshape(1, c, 1, 1, 1)
        sum_dx = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1, 1)
        return (inv_std.reshape(1, c, 1, 1, 1) / count) * (
            count * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__(name)
        self._mask = None

    def forward(self, x, mode="train"):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad_out):
        if self._mask is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if grad_out.shape != self._mask.shape:
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != "
                             f"{self._mask.shape}")
        return np.where(self._mask, grad_out, grad_out.dtype.type(0))


class MaxPool3D(Layer):
    """Non-overlapping max pooling; ties route to the first voxel in scan order."""

    def __init__(self, name: str, kernel: int = 2, stride: int = 2):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride
        self._cache = None

    def forward(self, x, mode="train"):
        if x.ndim != 5:
            raise ShapeError(f"{self.name}: expected 5-D input, got {x.shape}")
        if min(x.shape[2:]) < self.kernel:
            raise ShapeError(f"{self.name}: spatial dims {x.shape[2:]} smaller "
                             f"than kernel {self.kernel}")
        dims = tuple((s - self.kernel) // self.stride + 1 for s in x.shape[2:])
        out = np.empty(x.shape[:2] + dims, dtype=x.dtype)
        argmax = np.empty(out.shape, dtype=np.int64)
        x = np.ascontiguousarray(x)
        kernels.maxpool3d_forward(x, self.kernel, self.stride, out, argmax)
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        in_shape, argmax = self._cache
        if grad_out.shape != argmax.shape:
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != "
                             f"{argmax.shape}")
        dx = np.zeros(in_shape, dtype=grad_out.dtype)
        kernels.maxpool3d_backward(np.ascontiguousarray(grad_out), argmax, dx)
        return dx


class GlobalAvgPool(Layer):
    """Mean over (D, H, W), producing (N, C) features."""

    def __init__(self, name: str):
        super().__init__(name)
        self._in_shape = None

    def forward(self, x, mode="train"):
        if x.ndim != 5:
            raise ShapeError(f"{self.name}: expected 5-D input, got {x.shape}")
        self._in_shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, grad_out):
        n, c, d, h, w = self._in_shape
        if grad_out.shape != (n, c):
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != {(n, c)}")
        count = d * h * w
        return np.broadcast_to((grad_out / count)[:, :, None, None, None],
                               self._in_shape).copy()


class FC(Layer):
    """Affine map on flattened features: y = x W^T + b."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 dtype="f32", rng: np.random.Generator | None = None):
        super().__init__(name)
        dt = resolve_dtype(dtype)
        rng = rng or np.random.Generator(np.random.PCG64(0))
        self.in_features = in_features
        self.out_features = out_features
        self.w = Param(f"{name}.w", kaiming_normal(rng, (out_features, in_features),
                                                   in_features, dt))
        self.b = Param(f"{name}.b", np.zeros(out_features, dtype=dt))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, mode="train"):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N,{self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.w.data.T + self.b.data

    def backward(self, grad_out):
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        if grad_out.shape != (self._x.shape[0], self.out_features):
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != "
                             f"{(self._x.shape[0], self.out_features)}")
        self.w.grad += grad_out.T @ self._x
        self.b.grad += grad_out.sum(axis=0)
        return grad_out @ self.w.data


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row max."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_crossentropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Returns (loss, grad) with grad = (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    probs = softmax(logits)
    # log-softmax recomputed from the shifted logits for numerical stability
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = probs
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype)
