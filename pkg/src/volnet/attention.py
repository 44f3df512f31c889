"""Self-attention over spatial locations and the residual block family.

The attention layer flattens a (N, C, D, H, W) feature map to C x N_loc,
projects it to key/query/value spaces with 1x1x1 convolutions (pure channel
mixes), softmax-normalizes key-query similarities over the key axis for each
output position, and mixes values accordingly. A residual block computes
y = skip(x) + r(x), optionally plus gamma * attention(r(x)) where gamma is a
learnable scalar starting at zero, so a freshly initialized attention block
behaves exactly like its plain residual counterpart.
"""

from __future__ import annotations

import numpy as np

from .layers import BatchNorm3D, Conv3D, Layer, Param, ReLU
from .tensor import ShapeError, resolve_dtype


def attention_channels(channels: int) -> int:
    """Bottleneck width for the key/query/value projections (C // 8, min 1)."""
    return max(1, channels // 8)


class SelfAttention3D(Layer):
    """Location-to-location attention with learnable blend scalar gamma.

    forward() returns the value-mixed output (same shape as the input) and
    stores the attention map; map columns are softmax distributions over key
    locations, so each column sums to 1.
    """

    def __init__(self, name: str, channels: int, attn_channels: int | None = None,
                 dtype="f32", rng: np.random.Generator | None = None):
        super().__init__(name)
        dt = resolve_dtype(dtype)
        rng = rng or np.random.Generator(np.random.PCG64(0))
        self.channels = channels
        self.attn_channels = attn_channels or attention_channels(channels)
        ca = self.attn_channels

        def proj(pname, rows, cols):
            std = np.sqrt(2.0 / cols)
            return Param(f"{name}.{pname}", rng.normal(0.0, std, (rows, cols)).astype(dt))

        self.w_key = proj("w_key", ca, channels)
        self.w_query = proj("w_query", ca, channels)
        self.w_value = proj("w_value", ca, channels)
        self.w_out = proj("w_out", channels, ca)
        self.gamma = Param(f"{name}.gamma", np.zeros((), dtype=dt))
        self._cache = None
        self.last_map = None

    def params(self):
        return [self.w_key, self.w_query, self.w_value, self.w_out, self.gamma]

    def forward(self, feat, mode="train"):
        if feat.ndim != 5 or feat.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected (N,{self.channels},D,H,W), "
                             f"got {feat.shape}")
        n, c, d, h, w = feat.shape
        n_loc = d * h * w
        x = feat.reshape(n, c, n_loc)
        keys = np.matmul(self.w_key.data, x)        # (n, ca, n_loc)
        queries = np.matmul(self.w_query.data, x)   # (n, ca, n_loc)
        values = np.matmul(self.w_value.data, x)    # (n, ca, n_loc)
        # similarity[i, j] = key_i . query_j; normalize over i per column j
        sim = np.matmul(keys.transpose(0, 2, 1), queries)  # (n, n_loc, n_loc)
        sim -= sim.max(axis=1, keepdims=True)
        e = np.exp(sim)
        amap = e / e.sum(axis=1, keepdims=True)
        mixed = np.matmul(values, amap)             # (n, ca, n_loc)
        out = np.matmul(self.w_out.data, mixed)     # (n, c, n_loc)
        self._cache = (x, keys, queries, values, amap, mixed, feat.shape)
        self.last_map = amap
        return out.reshape(feat.shape)

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        x, keys, queries, values, amap, mixed, shape = self._cache
        if grad_out.shape != shape:
            raise ShapeError(f"{self.name}: grad shape {grad_out.shape} != {shape}")
        n, c = shape[0], shape[1]
        n_loc = x.shape[2]
        g_out = grad_out.reshape(n, c, n_loc)

        self.w_out.grad += np.einsum("ncl,nal->ca", g_out, mixed)
        g_mixed = np.matmul(self.w_out.data.T, g_out)             # (n, ca, n_loc)
        g_values = np.matmul(g_mixed, amap.transpose(0, 2, 1))    # (n, ca, n_loc)
        g_map = np.matmul(values.transpose(0, 2, 1), g_mixed)     # (n, n_loc, n_loc)
        # softmax over the key axis (axis 1), independently per column
        g_sim = amap * (g_map - (amap * g_map).sum(axis=1, keepdims=True))
        g_keys = np.matmul(queries, g_sim.transpose(0, 2, 1))     # (n, ca, n_loc)
        g_queries = np.matmul(keys, g_sim)                        # (n, ca, n_loc)

        self.w_key.grad += np.einsum("nal,ncl->ac", g_keys, x)
        self.w_query.grad += np.einsum("nal,ncl->ac", g_queries, x)
        self.w_value.grad += np.einsum("nal,ncl->ac", g_values, x)
        g_x = (np.matmul(self.w_key.data.T, g_keys)
               + np.matmul(self.w_query.data.T, g_queries)
               + np.matmul(self.w_value.data.T, g_values))
        return g_x.reshape(shape)


class ConvBlock(Layer):
    """Conv3D + BatchNorm3D + ReLU, the unit every architecture stacks."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, dtype="f32", rng=None):
        super().__init__(name)
        self.conv = Conv3D(f"{name}.conv", c_in, c_out, kernel, stride, dtype=dtype, rng=rng)
        self.bn = BatchNorm3D(f"{name}.bn", c_out, dtype=dtype)
        self.relu = ReLU(f"{name}.relu")

    def params(self):
        return self.conv.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, x, mode="train"):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, mode), mode), mode)

    def backward(self, grad_out):
        return self.conv.backward(self.bn.backward(self.relu.backward(grad_out)))


class ResidualBlock(Layer):
    """Two ConvBlocks on the main path plus an identity or projected skip.

    With attention enabled the block output becomes
        y = skip(x) + r(x) + gamma * attention(r(x)),
    which reduces to the plain residual form while gamma stays at zero.
    """

    def __init__(self, name: str, c_in: int, c_out: int, stride: int = 1,
                 attention: bool = False, dtype="f32", rng=None):
        super().__init__(name)
        self.sub1 = ConvBlock(f"{name}.sub1", c_in, c_out, 3, stride, dtype, rng)
        self.sub2 = ConvBlock(f"{name}.sub2", c_out, c_out, 3, 1, dtype, rng)
        self.projection = None
        if stride != 1 or c_in != c_out:
            self.projection = Conv3D(f"{name}.proj", c_in, c_out, kernel=1,
                                     stride=stride, padding=0, dtype=dtype, rng=rng)
            self.proj_bn = BatchNorm3D(f"{name}.proj_bn", c_out, dtype=dtype)
        self.attn = SelfAttention3D(f"{name}.attn", c_out, dtype=dtype, rng=rng) \
            if attention else None
        self._cache = None

    def params(self):
        ps = self.sub1.params() + self.sub2.params()
        if self.projection is not None:
            ps += self.projection.params() + self.proj_bn.params()
        if self.attn is not None:
            ps += self.attn.params()
        return ps

    def buffers(self):
        bs = self.sub1.buffers() + self.sub2.buffers()
        if self.projection is not None:
            bs += self.proj_bn.buffers()
        return bs

    def forward(self, x, mode="train"):
        r = self.sub2.forward(self.sub1.forward(x, mode), mode)
        skip = x if self.projection is None else \
            self.proj_bn.forward(self.projection.forward(x, mode), mode)
        if skip.shape != r.shape:
            raise ShapeError(f"{self.name}: skip shape {skip.shape} != residual "
                             f"shape {r.shape}")
        y = skip + r
        attn_out = None
        if self.attn is not None:
            attn_out = self.attn.forward(r, mode)
            y = y + self.attn.gamma.data * attn_out
        self._cache = attn_out
        return y

    def backward(self, grad_out):
        attn_out = self._cache
        grad_r = grad_out
        if self.attn is not None:
            self.attn.gamma.grad += (grad_out * attn_out).sum()
            grad_r = grad_out + self.attn.backward(
                self.attn.gamma.data * grad_out)
        grad_x = self.sub1.backward(self.sub2.backward(grad_r))
        if self.projection is None:
            grad_x = grad_x + grad_out
        else:
            grad_x = grad_x + self.projection.backward(self.proj_bn.backward(grad_out))
        return grad_x
