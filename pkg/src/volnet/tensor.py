"""Dense 5-D tensor primitives: creation, elementwise math, matmul,
trilinear resampling, and reductions.

Tensors are plain numpy arrays in NCDHW order (batch, channel, depth,
height, width), row-major with W fastest. Two dtypes are supported:
f32 for training speed and f64 for gradient-check mode. Binary ops never
broadcast; a shape mismatch is always an error.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

F32 = np.dtype("float32")
F64 = np.dtype("float64")

_DTYPES = {"f32": F32, "f64": F64}

# When enabled, every op asserts its output is free of NaN/Inf.
check_finite = False


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


class Shape(NamedTuple):
    """Tensor extent along (batch, channel, depth, height, width)."""

    n: int
    c: int
    d: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.d * self.h * self.w

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.d, self.h, self.w)


def resolve_dtype(dtype) -> np.dtype:
    """Map 'f32'/'f64' (or a numpy dtype) to the numpy dtype object."""
    if isinstance(dtype, str):
        try:
            return _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}, expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in (F32, F64):
        raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
    return dt


def as_shape(shape) -> Shape:
    shape = Shape(*shape)
    for extent in shape:
        if not isinstance(extent, (int, np.integer)) or extent < 0:
            raise ShapeError(f"shape entries must be nonnegative integers, got {tuple(shape)}")
    return shape


def _maybe_check(out: np.ndarray) -> np.ndarray:
    if check_finite and out.size and not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced NaN or Inf from finite inputs")
    return out


def create(shape, init: str = "zeros", *, value: float = 0.0, seed: int = 0,
           lo: float = 0.0, hi: float = 1.0, mean: float = 0.0, std: float = 1.0,
           dtype="f32") -> np.ndarray:
    """Allocate a 5-D tensor.

    init is one of zeros | ones | constant | uniform | normal. The random
    initializers are driven by a dedicated PCG64 generator, so the same
    seed always yields bit-identical data.
    """
    shape = as_shape(shape)
    dt = resolve_dtype(dtype)
    if init == "zeros":
        return np.zeros(shape, dtype=dt)
    if init == "ones":
        return np.ones(shape, dtype=dt)
    if init == "constant":
        return np.full(shape, value, dtype=dt)
    rng = np.random.Generator(np.random.PCG64(seed))
    if init == "uniform":
        return rng.uniform(lo, hi, size=shape).astype(dt)
    if init == "normal":
        return rng.normal(mean, std, size=shape).astype(dt)
    raise ValueError(f"unknown init {init!r}")


def elementwise(op: str, a: np.ndarray, b: np.ndarray | None = None, *,
                alpha: float | None = None) -> np.ndarray:
    """Pointwise op: add | sub | mul | scale | relu.

    Binary ops require identical shapes; there is no implicit broadcast.
    """
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"elementwise {op!r} needs a second operand")
        if a.shape != b.shape:
            raise ShapeError(f"elementwise {op!r} shape mismatch: {a.shape} vs {b.shape}")
        fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op]
        return _maybe_check(fn(a, b))
    if op == "scale":
        if alpha is None:
            raise ValueError("elementwise 'scale' needs alpha")
        return _maybe_check(a * a.dtype.type(alpha))
    if op == "relu":
        return _maybe_check(np.maximum(a, a.dtype.type(0)))
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of 2-D operands with an inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ndim {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    return _maybe_check(np.matmul(a, b))


def trilinear_upsample(src: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Resample the trailing (D, H, W) axes to `target` dims.

    Uses the align-corners-false convention: output voxel centers map to
    input coordinates (o + 0.5) * in/out - 0.5, clamped at the borders.
    Interpolation is written in lerp form (x0 + f * (x1 - x0)) so a
    constant field stays exactly constant.
    """
    if src.ndim < 3:
        raise ShapeError(f"expected at least 3 dims (D, H, W), got shape {src.shape}")
    td, th, tw = (int(t) for t in target)
    if td <= 0 or th <= 0 or tw <= 0:
        raise ShapeError(f"target dims must be positive, got {(td, th, tw)}")
    sd, sh, sw = src.shape[-3:]
    if sd < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"source spatial dims must be >= 1, got {(sd, sh, sw)}")

    def axis_coords(n_in: int, n_out: int):
        centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        centers = np.clip(centers, 0.0, n_in - 1)
        i0 = np.floor(centers).astype(np.intp)
        i0 = np.minimum(i0, max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = (centers - i0).astype(src.dtype)
        return i0, i1, frac

    d0, d1, fd = axis_coords(sd, td)
    h0, h1, fh = axis_coords(sh, th)
    w0, w1, fw = axis_coords(sw, tw)

    ix_d0 = d0[:, None, None]
    ix_d1 = d1[:, None, None]
    ix_h0 = h0[None, :, None]
    ix_h1 = h1[None, :, None]
    ix_w0 = w0[None, None, :]
    ix_w1 = w1[None, None, :]

    def lerp(x0, x1, f):
        return x0 + f * (x1 - x0)

    fw_b = fw[None, None, :]
    fh_b = fh[None, :, None]
    fd_b = fd[:, None, None]

    c00 = lerp(src[..., ix_d0, ix_h0, ix_w0], src[..., ix_d0, ix_h0, ix_w1], fw_b)
    c01 = lerp(src[..., ix_d0, ix_h1, ix_w0], src[..., ix_d0, ix_h1, ix_w1], fw_b)
    c10 = lerp(src[..., ix_d1, ix_h0, ix_w0], src[..., ix_d1, ix_h0, ix_w1], fw_b)
    c11 = lerp(src[..., ix_d1, ix_h1, ix_w0], src[..., ix_d1, ix_h1, ix_w1], fw_b)
    c0 = lerp(c00, c01, fh_b)
    c1 = lerp(c10, c11, fh_b)
    return _maybe_check(lerp(c0, c1, fd_b))


def reduce(op: str, t: np.ndarray, axes=None, keepdims: bool = False) -> np.ndarray:
    """Reduce with sum | mean | max over `axes` (None = all axes).

    max over an empty axis tuple is the identity.
    """
    if axes is not None:
        axes = (axes,) if isinstance(axes, (int, np.integer)) else tuple(axes)
        for ax in axes:
            if not -t.ndim <= ax < t.ndim:
                raise ShapeError(f"axis {ax} out of range for ndim {t.ndim}")
        if len(axes) == 0:
            return t.copy()
    if op == "sum":
        return _maybe_check(np.sum(t, axis=axes, keepdims=keepdims))
    if op == "mean":
        return _maybe_check(np.mean(t, axis=axes, keepdims=keepdims))
    if op == "max":
        return _maybe_check(np.max(t, axis=axes, keepdims=keepdims))
    raise ValueError(f"unknown reduce op {op!r}")
