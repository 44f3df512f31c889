"""JIT-compiled direct loop nests for 3D convolution and pooling.

All kernels accumulate each output element in a fixed sequential order and
parallelize only over independent output slices (batch/channel), so results
are bit-identical regardless of thread count. Loops run along the W axis
(stride 1 in memory) innermost; the stride-1 case uses contiguous row
slices so the compiler can vectorize the multiply-accumulate.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_forward(xp, w, bias, stride, out):
    """Cross-correlate padded input xp (N,Ci,Dp,Hp,Wp) with w (Co,Ci,k,k,k)."""
    n_b = xp.shape[0]
    c_in = xp.shape[1]
    c_out = w.shape[0]
    k = w.shape[2]
    od, oh, ow = out.shape[2], out.shape[3], out.shape[4]
    for idx in prange(n_b * c_out):
        n = idx // c_out
        co = idx % c_out
        row = np.empty(ow, dtype=out.dtype)
        for z in range(od):
            zi = z * stride
            for y in range(oh):
                yi = y * stride
                for x in range(ow):
                    row[x] = bias[co]
                for ci in range(c_in):
                    for kd in range(k):
                        for kh in range(k):
                            base = xp[n, ci, zi + kd, yi + kh]
                            for kw in range(k):
                                wv = w[co, ci, kd, kh, kw]
                                if stride == 1:
                                    seg = base[kw:kw + ow]
                                    for x in range(ow):
                                        row[x] += wv * seg[x]
                                else:
                                    for x in range(ow):
                                        row[x] += wv * base[x * stride + kw]
                for x in range(ow):
                    out[n, co, z, y, x] = row[x]


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_grad_weights(xp, grad, stride, dw):
    """dL/dw from padded input and output gradient; dw written in place."""
    n_b = xp.shape[0]
    c_in = xp.shape[1]
    c_out = grad.shape[1]
    k = dw.shape[2]
    od, oh, ow = grad.shape[2], grad.shape[3], grad.shape[4]
    for co in prange(c_out):
        for ci in range(c_in):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        acc = dw.dtype.type(0.0)
                        for n in range(n_b):
                            for z in range(od):
                                for y in range(oh):
                                    grow = grad[n, co, z, y]
                                    xrow = xp[n, ci, z * stride + kd, y * stride + kh]
                                    if stride == 1:
                                        seg = xrow[kw:kw + ow]
                                        for x in range(ow):
                                            acc += grow[x] * seg[x]
                                    else:
                                        for x in range(ow):
                                            acc += grow[x] * xrow[x * stride + kw]
                        dw[co, ci, kd, kh, kw] = acc


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_grad_input(grad, w, stride, dxp):
    """dL/d(padded input), scattered per sample; dxp must start zeroed."""
    n_b = grad.shape[0]
    c_out = grad.shape[1]
    c_in = w.shape[1]
    k = w.shape[2]
    od, oh, ow = grad.shape[2], grad.shape[3], grad.shape[4]
    for n in prange(n_b):
        for co in range(c_out):
            for z in range(od):
                zi = z * stride
                for y in range(oh):
                    yi = y * stride
                    grow = grad[n, co, z, y]
                    for ci in range(c_in):
                        for kd in range(k):
                            for kh in range(k):
                                drow = dxp[n, ci, zi + kd, yi + kh]
                                for kw in range(k):
                                    wv = w[co, ci, kd, kh, kw]
                                    if stride == 1:
                                        seg = drow[kw:kw + ow]
                                        for x in range(ow):
                                            seg[x] += wv * grow[x]
                                    else:
                                        for x in range(ow):
                                            drow[x * stride + kw] += wv * grow[x]


@njit(parallel=True, cache=True)
def maxpool3d_forward(x, k, stride, out, argmax):
    """Max over k^3 windows; argmax stores the flat (d,h,w) index of the
    winning voxel, first occurrence on ties (strict > update)."""
    n_b, c, d, h, w = x.shape
    od, oh, ow = out.shape[2], out.shape[3], out.shape[4]
    for idx in prange(n_b * c):
        n = idx // c
        ci = idx % c
        for z in range(od):
            for y in range(oh):
                for x_o in range(ow):
                    zi0 = z * stride
                    yi0 = y * stride
                    xi0 = x_o * stride
                    best = x[n, ci, zi0, yi0, xi0]
                    best_idx = (zi0 * h + yi0) * w + xi0
                    for kd in range(k):
                        for kh in range(k):
                            for kw in range(k):
                                v = x[n, ci, zi0 + kd, yi0 + kh, xi0 + kw]
                                if v > best:
                                    best = v
                                    best_idx = ((zi0 + kd) * h + (yi0 + kh)) * w + (xi0 + kw)
                    out[n, ci, z, y, x_o] = best
                    argmax[n, ci, z, y, x_o] = best_idx


@njit(parallel=True, cache=True)
def maxpool3d_backward(grad, argmax, dx):
    """Route each cell's gradient to its recorded argmax voxel."""
    n_b, c, od, oh, ow = grad.shape
    h = dx.shape[3]
    w = dx.shape[4]
    for idx in prange(n_b * c):
        n = idx // c
        ci = idx % c
        for z in range(od):
            for y in range(oh):
                for x_o in range(ow):
                    flat = argmax[n, ci, z, y, x_o]
                    xi = flat % w
                    yi = (flat // w) % h
                    zi = flat // (w * h)
                    dx[n, ci, zi, yi, xi] += grad[n, ci, z, y, x_o]
