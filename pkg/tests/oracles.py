"""Independent reference implementations the tests check against.

Everything here is deliberately naive (explicit Python loops, per-voxel
scalar formulas) and shares no code with the library paths it verifies.
"""

import numpy as np


def matmul_triple_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv3d(x, w, bias, stride=1, padding=0):
    """Direct cross-correlation: loop over every output voxel, multiply the
    input patch by the kernel, sum, add bias."""
    n_b, c_in, d, h, wd = x.shape
    c_out, _, k, _, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding),
                       (padding, padding)))
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n_b, c_out, od, oh, ow), dtype=x.dtype)
    for n in range(n_b):
        for co in range(c_out):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        patch = x[n, :, z * stride:z * stride + k,
                                  y * stride:y * stride + k,
                                  xx * stride:xx * stride + k]
                        out[n, co, z, y, xx] = np.sum(patch * w[co]) + bias[co]
    return out


def attention_oracle(feat, w_key, w_query, w_value, w_out):
    """Materialize per-location key/query/value vectors and run the
    normalized similarity mixing with explicit (i, j) loops."""
    n_b, c = feat.shape[:2]
    n_loc = int(np.prod(feat.shape[2:]))
    outs = np.zeros_like(feat)
    maps = np.zeros((n_b, n_loc, n_loc), dtype=feat.dtype)
    for n in range(n_b):
        x = feat[n].reshape(c, n_loc)
        f = [w_key @ x[:, i] for i in range(n_loc)]
        g = [w_query @ x[:, j] for j in range(n_loc)]
        hv = [w_value @ x[:, i] for i in range(n_loc)]
        a = np.zeros((n_loc, n_loc))
        for j in range(n_loc):
            logits = np.array([float(f[i] @ g[j]) for i in range(n_loc)])
            e = np.exp(logits - logits.max())
            a[:, j] = e / e.sum()
        o = np.zeros((c, n_loc))
        for j in range(n_loc):
            mix = np.zeros(len(hv[0]))
            for i in range(n_loc):
                mix = mix + a[i, j] * hv[i]
            o[:, j] = w_out @ mix
        outs[n] = o.reshape(feat.shape[1:])
        maps[n] = a
    return outs, maps


def trilinear_point(src, zi, yi, xi):
    """Scalar trilinear interpolation of a (D,H,W) array at one real-valued
    coordinate, with border clamping."""
    d, h, w = src.shape

    def corners(coord, n):
        coord = min(max(coord, 0.0), n - 1)
        i0 = min(int(np.floor(coord)), max(n - 2, 0))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, coord - i0

    d0, d1, fd = corners(zi, d)
    h0, h1, fh = corners(yi, h)
    w0, w1, fw = corners(xi, w)
    acc = 0.0
    for (dd, wd_) in ((d0, 1 - fd), (d1, fd)):
        for (hh, wh_) in ((h0, 1 - fh), (h1, fh)):
            for (ww, ww_) in ((w0, 1 - fw), (w1, fw)):
                acc += wd_ * wh_ * ww_ * src[dd, hh, ww]
    return acc


def trilinear_oracle(src, target):
    """Per-voxel resampling of a (D,H,W) array via the scalar formula."""
    td, th, tw = target
    sd, sh, sw = src.shape
    out = np.zeros((td, th, tw), dtype=np.float64)
    for z in range(td):
        for y in range(th):
            for x in range(tw):
                zi = (z + 0.5) * sd / td - 0.5
                yi = (y + 0.5) * sh / th - 0.5
                xi = (x + 0.5) * sw / tw - 0.5
                out[z, y, x] = trilinear_point(src.astype(np.float64), zi, yi, xi)
    return out


def cam_oracle(acts, grads):
    """Channel-weighted activation map with explicit loops: average the
    gradient per channel, weight the activations, sum channels, clamp."""
    c, d, h, w = acts.shape
    z = d * h * w
    weights = np.zeros(c)
    for k in range(c):
        s = 0.0
        for zz in range(d):
            for yy in range(h):
                for xx in range(w):
                    s += grads[k, zz, yy, xx]
        weights[k] = s / z
    heat = np.zeros((d, h, w))
    for zz in range(d):
        for yy in range(h):
            for xx in range(w):
                v = 0.0
                for k in range(c):
                    v += weights[k] * acts[k, zz, yy, xx]
                heat[zz, yy, xx] = max(v, 0.0)
    return weights, heat
