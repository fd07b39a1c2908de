"""Hot numeric kernels, in numba and pure-numpy variants.

Every kernel exists as ``<name>_np`` (vectorized numpy) and, when numba is
importable, ``<name>_nb`` (jitted loops). The public name binds to the
variant chosen by :mod:`volreport.backend`; ``benchmarks/bench_kernels.py``
times both. Elementwise kernels agree bitwise across variants; kernels with
row reductions agree to rounding error only.
"""

import math

import numpy as np

from . import backend

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy variants


def softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad_np(y, gy):
    s = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - s)


def log_softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_rows_grad_np(out, gy):
    s = gy.sum(axis=1, keepdims=True)
    return gy - np.exp(out) * s


def layer_norm_rows_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv[:, 0].copy()


def layer_norm_rows_grad_np(xhat, inv, gain, gy):
    a = gy * gain
    m1 = a.mean(axis=1, keepdims=True)
    m2 = (a * xhat).mean(axis=1, keepdims=True)
    gx = inv[:, None] * (a - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def gelu_np(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad_np(x, gy):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
    return gy * dydx


def scatter_add_rows_np(acc, ids, g):
    np.add.at(acc, ids, g)


def adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / c1
    vhat = v / c2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


def resample_trilinear_np(src, out_shape, scales, offsets):
    dt, ht, wt = out_shape
    zc = np.arange(dt) * scales[0] + offsets[0]
    yc = np.arange(ht) * scales[1] + offsets[1]
    xc = np.arange(wt) * scales[2] + offsets[2]
    z0 = np.minimum(np.floor(zc).astype(np.int64), src.shape[0] - 1)
    y0 = np.minimum(np.floor(yc).astype(np.int64), src.shape[1] - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), src.shape[2] - 1)
    z1 = np.minimum(z0 + 1, src.shape[0] - 1)
    y1 = np.minimum(y0 + 1, src.shape[1] - 1)
    x1 = np.minimum(x0 + 1, src.shape[2] - 1)
    fz = (zc - z0).reshape(-1, 1, 1)
    fy = (yc - y0).reshape(1, -1, 1)
    fx = (xc - x0).reshape(1, 1, -1)
    z0 = z0.reshape(-1, 1, 1)
    z1 = z1.reshape(-1, 1, 1)
    y0 = y0.reshape(1, -1, 1)
    y1 = y1.reshape(1, -1, 1)
    x0 = x0.reshape(1, 1, -1)
    x1 = x1.reshape(1, 1, -1)
    c000 = src[z0, y0, x0]
    c001 = src[z0, y0, x1]
    c010 = src[z0, y1, x0]
    c011 = src[z0, y1, x1]
    c100 = src[z1, y0, x0]
    c101 = src[z1, y0, x1]
    c110 = src[z1, y1, x0]
    c111 = src[z1, y1, x1]
    out = (
        c000 * (1 - fz) * (1 - fy) * (1 - fx)
        + c001 * (1 - fz) * (1 - fy) * fx
        + c010 * (1 - fz) * fy * (1 - fx)
        + c011 * (1 - fz) * fy * fx
        + c100 * fz * (1 - fy) * (1 - fx)
        + c101 * fz * (1 - fy) * fx
        + c110 * fz * fy * (1 - fx)
        + c111 * fz * fy * fx
    )
    return out.astype(src.dtype, copy=False)


def lcs_length_np(a, b):
    # Inner dependency is sequential; plain DP rows, fine at report lengths.
    n = b.shape[0]
    prev = np.zeros(n + 1, dtype=np.int64)
    cur = np.zeros(n + 1, dtype=np.int64)
    for i in range(a.shape[0]):
        ai = a[i]
        for j in range(n):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev, cur = cur, prev
    return int(prev[n])


# ---------------------------------------------------------------------------
# numba variants

if backend.NUMBA_AVAILABLE:
    _jit = backend.njit(cache=True)

    @_jit
    def softmax_rows_nb(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            m = x[i, 0]
            for j in range(1, x.shape[1]):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(x.shape[1]):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(x.shape[1]):
                out[i, j] /= s
        return out

    @_jit
    def softmax_rows_grad_nb(y, gy):
        gx = np.empty_like(y)
        for i in range(y.shape[0]):
            s = 0.0
            for j in range(y.shape[1]):
                s += gy[i, j] * y[i, j]
            for j in range(y.shape[1]):
                gx[i, j] = y[i, j] * (gy[i, j] - s)
        return gx

    @_jit
    def log_softmax_rows_nb(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            m = x[i, 0]
            for j in range(1, x.shape[1]):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(x.shape[1]):
                s += np.exp(x[i, j] - m)
            lse = m + np.log(s)
            for j in range(x.shape[1]):
                out[i, j] = x[i, j] - lse
        return out

    @_jit
    def log_softmax_rows_grad_nb(out, gy):
        gx = np.empty_like(out)
        for i in range(out.shape[0]):
            s = 0.0
            for j in range(out.shape[1]):
                s += gy[i, j]
            for j in range(out.shape[1]):
                gx[i, j] = gy[i, j] - np.exp(out[i, j]) * s
        return gx

    @_jit
    def layer_norm_rows_nb(x, gain, bias, eps):
        m, n = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(m, dtype=x.dtype)
        for i in range(m):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            var /= n
            iv = 1.0 / np.sqrt(var + eps)
            inv[i] = iv
            for j in range(n):
                h = (x[i, j] - mu) * iv
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, inv

    @_jit
    def layer_norm_rows_grad_nb(xhat, inv, gain, gy):
        m, n = xhat.shape
        gx = np.empty_like(xhat)
        ggain = np.zeros(n, dtype=xhat.dtype)
        gbias = np.zeros(n, dtype=xhat.dtype)
        for i in range(m):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                a = gy[i, j] * gain[j]
                m1 += a
                m2 += a * xhat[i, j]
            m1 /= n
            m2 /= n
            for j in range(n):
                a = gy[i, j] * gain[j]
                gx[i, j] = inv[i] * (a - m1 - xhat[i, j] * m2)
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
        return gx, ggain, gbias

    @_jit
    def gelu_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            v = flat[i]
            inner = _GELU_C * (v + _GELU_A * v * v * v)
            out[i] = 0.5 * v * (1.0 + np.tanh(inner))
        return out.reshape(x.shape)

    @_jit
    def gelu_grad_nb(x, gy):
        xf = x.ravel()
        gf = gy.ravel()
        out = np.empty_like(xf)
        for i in range(xf.shape[0]):
            v = xf[i]
            inner = _GELU_C * (v + _GELU_A * v * v * v)
            t = np.tanh(inner)
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner)
        return out.reshape(x.shape)

    @_jit
    def scatter_add_rows_nb(acc, ids, g):
        for i in range(ids.shape[0]):
            r = ids[i]
            for j in range(g.shape[1]):
                acc[r, j] += g[i, j]

    @_jit
    def adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
        for i in range(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / c1
            vhat = v[i] / c2
            p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p[i])

    @_jit
    def resample_trilinear_nb(src, out_shape, scales, offsets):
        d, h, w = src.shape
        dt, ht, wt = out_shape
        out = np.empty((dt, ht, wt), dtype=src.dtype)
        for z in range(dt):
            zc = z * scales[0] + offsets[0]
            z0 = int(np.floor(zc))
            if z0 > d - 1:
                z0 = d - 1
            z1 = min(z0 + 1, d - 1)
            fz = zc - z0
            for y in range(ht):
                yc = y * scales[1] + offsets[1]
                y0 = int(np.floor(yc))
                if y0 > h - 1:
                    y0 = h - 1
                y1 = min(y0 + 1, h - 1)
                fy = yc - y0
                for x in range(wt):
                    xc = x * scales[2] + offsets[2]
                    x0 = int(np.floor(xc))
                    if x0 > w - 1:
                        x0 = w - 1
                    x1 = min(x0 + 1, w - 1)
                    fx = xc - x0
                    v = (
                        src[z0, y0, x0] * (1 - fz) * (1 - fy) * (1 - fx)
                        + src[z0, y0, x1] * (1 - fz) * (1 - fy) * fx
                        + src[z0, y1, x0] * (1 - fz) * fy * (1 - fx)
                        + src[z0, y1, x1] * (1 - fz) * fy * fx
                        + src[z1, y0, x0] * fz * (1 - fy) * (1 - fx)
                        + src[z1, y0, x1] * fz * (1 - fy) * fx
                        + src[z1, y1, x0] * fz * fy * (1 - fx)
                        + src[z1, y1, x1] * fz * fy * fx
                    )
                    out[z, y, x] = v
        return out

    @_jit
    def lcs_length_nb(a, b):
        n = b.shape[0]
        prev = np.zeros(n + 1, dtype=np.int64)
        cur = np.zeros(n + 1, dtype=np.int64)
        for i in range(a.shape[0]):
            ai = a[i]
            for j in range(n):
                if ai == b[j]:
                    cur[j + 1] = prev[j] + 1
                else:
                    cur[j + 1] = max(prev[j + 1], cur[j])
            tmp = prev
            prev = cur
            cur = tmp
        return prev[n]

else:
    softmax_rows_nb = None
    softmax_rows_grad_nb = None
    log_softmax_rows_nb = None
    log_softmax_rows_grad_nb = None
    layer_norm_rows_nb = None
    layer_norm_rows_grad_nb = None
    gelu_nb = None
    gelu_grad_nb = None
    scatter_add_rows_nb = None
    adamw_update_nb = None
    resample_trilinear_nb = None
    lcs_length_nb = None


# ---------------------------------------------------------------------------
# public bindings

if backend.USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_grad = softmax_rows_grad_nb
    log_softmax_rows = log_softmax_rows_nb
    log_softmax_rows_grad = log_softmax_rows_grad_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_rows_grad = layer_norm_rows_grad_nb
    gelu = gelu_nb
    gelu_grad = gelu_grad_nb
    scatter_add_rows = scatter_add_rows_nb
    adamw_update = adamw_update_nb
    resample_trilinear = resample_trilinear_nb

    def lcs_length(a, b):
        return int(lcs_length_nb(a, b))

else:
    softmax_rows = softmax_rows_np
    softmax_rows_grad = softmax_rows_grad_np
    log_softmax_rows = log_softmax_rows_np
    log_softmax_rows_grad = log_softmax_rows_grad_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_grad = layer_norm_rows_grad_np
    gelu = gelu_np
    gelu_grad = gelu_grad_np
    scatter_add_rows = scatter_add_rows_np
    adamw_update = adamw_update_np
    resample_trilinear = resample_trilinear_np
    lcs_length = lcs_length_np
