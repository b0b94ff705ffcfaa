"""Hot numeric kernels, each in a numba flavour and a numpy flavour.

The public names (``conv2d_forward``, ``cd_solve``, ...) dispatch on
``filtermend._jit.USE_JIT``.  Both flavours are importable directly so tests
and the benchmark can compare them side by side.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_JIT, njit

# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@njit
def _im2col_nb(x, kh, kw, stride):
    n_img, n_ch, h, wd = x.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    cols = np.empty((n_img * ho * wo, n_ch * kh * kw))
    row = 0
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                k = 0
                for c in range(n_ch):
                    for u in range(kh):
                        for v in range(kw):
                            cols[row, k] = x[n, c, i * stride + u, j * stride + v]
                            k += 1
                row += 1
    return cols


@njit
def conv2d_forward_nb(x, w, b, stride):
    n_img, _, h, wd = x.shape
    n_f, n_ch, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    cols = _im2col_nb(x, kh, kw, stride)
    flat = np.dot(cols, np.ascontiguousarray(w.reshape(n_f, n_ch * kh * kw).T))
    out = np.empty((n_img, n_f, ho, wo))
    row = 0
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for f in range(n_f):
                    out[n, f, i, j] = flat[row, f] + b[f]
                row += 1
    return out


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_np(x, w, b, stride):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride)  # (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


@njit
def conv2d_backward_nb(x, w, dout, stride):
    n_img, _, h, wd = x.shape
    n_f, n_ch, kh, kw = w.shape
    ho = dout.shape[2]
    wo = dout.shape[3]
    g = np.empty((n_img * ho * wo, n_f))
    row = 0
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for f in range(n_f):
                    g[row, f] = dout[n, f, i, j]
                row += 1
    cols = _im2col_nb(x, kh, kw, stride)
    dw = np.dot(g.T, cols).reshape(n_f, n_ch, kh, kw)
    db = np.zeros(n_f)
    for r in range(g.shape[0]):
        for f in range(n_f):
            db[f] += g[r, f]
    dcols = np.dot(g, np.ascontiguousarray(w.reshape(n_f, n_ch * kh * kw)))
    dx = np.zeros_like(x)
    row = 0
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                k = 0
                for c in range(n_ch):
                    for u in range(kh):
                        for v in range(kw):
                            dx[n, c, i * stride + u, j * stride + v] += dcols[row, k]
                            k += 1
                row += 1
    return dx, dw, db


def conv2d_backward_np(x, w, dout, stride):
    kh, kw = w.shape[2:]
    ho, wo = dout.shape[2:]
    win = _windows(x, kh, kw, stride)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(dout, w[:, :, u, v], axes=([1], [0]))  # (N, Ho, Wo, C)
            dx[:, :, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return dx, np.ascontiguousarray(dw), db


# ---------------------------------------------------------------------------
# 2x2 max pooling (floor mode); ties resolve to the first element in
# row-major window order in both flavours
# ---------------------------------------------------------------------------


@njit
def maxpool2_forward_nb(x):
    n_img, n_ch, h, wd = x.shape
    ho = h // 2
    wo = wd // 2
    out = np.empty((n_img, n_ch, ho, wo))
    arg = np.empty((n_img, n_ch, ho, wo), dtype=np.int8)
    for n in range(n_img):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, 2 * i, 2 * j]
                    k_best = 0
                    for k in range(1, 4):
                        val = x[n, c, 2 * i + k // 2, 2 * j + k % 2]
                        if val > best:
                            best = val
                            k_best = k
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = k_best
    return out, arg


def maxpool2_forward_np(x):
    n_img, n_ch, h, wd = x.shape
    ho, wo = h // 2, wd // 2
    blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n_img, n_ch, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n_img, n_ch, ho, wo, 4)
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


@njit
def maxpool2_backward_nb(dout, arg, in_shape):
    dx = np.zeros(in_shape)
    n_img, n_ch, ho, wo = dout.shape
    for n in range(n_img):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    k = arg[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dout[n, c, i, j]
    return dx


def maxpool2_backward_np(dout, arg, in_shape):
    n_img, n_ch, ho, wo = dout.shape
    blocks = np.zeros((n_img, n_ch, ho, wo, 4))
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    blocks = blocks.reshape(n_img, n_ch, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, : 2 * ho, : 2 * wo] = blocks.reshape(n_img, n_ch, 2 * ho, 2 * wo)
    return dx


# ---------------------------------------------------------------------------
# histogram counts with clamping into the extreme bins
# ---------------------------------------------------------------------------


@njit
def bin_counts_nb(values, edges):
    n_bins = edges.shape[0] - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    for v in values:
        k = np.searchsorted(edges, v, side="right") - 1
        if k < 0:
            k = 0
        elif k > n_bins - 1:
            k = n_bins - 1
        counts[k] += 1
    return counts


def bin_counts_np(values, edges):
    n_bins = edges.shape[0] - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    np.clip(idx, 0, n_bins - 1, out=idx)
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


# ---------------------------------------------------------------------------
# covariance-form coordinate descent for
#     yy - 2 c.b + b.G.b + lam * sum_j w_j |b_j|
# (the squared-error sum expanded through the Gram matrix of centered,
# standardized predictors)
# ---------------------------------------------------------------------------


@njit
def cd_solve_nb(gram, c, w, lam, beta, yy, max_sweeps, tol, kkt_tol):
    p = c.shape[0]
    beta = beta.copy()
    gb = gram @ beta
    hist = np.empty(max_sweeps)
    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            z = c[j] - gb[j] + gjj * beta[j]
            gamma = 0.5 * lam * w[j]
            if z > gamma:
                new = (z - gamma) / gjj
            elif z < -gamma:
                new = (z + gamma) / gjj
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    gb[k] += d * gram[k, j]
                if abs(d) > max_delta:
                    max_delta = abs(d)
        obj = yy
        for j in range(p):
            obj += beta[j] * (gb[j] - 2.0 * c[j]) + lam * w[j] * abs(beta[j])
        hist[sweep] = obj
        sweeps = sweep + 1
        if max_delta <= tol:
            ok = True
            for j in range(p):
                g2 = 2.0 * (c[j] - gb[j])
                if beta[j] == 0.0:
                    if abs(g2) > lam * w[j] + kkt_tol:
                        ok = False
                        break
                else:
                    s = 1.0 if beta[j] > 0.0 else -1.0
                    if abs(g2 - lam * w[j] * s) > kkt_tol:
                        ok = False
                        break
            if ok:
                converged = True
                break
    return beta, sweeps, converged, hist[:sweeps]


def cd_solve_np(gram, c, w, lam, beta, yy, max_sweeps, tol, kkt_tol):
    p = c.shape[0]
    beta = beta.astype(np.float64).copy()
    gb = gram @ beta
    diag = np.diag(gram).copy()
    gamma = 0.5 * lam * w
    hist = []
    converged = False
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            z = c[j] - gb[j] + gjj * beta[j]
            new = np.sign(z) * max(abs(z) - gamma[j], 0.0) / gjj
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                gb += d * gram[:, j]
                max_delta = max(max_delta, abs(d))
        hist.append(yy + beta @ (gb - 2.0 * c) + lam * np.sum(w * np.abs(beta)))
        if max_delta <= tol:
            g2 = 2.0 * (c - gb)
            zero = beta == 0.0
            ok_zero = np.all(np.abs(g2[zero]) <= lam * w[zero] + kkt_tol)
            ok_act = np.all(np.abs(g2[~zero] - lam * w[~zero] * np.sign(beta[~zero])) <= kkt_tol)
            if ok_zero and ok_act:
                converged = True
                break
    return beta, len(hist), converged, np.array(hist)


if USE_JIT:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward = conv2d_backward_nb
    maxpool2_forward = maxpool2_forward_nb
    maxpool2_backward = maxpool2_backward_nb
    bin_counts = bin_counts_nb
    cd_solve = cd_solve_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward = conv2d_backward_np
    maxpool2_forward = maxpool2_forward_np
    maxpool2_backward = maxpool2_backward_np
    bin_counts = bin_counts_np
    cd_solve = cd_solve_np
