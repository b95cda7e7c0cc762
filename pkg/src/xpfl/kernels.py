"""Hot inner loops, each in two flavours.

``*_numpy`` functions are vectorised numpy; ``*_loops`` are explicit loops
compiled by numba. The public names dispatch on :data:`xpfl._jit.USE_NUMBA`.
Both flavours agree to rounding error (see tests/test_kernels.py) but are
not guaranteed bit-identical to each other, so reproducibility holds per
backend.
"""

import numpy as np

from . import _jit


# ---------------------------------------------------------------------------
# im2col / col2im for stride-1 convolution


def im2col_numpy(x, kh, kw, pad):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * kh * kw)


def col2im_numpy(cols, x_shape, kh, kw, pad):
    B, C, H, W = x_shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    g = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + Ho, j:j + Wo] += g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + H, pad:pad + W]


def _im2col_loops(x, kh, kw, pad):
    B, C, H, W = x.shape
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    out = np.zeros((B, Ho * Wo, C * kh * kw))
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                p = oy * Wo + ox
                for c in range(C):
                    for i in range(kh):
                        yy = oy + i - pad
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(kw):
                            xx = ox + j - pad
                            if xx < 0 or xx >= W:
                                continue
                            out[b, p, (c * kh + i) * kw + j] = x[b, c, yy, xx]
    return out


def _col2im_loops(cols, B, C, H, W, kh, kw, pad):
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                p = oy * Wo + ox
                for c in range(C):
                    for i in range(kh):
                        yy = oy + i - pad
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(kw):
                            xx = ox + j - pad
                            if xx < 0 or xx >= W:
                                continue
                            out[b, c, yy, xx] += cols[b, p, (c * kh + i) * kw + j]
    return out


_im2col_jit = _jit.njit(_im2col_loops)
_col2im_jit = _jit.njit(_col2im_loops)


def im2col_numba(x, kh, kw, pad):
    return _im2col_jit(np.ascontiguousarray(x), kh, kw, pad)


def col2im_numba(cols, x_shape, kh, kw, pad):
    B, C, H, W = x_shape
    return _col2im_jit(np.ascontiguousarray(cols), B, C, H, W, kh, kw, pad)


# ---------------------------------------------------------------------------
# t-SNE: perplexity calibration


def _perplexity_loops(D2, perp, tol, max_iter):
    n = D2.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.empty(n - 1)
        k = 0
        for j in range(n):
            if j != i:
                d[k] = D2[i, j]
                k += 1
        # shifting by the row minimum leaves the normalised row unchanged
        d = d - d.min()
        beta = 1.0
        lo = 0.0
        hi = np.inf
        p = np.empty(n - 1)
        beta_p = beta
        for _ in range(max_iter):
            e = np.exp(-d * beta)
            s = e.sum()
            h = np.log(s) + beta * np.sum(d * e) / s
            p = e / s
            beta_p = beta
            diff = np.exp(h) - perp
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        betas[i] = beta_p
        k = 0
        for j in range(n):
            if j != i:
                P[i, j] = p[k]
                k += 1
    return P, betas


def perplexity_numpy(D2, perp, tol, max_iter):
    n = D2.shape[0]
    off = ~np.eye(n, dtype=bool)
    d = D2[off].reshape(n, n - 1)
    d = d - d.min(axis=1, keepdims=True)
    beta = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    done = np.zeros(n, dtype=bool)
    p = np.empty_like(d)
    beta_p = beta.copy()
    for _ in range(max_iter):
        e = np.exp(-d * beta[:, None])
        s = e.sum(axis=1)
        h = np.log(s) + beta * np.sum(d * e, axis=1) / s
        cur = e / s[:, None]
        p[~done] = cur[~done]
        beta_p[~done] = beta[~done]
        diff = np.exp(h) - perp
        done |= np.abs(diff) < tol
        if done.all():
            break
        up = (diff > 0) & ~done
        down = (diff <= 0) & ~done
        lo[up] = beta[up]
        beta_up = np.where(np.isinf(hi), beta * 2.0, 0.5 * (beta + hi))
        hi[down] = beta[down]
        beta_down = 0.5 * (beta + lo)
        beta = np.where(up, beta_up, np.where(down, beta_down, beta))
    P = np.zeros((n, n))
    P[off] = p.ravel()
    return P, beta_p


_perplexity_jit = _jit.njit(_perplexity_loops)


def perplexity_numba(D2, perp, tol, max_iter):
    return _perplexity_jit(np.ascontiguousarray(D2), float(perp), float(tol), int(max_iter))


# ---------------------------------------------------------------------------
# t-SNE: Student-t affinities, KL and its gradient


def tsne_grad_numpy(Y, P, exaggeration):
    diff = Y[:, None, :] - Y[None, :, :]
    D2 = np.sum(diff * diff, axis=-1)
    num = 1.0 / (1.0 + D2)
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (exaggeration * P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-12))))
    return grad, Q, kl


def _tsne_grad_loops(Y, P, exaggeration):
    n, dim = Y.shape
    num = np.zeros((n, n))
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d = 0.0
            for k in range(dim):
                t = Y[i, k] - Y[j, k]
                d += t * t
            v = 1.0 / (1.0 + d)
            num[i, j] = v
            num[j, i] = v
            total += 2.0 * v
    Q = num / total
    grad = np.zeros((n, dim))
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            w = (exaggeration * P[i, j] - Q[i, j]) * num[i, j]
            for k in range(dim):
                grad[i, k] += 4.0 * w * (Y[i, k] - Y[j, k])
            if P[i, j] > 0:
                kl += P[i, j] * np.log(P[i, j] / max(Q[i, j], 1e-12))
    return grad, Q, kl


_tsne_grad_jit = _jit.njit(_tsne_grad_loops)


def tsne_grad_numba(Y, P, exaggeration):
    g, Q, kl = _tsne_grad_jit(np.ascontiguousarray(Y), np.ascontiguousarray(P), float(exaggeration))
    return g, Q, float(kl)


# ---------------------------------------------------------------------------
# decision tree: best binary threshold per attribute


def _entropy_bits_rows(counts, totals):
    # counts: (..., M); totals: (...)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = counts / totals[..., None]
        lp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(p * lp, axis=-1)


GAIN_EPS = 1e-12


def split_scan_numpy(X, y, n_classes, min_leaf):
    """Per attribute: (threshold, gain, gain ratio) of the max-ratio midpoint split.

    Only splits with positive gain and at least ``min_leaf`` samples a side
    count; attributes without one get gain = ratio = -1.
    """
    n, a = X.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    parent = _entropy_bits_rows(total[None, :], np.array([float(n)]))[0]
    thr = np.zeros(a)
    gains = np.full(a, -1.0)
    ratios = np.full(a, -1.0)
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    for f in range(a):
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = total[None, :] - left
        ok = (v[1:] > v[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not ok.any():
            continue
        el = _entropy_bits_rows(left, nl)
        er = _entropy_bits_rows(right, nr)
        wl, wr = nl / n, nr / n
        gain = parent - (wl * el + wr * er)
        split_ent = -(wl * np.log2(wl) + wr * np.log2(wr))
        ok &= gain > GAIN_EPS
        if not ok.any():
            continue
        ratio = np.where(ok, gain / split_ent, -np.inf)
        i = int(np.argmax(ratio))
        thr[f] = 0.5 * (v[i] + v[i + 1])
        gains[f] = gain[i]
        ratios[f] = ratio[i]
    return thr, gains, ratios


def _ent_bits_py(counts, total):
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * np.log2(p)
    return h


_ent_bits = _jit.njit(_ent_bits_py) or _ent_bits_py


def _split_scan_loops(X, y, n_classes, min_leaf):
    n, a = X.shape
    total = np.zeros(n_classes)
    for i in range(n):
        total[y[i]] += 1.0
    parent = _ent_bits(total, float(n))
    thr = np.zeros(a)
    gains = np.full(a, -1.0)
    ratios = np.full(a, -1.0)
    left = np.zeros(n_classes)
    for f in range(a):
        order = np.argsort(X[:, f], kind="mergesort")
        left[:] = 0.0
        best = -np.inf
        best_i = -1
        best_gain = 0.0
        for i in range(n - 1):
            left[y[order[i]]] += 1.0
            nl = i + 1.0
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            if not X[order[i + 1], f] > X[order[i], f]:
                continue
            wl = nl / n
            wr = nr / n
            gain = parent - (wl * _ent_bits(left, nl) + wr * _ent_bits(total - left, nr))
            if not gain > GAIN_EPS:
                continue
            ratio = gain / -(wl * np.log2(wl) + wr * np.log2(wr))
            if ratio > best:
                best = ratio
                best_i = i
                best_gain = gain
        if best_i >= 0:
            thr[f] = 0.5 * (X[order[best_i], f] + X[order[best_i + 1], f])
            gains[f] = best_gain
            ratios[f] = best
    return thr, gains, ratios


_split_scan_jit = _jit.njit(_split_scan_loops)


def split_scan_numba(X, y, n_classes, min_leaf):
    return _split_scan_jit(np.ascontiguousarray(X, dtype=np.float64),
                           np.ascontiguousarray(y, dtype=np.int64), int(n_classes), int(min_leaf))


# ---------------------------------------------------------------------------
# dispatch

_IMPLS = {
    "im2col": (im2col_numpy, im2col_numba),
    "col2im": (col2im_numpy, col2im_numba),
    "perplexity": (perplexity_numpy, perplexity_numba),
    "tsne_grad": (tsne_grad_numpy, tsne_grad_numba),
    "split_scan": (split_scan_numpy, split_scan_numba),
}


def implementation(name, backend=None):
    """Return the ``numpy`` or ``numba`` flavour of kernel ``name``."""
    backend = backend or _jit.backend()
    np_fn, nb_fn = _IMPLS[name]
    if backend == "numba":
        if not _jit.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return nb_fn
    return np_fn


def im2col(x, kh, kw, pad):
    return implementation("im2col")(x, kh, kw, pad)


def col2im(cols, x_shape, kh, kw, pad):
    return implementation("col2im")(cols, x_shape, kh, kw, pad)


def perplexity_rows(D2, perplexity, tol=1e-5, max_iter=200):
    """Row-conditional Gaussian affinities with 2**H == perplexity (within ``tol``)."""
    return implementation("perplexity")(D2, perplexity, tol, max_iter)


def tsne_grad(Y, P, exaggeration=1.0):
    return implementation("tsne_grad")(Y, P, exaggeration)


def split_scan(X, y, n_classes, min_leaf):
    return implementation("split_scan")(X, y, n_classes, min_leaf)
