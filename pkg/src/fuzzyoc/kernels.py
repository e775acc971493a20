"""Hot numeric kernels with numba and pure-numpy twins.

Every kernel exists twice: ``_<name>_nb`` compiled with ``@njit`` and
``_<name>_np`` written with vectorized numpy. The public name is bound to one
of them at import time according to :data:`fuzzyoc._accel.NUMBA_ENABLED`.
Both twins must agree to floating rounding; ``tests/test_kernels.py`` checks
that and ``benchmarks/bench_kernels.py`` times them against each other.

Loss kernels work on float64 row batches of probability vectors and return
the value together with the analytic gradient with respect to the inputs.
Image kernels work on float32 ``(n, H, W, C)`` batches.
"""

import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

__all__ = [
    "BACKEND",
    "ce_rows",
    "ce_inverse_rows",
    "joint_mi",
    "mi_from_joint",
    "contingency",
    "augment_batch",
    "sobel_batch",
    "implementations",
]


# ---------------------------------------------------------------------------
# cross-entropy


@njit
def _ce_rows_nb(pred, target, eps):
    n, k = pred.shape
    loss = np.zeros(n)
    grad = np.zeros((n, k))
    for i in range(n):
        s = 0.0
        for c in range(k):
            t = target[i, c]
            if t == 0.0:
                continue
            p = pred[i, c]
            if p > eps:
                s -= t * math.log(p)
                grad[i, c] = -t / p
            else:
                s -= t * math.log(eps)
        loss[i] = s
    return loss, grad


def _ce_rows_np(pred, target, eps):
    clamped = np.maximum(pred, eps)
    nz = target != 0.0
    loss = -np.sum(np.where(nz, target * np.log(clamped), 0.0), axis=1)
    grad = np.where(nz & (pred > eps), -target / clamped, 0.0)
    return loss, grad


# ---------------------------------------------------------------------------
# inverse cross-entropy: -sum_c p(c) ln(1 - q(c))


@njit
def _ce_inverse_rows_nb(p, q, eps):
    n, k = p.shape
    loss = np.zeros(n)
    gp = np.zeros((n, k))
    gq = np.zeros((n, k))
    log_eps = math.log(eps)
    for i in range(n):
        s = 0.0
        for c in range(k):
            m = 1.0 - q[i, c]
            if m > eps:
                lm = math.log(m)
                gq[i, c] = p[i, c] / m
            else:
                lm = log_eps
            gp[i, c] = -lm
            if p[i, c] != 0.0:
                s -= p[i, c] * lm
        loss[i] = s
    return loss, gp, gq


def _ce_inverse_rows_np(p, q, eps):
    m = 1.0 - q
    open_ = m > eps
    lm = np.log(np.where(open_, m, eps))
    loss = -np.sum(np.where(p != 0.0, p * lm, 0.0), axis=1)
    gp = -lm
    gq = np.where(open_, p / np.where(open_, m, 1.0), 0.0)
    return loss, gp, gq


# ---------------------------------------------------------------------------
# joint matrix + mutual information


@njit
def _mi_from_joint_nb(P, eps):
    k = P.shape[0]
    row = np.zeros(k)
    col = np.zeros(k)
    for a in range(k):
        for b in range(k):
            row[a] += P[a, b]
            col[b] += P[a, b]
    lrow = np.empty(k)
    lcol = np.empty(k)
    for a in range(k):
        lrow[a] = math.log(max(row[a], eps))
        lcol[a] = math.log(max(col[a], eps))
    mi = 0.0
    G = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            lp = math.log(max(P[a, b], eps))
            g = lp - lrow[a] - lcol[b]
            if P[a, b] > 0.0:
                mi += P[a, b] * g
            G[a, b] = g - 1.0
    return max(mi, 0.0), G


def _mi_from_joint_np(P, eps):
    row = P.sum(axis=1)
    col = P.sum(axis=0)
    g = (np.log(np.maximum(P, eps))
         - np.log(np.maximum(row, eps))[:, None]
         - np.log(np.maximum(col, eps))[None, :])
    mi = float(np.sum(np.where(P > 0.0, P * g, 0.0)))
    return max(mi, 0.0), g - 1.0


@njit
def _joint_mi_nb(u, v, eps):
    n, k = u.shape
    Q = np.zeros((k, k))
    for i in range(n):
        for a in range(k):
            ua = u[i, a]
            if ua == 0.0:
                continue
            for b in range(k):
                Q[a, b] += ua * v[i, b]
    P = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            P[a, b] = 0.5 * (Q[a, b] + Q[b, a]) / n
    mi, G = _mi_from_joint_nb(P, eps)
    # dI/dQ = (G + G^T) / 2; G is symmetric because P is
    gu = np.zeros((n, k))
    gv = np.zeros((n, k))
    for i in range(n):
        for a in range(k):
            su = 0.0
            sv = 0.0
            for b in range(k):
                su += G[a, b] * v[i, b]
                sv += G[b, a] * u[i, b]
            gu[i, a] = su / n
            gv[i, a] = sv / n
    return mi, P, gu, gv


def _joint_mi_np(u, v, eps):
    n = u.shape[0]
    Q = u.T @ v / n
    P = 0.5 * (Q + Q.T)
    mi, G = _mi_from_joint_np(P, eps)
    return mi, P, v @ G.T / n, u @ G / n


# ---------------------------------------------------------------------------
# cluster/class contingency counts


@njit
def _contingency_nb(assign, truths, k, kgt):
    out = np.zeros((k, kgt), dtype=np.int64)
    for i in range(assign.shape[0]):
        out[assign[i], truths[i]] += 1
    return out


def _contingency_np(assign, truths, k, kgt):
    flat = np.bincount(assign * kgt + truths, minlength=k * kgt)
    return flat.reshape(k, kgt).astype(np.int64)


# ---------------------------------------------------------------------------
# augmentation: square crop-and-resize (bilinear), flip, brightness, hue


@njit
def _rgb_hue_shift_nb(r, g, b, shift):
    mx = max(r, max(g, b))
    mn = min(r, min(g, b))
    d = mx - mn
    if d <= 0.0:
        return r, g, b
    if mx == r:
        h = ((g - b) / d) % 6.0
    elif mx == g:
        h = (b - r) / d + 2.0
    else:
        h = (r - g) / d + 4.0
    h = (h + shift / 60.0) % 6.0
    s = d / mx
    c = mx * s
    x = c * (1.0 - abs(h % 2.0 - 1.0))
    m = mx - c
    if h < 1.0:
        return c + m, x + m, m
    if h < 2.0:
        return x + m, c + m, m
    if h < 3.0:
        return m, c + m, x + m
    if h < 4.0:
        return m, x + m, c + m
    if h < 5.0:
        return x + m, m, c + m
    return c + m, m, x + m


@njit
def _augment_batch_nb(images, crop, flip, brightness, hue):
    n, H, W, C = images.shape
    out = np.empty_like(images)
    for s in range(n):
        top = crop[s, 0]
        left = crop[s, 1]
        scale = crop[s, 2]
        for i in range(H):
            y = top + (i + 0.5) * scale - 0.5
            y = min(max(y, 0.0), H - 1.0)
            y0 = int(math.floor(y))
            y1 = min(y0 + 1, H - 1)
            wy = y - y0
            for j in range(W):
                jj = W - 1 - j if flip[s] else j
                x = left + (jj + 0.5) * scale - 0.5
                x = min(max(x, 0.0), W - 1.0)
                x0 = int(math.floor(x))
                x1 = min(x0 + 1, W - 1)
                wx = x - x0
                for c in range(C):
                    v = ((1.0 - wy) * ((1.0 - wx) * images[s, y0, x0, c] + wx * images[s, y0, x1, c])
                         + wy * ((1.0 - wx) * images[s, y1, x0, c] + wx * images[s, y1, x1, c]))
                    out[s, i, j, c] = v
                if C == 3 and hue[s] != 0.0:
                    r, g, b = _rgb_hue_shift_nb(out[s, i, j, 0], out[s, i, j, 1],
                                                out[s, i, j, 2], hue[s])
                    out[s, i, j, 0] = r
                    out[s, i, j, 1] = g
                    out[s, i, j, 2] = b
                if brightness[s] != 1.0:
                    for c in range(C):
                        out[s, i, j, c] = min(max(out[s, i, j, c] * brightness[s], 0.0), 1.0)
    return out


def _hue_shift_np(rgb, shift):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = (h + shift[:, None, None] / 60.0) % 6.0
    c = d
    x = c * (1.0 - np.abs(h % 2.0 - 1.0))
    m = mn
    z = np.zeros_like(c)
    sector = np.floor(h).astype(np.int64)
    sector = np.clip(sector, 0, 5)
    choices_r = np.stack([c, x, z, z, x, c], axis=0)
    choices_g = np.stack([x, c, c, x, z, z], axis=0)
    choices_b = np.stack([z, z, x, c, c, x], axis=0)
    idx = sector[None]
    out = np.stack([np.take_along_axis(choices_r, idx, 0)[0] + m,
                    np.take_along_axis(choices_g, idx, 0)[0] + m,
                    np.take_along_axis(choices_b, idx, 0)[0] + m], axis=-1)
    keep = (d <= 0)[..., None] | (shift == 0.0)[:, None, None, None]
    return np.where(keep, rgb, out).astype(rgb.dtype)


def _augment_batch_np(images, crop, flip, brightness, hue):
    n, H, W, C = images.shape
    rows = np.arange(H)[None, :]
    cols = np.arange(W)[None, :]
    cols = np.where(flip[:, None], W - 1 - cols, cols)
    ys = np.clip(crop[:, :1] + (rows + 0.5) * crop[:, 2:3] - 0.5, 0.0, H - 1.0)
    xs = np.clip(crop[:, 1:2] + (cols + 0.5) * crop[:, 2:3] - 0.5, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    bi = np.arange(n)[:, None, None]

    def gather(yy, xx):
        return images[bi, yy[:, :, None], xx[:, None, :]]

    out = ((1.0 - wy) * ((1.0 - wx) * gather(y0, x0) + wx * gather(y0, x1))
           + wy * ((1.0 - wx) * gather(y1, x0) + wx * gather(y1, x1)))
    out = out.astype(images.dtype)
    if C == 3 and np.any(hue != 0.0):
        out = _hue_shift_np(out, hue)
    scaled = np.clip(out * brightness[:, None, None, None], 0.0, 1.0)
    out = np.where((brightness == 1.0)[:, None, None, None], out, scaled)
    return out.astype(images.dtype)


# ---------------------------------------------------------------------------
# sobel on the channel-mean grayscale, replicate padding


@njit
def _sobel_batch_nb(images):
    n, H, W, C = images.shape
    out = np.zeros((n, H, W, 2), dtype=images.dtype)
    gray = np.empty((H, W), dtype=images.dtype)
    for s in range(n):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for c in range(C):
                    acc += images[s, i, j, c]
                gray[i, j] = acc / C
        for i in range(H):
            im = max(i - 1, 0)
            ip = min(i + 1, H - 1)
            for j in range(W):
                jm = max(j - 1, 0)
                jp = min(j + 1, W - 1)
                gx = (gray[im, jp] + 2.0 * gray[i, jp] + gray[ip, jp]
                      - gray[im, jm] - 2.0 * gray[i, jm] - gray[ip, jm])
                gy = (gray[ip, jm] + 2.0 * gray[ip, j] + gray[ip, jp]
                      - gray[im, jm] - 2.0 * gray[im, j] - gray[im, jp])
                out[s, i, j, 0] = gx
                out[s, i, j, 1] = gy
    return out


def _sobel_batch_np(images):
    gray = images.mean(axis=-1)
    g = np.pad(gray, ((0, 0), (1, 1), (1, 1)), mode="edge")
    tl, tc, tr = g[:, :-2, :-2], g[:, :-2, 1:-1], g[:, :-2, 2:]
    ml, mr = g[:, 1:-1, :-2], g[:, 1:-1, 2:]
    bl, bc, br = g[:, 2:, :-2], g[:, 2:, 1:-1], g[:, 2:, 2:]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    return np.stack([gx, gy], axis=-1).astype(images.dtype)


# ---------------------------------------------------------------------------
# dispatch

_KERNELS = {
    "ce_rows": (_ce_rows_nb, _ce_rows_np),
    "ce_inverse_rows": (_ce_inverse_rows_nb, _ce_inverse_rows_np),
    "mi_from_joint": (_mi_from_joint_nb, _mi_from_joint_np),
    "joint_mi": (_joint_mi_nb, _joint_mi_np),
    "contingency": (_contingency_nb, _contingency_np),
    "augment_batch": (_augment_batch_nb, _augment_batch_np),
    "sobel_batch": (_sobel_batch_nb, _sobel_batch_np),
}

BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def implementations(name):
    """Return ``{"numba": f, "numpy": g}`` for kernel ``name``."""
    nb, np_ = _KERNELS[name]
    return {"numba": nb, "numpy": np_}


def _pick(name):
    nb, np_ = _KERNELS[name]
    return nb if NUMBA_ENABLED else np_


ce_rows = _pick("ce_rows")
ce_inverse_rows = _pick("ce_inverse_rows")
mi_from_joint = _pick("mi_from_joint")
joint_mi = _pick("joint_mi")
contingency = _pick("contingency")
augment_batch = _pick("augment_batch")
sobel_batch = _pick("sobel_batch")
