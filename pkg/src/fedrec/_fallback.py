"""Pure NumPy implementations of the hot kernels.

Signatures match the compiled ``_kernels`` module one to one; the
dispatcher in :mod:`fedrec.kernels` picks whichever is available.

NeuMF MLP parameters travel as one flat float64 buffer laid out as
``W_1, b_1, ..., W_L, b_L, h`` with every ``W_l`` row-major of shape
``(widths[l-1], widths[l])`` and ``widths[0] == 2 * d``.
"""

from __future__ import annotations

import numpy as np

SGD = 0
ADAM = 1


def flat_size(widths, d: int) -> int:
    widths = list(widths)
    n = sum(widths[k] * widths[k + 1] + widths[k + 1] for k in range(len(widths) - 1))
    return n + d + widths[-1]


def mlp_views(flat: np.ndarray, widths, d: int):
    """Weight, bias and output-vector views into ``flat``."""
    widths = [int(w) for w in widths]
    ws, bs = [], []
    pos = 0
    for k in range(len(widths) - 1):
        n_in, n_out = widths[k], widths[k + 1]
        ws.append(flat[pos : pos + n_in * n_out].reshape(n_in, n_out))
        pos += n_in * n_out
        bs.append(flat[pos : pos + n_out])
        pos += n_out
    h = flat[pos : pos + d + widths[-1]]
    return ws, bs, h


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(pG, qG, pM, qM, ws, bs, h, users, items):
    """Batched NeuMF prediction; returns ``(yhat, cache)``."""
    xg = pG[users] * qG[items]
    z = np.concatenate([pM[users], qM[items]], axis=1)
    zs = [z]
    acts = []
    for w, b in zip(ws, bs):
        a = z @ w + b
        acts.append(a)
        z = np.maximum(a, 0.0)
        zs.append(z)
    phi = np.concatenate([xg, z], axis=1)
    yhat = sigmoid(phi @ h)
    return yhat, (xg, zs, acts, phi)


def backward(pG, qG, pM, qM, ws, bs, h, users, items, labels, weights, scale):
    """Gradient of ``scale * sum(w * (y - yhat)**2)``.

    Returns ``(loss_sum, user_rows, item_rows, g_pG, g_qG, g_pM, g_qM, g_ws, g_bs, g_h)``
    with embedding gradients restricted to the (sorted, unique) rows touched.
    """
    d = pG.shape[1]
    yhat, (xg, zs, acts, phi) = forward(pG, qG, pM, qM, ws, bs, h, users, items)
    resid = labels - yhat
    loss = float(np.sum(weights * resid * resid))
    delta = scale * (-2.0 * weights * resid * yhat * (1.0 - yhat))

    g_h = delta @ phi
    dphi = delta[:, None] * h[None, :]
    dxg = dphi[:, :d]
    dz = dphi[:, d:]
    g_ws = [None] * len(ws)
    g_bs = [None] * len(ws)
    for k in range(len(ws) - 1, -1, -1):
        da = dz * (acts[k] > 0)
        g_ws[k] = zs[k].T @ da
        g_bs[k] = da.sum(axis=0)
        dz = da @ ws[k].T

    user_rows, u_inv = np.unique(users, return_inverse=True)
    item_rows, i_inv = np.unique(items, return_inverse=True)
    g_pG = np.zeros((user_rows.size, d))
    g_qG = np.zeros((item_rows.size, d))
    g_pM = np.zeros((user_rows.size, d))
    g_qM = np.zeros((item_rows.size, d))
    np.add.at(g_pG, u_inv, dxg * qG[items])
    np.add.at(g_qG, i_inv, dxg * pG[users])
    np.add.at(g_pM, u_inv, dz[:, :d])
    np.add.at(g_qM, i_inv, dz[:, d:])
    return loss, user_rows, item_rows, g_pG, g_qG, g_pM, g_qM, g_ws, g_bs, g_h


def adam_update(theta, m, v, g, lr, b1, b2, eps, bc1, bc2):
    m[...] = b1 * m + (1.0 - b1) * g
    v[...] = b2 * v + (1.0 - b2) * g * g
    theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adam_rows(theta, m, v, rows, g, lr, b1, b2, eps, bc1, bc2):
    mr = b1 * m[rows] + (1.0 - b1) * g
    vr = b2 * v[rows] + (1.0 - b2) * g * g
    m[rows] = mr
    v[rows] = vr
    theta[rows] -= lr * (mr / bc1) / (np.sqrt(vr / bc2) + eps)


def neumf_step(
    pG, qG, pM, qM, flat, widths, users, items, labels, weights,
    mode, lr, t, b1, b2, eps,
    m_pG, v_pG, m_qG, v_qG, m_pM, v_pM, m_qM, v_qM, m_flat, v_flat,
):
    """One in-place mini-batch update on the per-instance mean loss.

    Embedding rows absent from the batch are left untouched (moments
    included); dense tensors follow the usual update. Returns the batch's
    summed weighted squared error before the update.
    """
    d = pG.shape[1]
    ws, bs, h = mlp_views(flat, widths, d)
    n = users.shape[0]
    loss, ur, ir, g_pG, g_qG, g_pM, g_qM, g_ws, g_bs, g_h = backward(
        pG, qG, pM, qM, ws, bs, h, users, items, labels, weights, 1.0 / n
    )
    g_flat = np.concatenate([x for pair in zip(g_ws, g_bs) for x in (pair[0].ravel(), pair[1])] + [g_h])
    if mode == SGD:
        pG[ur] -= lr * g_pG
        qG[ir] -= lr * g_qG
        pM[ur] -= lr * g_pM
        qM[ir] -= lr * g_qM
        flat -= lr * g_flat
        return loss
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    adam_rows(pG, m_pG, v_pG, ur, g_pG, lr, b1, b2, eps, bc1, bc2)
    adam_rows(qG, m_qG, v_qG, ir, g_qG, lr, b1, b2, eps, bc1, bc2)
    adam_rows(pM, m_pM, v_pM, ur, g_pM, lr, b1, b2, eps, bc1, bc2)
    adam_rows(qM, m_qM, v_qM, ir, g_qM, lr, b1, b2, eps, bc1, bc2)
    adam_update(flat, m_flat, v_flat, g_flat, lr, b1, b2, eps, bc1, bc2)
    return loss


# -- subset enumeration ------------------------------------------------------

_CHUNK = 1 << 16


def _lex_key(mask: int, n: int) -> int:
    """Bit-reversal so that integer order equals lexicographic order of (C_0, C_1, ...)."""
    out = 0
    for i in range(n):
        if (mask >> i) & 1:
            out |= 1 << (n - 1 - i)
    return out


def _better(s, cnt, mask, best_s, best_cnt, best_mask, n) -> bool:
    tol = 1e-9 * max(1.0, abs(best_s))
    if s > best_s + tol:
        return True
    if s < best_s - tol:
        return False
    if cnt != best_cnt:
        return cnt < best_cnt
    return _lex_key(mask, n) < _lex_key(best_mask, n)


def best_subset(sizes, emds, bids, kappa, lam):
    """Exhaustive maximiser of ``lam * Q(C) - sum(bids in C)``; returns ``(mask, surplus)``."""
    n = sizes.shape[0]
    k1, k2, k3, k4, k5, k6 = (float(k) for k in kappa)
    best_mask, best_s, best_cnt = -1, -np.inf, 0
    total = 1 << n
    for start in range(0, total, _CHUNK):
        masks = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        dsum = np.zeros(masks.size)
        esum = np.zeros(masks.size)
        bsum = np.zeros(masks.size)
        cnt = np.zeros(masks.size, dtype=np.int64)
        for i in range(n):
            bit = (masks >> i) & 1
            on = bit.astype(bool)
            dsum[on] += sizes[i]
            esum[on] += emds[i]
            bsum[on] += bids[i]
            cnt += bit
        delta = np.where(cnt > 0, esum / np.maximum(cnt, 1), 0.0)
        alpha = k4 * np.exp(-(((delta + k5) / k6) ** 2))
        q = alpha - k1 * np.exp(-k2 * (k3 * dsum) ** alpha)
        s = lam * q - bsum
        top = s.max()
        tol = 1e-9 * max(1.0, abs(top))
        for j in np.flatnonzero(s >= top - tol):
            if best_mask < 0 or _better(s[j], cnt[j], int(masks[j]), best_s, best_cnt, best_mask, n):
                best_mask, best_s, best_cnt = int(masks[j]), float(s[j]), int(cnt[j])
    return best_mask, best_s
