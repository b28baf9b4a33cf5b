# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; behaviour mirrors ``fedrec._fallback``."""

from libc.math cimport exp, sqrt, pow, fabs
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

import numpy as np

DEF SGD = 0


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       double* a, int lda, double* b, int ldb, double beta,
                       double* c, int ldc) nogil:
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _adam(double* theta, double* m, double* v, const double* g, Py_ssize_t n,
                double lr, double b1, double b2, double eps, double bc1, double bc2) nogil:
    cdef Py_ssize_t k
    cdef double mk, vk
    for k in range(n):
        mk = b1 * m[k] + (1.0 - b1) * g[k]
        vk = b2 * v[k] + (1.0 - b2) * g[k] * g[k]
        m[k] = mk
        v[k] = vk
        theta[k] -= lr * (mk / bc1) / (sqrt(vk / bc2) + eps)


cdef void _sgd(double* theta, const double* g, Py_ssize_t n, double lr) nogil:
    cdef Py_ssize_t k
    for k in range(n):
        theta[k] -= lr * g[k]


def neumf_step(double[:, ::1] pG, double[:, ::1] qG, double[:, ::1] pM, double[:, ::1] qM,
               double[::1] flat, long long[::1] widths,
               long long[::1] users, long long[::1] items,
               double[::1] labels, double[::1] weights,
               int mode, double lr, long long t, double b1, double b2, double eps,
               double[:, ::1] m_pG, double[:, ::1] v_pG, double[:, ::1] m_qG, double[:, ::1] v_qG,
               double[:, ::1] m_pM, double[:, ::1] v_pM, double[:, ::1] m_qM, double[:, ::1] v_qM,
               double[::1] m_flat, double[::1] v_flat):
    """One in-place mini-batch update; see ``fedrec._fallback.neumf_step``."""
    cdef int B = users.shape[0]
    cdef int d = pG.shape[1]
    cdef int L = widths.shape[0] - 1
    cdef int l, b, j, w_in, w_out, r, wl
    cdef Py_ssize_t pos, nflat = flat.shape[0]
    cdef double scale = 1.0 / B
    cdef double loss = 0.0, s, yh, res, dl
    cdef double bc1, bc2

    cdef Py_ssize_t* w_off = <Py_ssize_t*> malloc((L + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* b_off = <Py_ssize_t*> malloc((L + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* z_off = <Py_ssize_t*> malloc((L + 2) * sizeof(Py_ssize_t))
    cdef int* urep = <int*> malloc(B * sizeof(int))
    cdef int* irep = <int*> malloc(B * sizeof(int))
    cdef int widest = 0
    cdef Py_ssize_t zsize = 0
    for l in range(L + 1):
        if widths[l] > widest:
            widest = widths[l]
    z_off[0] = 0
    for l in range(L + 1):
        z_off[l + 1] = z_off[l] + <Py_ssize_t> B * widths[l]
    zsize = z_off[L + 1]
    pos = 0
    for l in range(1, L + 1):
        w_off[l] = pos
        pos += widths[l - 1] * widths[l]
        b_off[l] = pos
        pos += widths[l]
    cdef Py_ssize_t h_off = pos
    cdef int hlen = d + widths[L]

    # z[l] for l = 0..L (post-activation; z[0] is the MLP input), a[l] pre-activation.
    cdef double* z = <double*> malloc(zsize * sizeof(double))
    cdef double* a = <double*> malloc(zsize * sizeof(double))
    cdef double* xg = <double*> malloc(B * d * sizeof(double))
    cdef double* delta = <double*> malloc(B * sizeof(double))
    cdef double* dz = <double*> malloc(B * widest * sizeof(double))
    cdef double* da = <double*> malloc(B * widest * sizeof(double))
    cdef double* gflat = <double*> malloc(nflat * sizeof(double))
    cdef double* gpG = <double*> malloc(B * d * sizeof(double))
    cdef double* gqG = <double*> malloc(B * d * sizeof(double))
    cdef double* gpM = <double*> malloc(B * d * sizeof(double))
    cdef double* gqM = <double*> malloc(B * d * sizeof(double))
    cdef double* fp = &flat[0]
    cdef double* h = fp + h_off
    cdef double* zl
    cdef double* al
    try:
        with nogil:
            memset(gflat, 0, nflat * sizeof(double))
            memset(gpG, 0, B * d * sizeof(double))
            memset(gqG, 0, B * d * sizeof(double))
            memset(gpM, 0, B * d * sizeof(double))
            memset(gqM, 0, B * d * sizeof(double))

            # forward
            for b in range(B):
                for j in range(d):
                    xg[b * d + j] = pG[users[b], j] * qG[items[b], j]
                    z[b * 2 * d + j] = pM[users[b], j]
                    z[b * 2 * d + d + j] = qM[items[b], j]
            for l in range(1, L + 1):
                w_in = widths[l - 1]
                w_out = widths[l]
                al = a + z_off[l]
                zl = z + z_off[l]
                for b in range(B):
                    for j in range(w_out):
                        al[b * w_out + j] = fp[b_off[l] + j]
                _gemm(b'N', b'N', w_out, B, w_in, 1.0, fp + w_off[l], w_out,
                      z + z_off[l - 1], w_in, 1.0, al, w_out)
                for j in range(B * w_out):
                    zl[j] = al[j] if al[j] > 0 else 0.0

            wl = widths[L]
            zl = z + z_off[L]
            for b in range(B):
                s = 0.0
                for j in range(d):
                    s += xg[b * d + j] * h[j]
                for j in range(wl):
                    s += zl[b * wl + j] * h[d + j]
                yh = _sigmoid(s)
                res = labels[b] - yh
                loss += weights[b] * res * res
                delta[b] = scale * (-2.0 * weights[b] * res * yh * (1.0 - yh))

            # output layer
            for b in range(B):
                dl = delta[b]
                for j in range(d):
                    gflat[h_off + j] += dl * xg[b * d + j]
                for j in range(wl):
                    gflat[h_off + d + j] += dl * zl[b * wl + j]
                for j in range(wl):
                    dz[b * wl + j] = dl * h[d + j]

            # MLP layers
            for l in range(L, 0, -1):
                w_in = widths[l - 1]
                w_out = widths[l]
                al = a + z_off[l]
                for j in range(B * w_out):
                    da[j] = dz[j] if al[j] > 0 else 0.0
                _gemm(b'N', b'T', w_out, w_in, B, 1.0, da, w_out,
                      z + z_off[l - 1], w_in, 0.0, gflat + w_off[l], w_out)
                for b in range(B):
                    for j in range(w_out):
                        gflat[b_off[l] + j] += da[b * w_out + j]
                _gemm(b'T', b'N', w_in, B, w_out, 1.0, fp + w_off[l], w_out,
                      da, w_out, 0.0, dz, w_in)

            # embedding rows, accumulated on first occurrence in batch order
            for b in range(B):
                urep[b] = b
                for r in range(b):
                    if users[r] == users[b]:
                        urep[b] = r
                        break
                irep[b] = b
                for r in range(b):
                    if items[r] == items[b]:
                        irep[b] = r
                        break
            for b in range(B):
                r = urep[b]
                for j in range(d):
                    gpG[r * d + j] += delta[b] * h[j] * qG[items[b], j]
                    gpM[r * d + j] += dz[b * 2 * d + j]
                r = irep[b]
                for j in range(d):
                    gqG[r * d + j] += delta[b] * h[j] * pG[users[b], j]
                    gqM[r * d + j] += dz[b * 2 * d + d + j]

            # update
            if mode == SGD:
                for b in range(B):
                    if urep[b] == b:
                        _sgd(&pG[users[b], 0], gpG + b * d, d, lr)
                        _sgd(&pM[users[b], 0], gpM + b * d, d, lr)
                    if irep[b] == b:
                        _sgd(&qG[items[b], 0], gqG + b * d, d, lr)
                        _sgd(&qM[items[b], 0], gqM + b * d, d, lr)
                _sgd(fp, gflat, nflat, lr)
            else:
                bc1 = 1.0 - pow(b1, <double> t)
                bc2 = 1.0 - pow(b2, <double> t)
                for b in range(B):
                    if urep[b] == b:
                        _adam(&pG[users[b], 0], &m_pG[users[b], 0], &v_pG[users[b], 0], gpG + b * d, d, lr, b1, b2, eps, bc1, bc2)
                        _adam(&pM[users[b], 0], &m_pM[users[b], 0], &v_pM[users[b], 0], gpM + b * d, d, lr, b1, b2, eps, bc1, bc2)
                    if irep[b] == b:
                        _adam(&qG[items[b], 0], &m_qG[items[b], 0], &v_qG[items[b], 0], gqG + b * d, d, lr, b1, b2, eps, bc1, bc2)
                        _adam(&qM[items[b], 0], &m_qM[items[b], 0], &v_qM[items[b], 0], gqM + b * d, d, lr, b1, b2, eps, bc1, bc2)
                _adam(fp, &m_flat[0], &v_flat[0], gflat, nflat, lr, b1, b2, eps, bc1, bc2)
    finally:
        free(w_off); free(b_off); free(z_off); free(urep); free(irep)
        free(z); free(a); free(xg); free(delta); free(dz); free(da); free(gflat)
        free(gpG); free(gqG); free(gpM); free(gqM)
    return loss


# -- subset enumeration ------------------------------------------------------

cdef inline unsigned long long _lex_key(unsigned long long mask, int n) nogil:
    cdef unsigned long long out = 0
    cdef int i
    for i in range(n):
        if (mask >> i) & 1:
            out |= (<unsigned long long> 1) << (n - 1 - i)
    return out


def best_subset(double[::1] sizes, double[::1] emds, double[::1] bids, double[::1] kappa, double lam):
    """Exhaustive maximiser of ``lam * Q(C) - sum(bids in C)``; returns ``(mask, surplus)``."""
    cdef int n = sizes.shape[0]
    cdef unsigned long long total = (<unsigned long long> 1) << n
    cdef unsigned long long mask, best_mask = 0
    cdef double k1 = kappa[0], k2 = kappa[1], k3 = kappa[2]
    cdef double k4 = kappa[3], k5 = kappa[4], k6 = kappa[5]
    cdef double dsum, esum, bsum, delta, alpha, q, s, best_s = 0.0, tol, x
    cdef int cnt, best_cnt = 0, i
    cdef bint have = False, take
    with nogil:
        for mask in range(total):
            dsum = 0.0
            esum = 0.0
            bsum = 0.0
            cnt = 0
            for i in range(n):
                if (mask >> i) & 1:
                    dsum += sizes[i]
                    esum += emds[i]
                    bsum += bids[i]
                    cnt += 1
            delta = esum / cnt if cnt > 0 else 0.0
            x = (delta + k5) / k6
            alpha = k4 * exp(-(x * x))
            q = alpha - k1 * exp(-k2 * pow(k3 * dsum, alpha))
            s = lam * q - bsum
            if not have:
                take = True
            else:
                tol = 1e-9 * (fabs(best_s) if fabs(best_s) > 1.0 else 1.0)
                if s > best_s + tol:
                    take = True
                elif s < best_s - tol:
                    take = False
                elif cnt != best_cnt:
                    take = cnt < best_cnt
                else:
                    take = _lex_key(mask, n) < _lex_key(best_mask, n)
            if take:
                best_mask = mask
                best_s = s
                best_cnt = cnt
                have = True
    return int(best_mask), float(best_s)
