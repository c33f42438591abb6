# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM kernels.

Same contract as ``_fallback``: gate order input, forget, output, candidate
along the 4H axis, masked steps carry state.  Internally everything is laid
out time-major so each step touches contiguous (B, .) blocks.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _mm(int M, int N, int K, double *A, double *B, double *C, double beta) noexcept nogil:
    # row-major C[M,N] = A[M,K] @ B[K,N] + beta * C
    cdef double one = 1.0
    dgemm(b"N", b"N", &N, &M, &K, &one, B, &N, A, &K, &beta, C, &N)


cdef inline void _mm_tn(int M, int N, int K, double *A, double *B, double *C, double beta) noexcept nogil:
    # row-major C[M,N] = A[K,M].T @ B[K,N] + beta * C
    cdef double one = 1.0
    dgemm(b"N", b"T", &N, &M, &K, &one, B, &N, A, &M, &beta, C, &N)


cdef inline void _mm_nt(int M, int N, int K, double *A, double *B, double *C, double beta) noexcept nogil:
    # row-major C[M,N] = A[M,K] @ B[N,K].T + beta * C
    cdef double one = 1.0
    dgemm(b"T", b"N", &N, &M, &K, &one, B, &K, A, &K, &beta, C, &N)


cdef inline void _activate(double *z, int H) noexcept nogil:
    # sigmoid on the i, f, o blocks, tanh on the candidate block
    cdef int j
    for j in range(3 * H):
        z[j] = 0.5 * (1.0 + tanh(0.5 * z[j]))
    for j in range(3 * H, 4 * H):
        z[j] = tanh(z[j])


cdef inline void _tanh_inplace(double *v, int n) noexcept nogil:
    cdef int j
    for j in range(n):
        v[j] = tanh(v[j])


def lstm_forward(x, mask, w_x, w_h, bias, bint reverse):
    cdef int B = x.shape[0], T = x.shape[1], D = x.shape[2]
    cdef int H = w_h.shape[0], G = 4 * H
    cdef cnp.ndarray[double, ndim=3, mode="c"] xt = np.ascontiguousarray(np.transpose(x, (1, 0, 2)))
    cdef cnp.ndarray[double, ndim=2, mode="c"] mt = np.ascontiguousarray(np.asarray(mask).T)
    cdef cnp.ndarray[double, ndim=2, mode="c"] wx = np.ascontiguousarray(w_x)
    cdef cnp.ndarray[double, ndim=2, mode="c"] wh = np.ascontiguousarray(w_h)
    cdef cnp.ndarray[double, ndim=1, mode="c"] bb = np.ascontiguousarray(bias)

    cdef cnp.ndarray[double, ndim=3, mode="c"] gates = np.empty((T, B, G))
    cdef cnp.ndarray[double, ndim=3, mode="c"] c_prev = np.empty((T, B, H))
    cdef cnp.ndarray[double, ndim=3, mode="c"] h_prev = np.empty((T, B, H))
    cdef cnp.ndarray[double, ndim=3, mode="c"] tanh_c = np.empty((T, B, H))
    cdef cnp.ndarray[double, ndim=3, mode="c"] hs = np.empty((T, B, H))
    cdef cnp.ndarray[double, ndim=2, mode="c"] h = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2, mode="c"] c = np.zeros((B, H))

    cdef double *pg = &gates[0, 0, 0]
    cdef double *px = &xt[0, 0, 0]
    cdef double *pwx = &wx[0, 0]
    cdef double *pwh = &wh[0, 0]
    cdef double *pb = &bb[0]
    cdef double *ph = &h[0, 0]
    cdef double *pc = &c[0, 0]
    cdef double *pcp = &c_prev[0, 0, 0]
    cdef double *php = &h_prev[0, 0, 0]
    cdef double *ptc = &tanh_c[0, 0, 0]
    cdef double *phs = &hs[0, 0, 0]
    cdef double *pm = &mt[0, 0]
    cdef int s, t, r, j
    cdef double *z
    cdef double cn, tc, m
    cdef Py_ssize_t off

    with nogil:
        # input projection for every step at once
        for r in range(T * B):
            memcpy(pg + r * G, pb, G * sizeof(double))
        if T * B > 0 and D > 0:
            _mm(T * B, G, D, px, pwx, pg, 1.0)
        for s in range(T):
            t = T - 1 - s if reverse else s
            z = pg + t * B * G
            _mm(B, G, H, ph, pwh, z, 1.0)
            memcpy(pcp + t * B * H, pc, B * H * sizeof(double))
            memcpy(php + t * B * H, ph, B * H * sizeof(double))
            for r in range(B):
                _activate(z + r * G, H)
                m = pm[t * B + r]
                for j in range(H):
                    off = r * G + j
                    cn = z[off + H] * pc[r * H + j] + z[off] * z[off + 3 * H]
                    ptc[(t * B + r) * H + j] = cn
                _tanh_inplace(ptc + (t * B + r) * H, H)
                for j in range(H):
                    off = r * G + j
                    tc = ptc[(t * B + r) * H + j]
                    cn = z[off + H] * pc[r * H + j] + z[off] * z[off + 3 * H]
                    pc[r * H + j] = m * cn + (1.0 - m) * pc[r * H + j]
                    ph[r * H + j] = m * (z[off + 2 * H] * tc) + (1.0 - m) * ph[r * H + j]
            memcpy(phs + t * B * H, ph, B * H * sizeof(double))

    out = np.ascontiguousarray(np.transpose(hs, (1, 0, 2)))
    return out, (gates, c_prev, h_prev, tanh_c, mt, xt)


def lstm_backward(dhs, x, mask, w_x, w_h, cache, bint reverse):
    gates_, c_prev_, h_prev_, tanh_c_, mt_, xt_ = cache
    cdef cnp.ndarray[double, ndim=3, mode="c"] gates = gates_
    cdef cnp.ndarray[double, ndim=3, mode="c"] c_prev = c_prev_
    cdef cnp.ndarray[double, ndim=3, mode="c"] h_prev = h_prev_
    cdef cnp.ndarray[double, ndim=3, mode="c"] tanh_c = tanh_c_
    cdef cnp.ndarray[double, ndim=2, mode="c"] mt = mt_
    cdef cnp.ndarray[double, ndim=3, mode="c"] xt = xt_
    cdef int T = gates.shape[0], B = gates.shape[1], G = gates.shape[2]
    cdef int H = G // 4, D = xt.shape[2]
    cdef cnp.ndarray[double, ndim=2, mode="c"] wx = np.ascontiguousarray(w_x)
    cdef cnp.ndarray[double, ndim=2, mode="c"] wh = np.ascontiguousarray(w_h)
    cdef cnp.ndarray[double, ndim=3, mode="c"] dht = np.ascontiguousarray(np.transpose(dhs, (1, 0, 2)))

    cdef cnp.ndarray[double, ndim=3, mode="c"] dz = np.zeros((T, B, G))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dwh = np.zeros((H, G))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dwx = np.zeros((D, G))
    cdef cnp.ndarray[double, ndim=1, mode="c"] db = np.zeros(G)
    cdef cnp.ndarray[double, ndim=3, mode="c"] dxt = np.zeros((T, B, D))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dh = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dc = np.zeros((B, H))
    cdef cnp.ndarray[double, ndim=2, mode="c"] dh_rec = np.zeros((B, H))

    cdef double *pg = &gates[0, 0, 0]
    cdef double *pcp = &c_prev[0, 0, 0]
    cdef double *php = &h_prev[0, 0, 0]
    cdef double *ptc = &tanh_c[0, 0, 0]
    cdef double *pm = &mt[0, 0]
    cdef double *pdht = &dht[0, 0, 0]
    cdef double *pdz = &dz[0, 0, 0]
    cdef double *pdwh = &dwh[0, 0]
    cdef double *pdwx = &dwx[0, 0]
    cdef double *pdb = &db[0]
    cdef double *pwh = &wh[0, 0]
    cdef double *pwx = &wx[0, 0]
    cdef double *pxt = &xt[0, 0, 0]
    cdef double *pdxt = &dxt[0, 0, 0]
    cdef double *pdh = &dh[0, 0]
    cdef double *pdc = &dc[0, 0]
    cdef double *pdr = &dh_rec[0, 0]
    cdef int s, t, r, j
    cdef double m, iv, fv, ov, gv, tc, dhv, dhn, dcn
    cdef double *z
    cdef double *gz
    cdef Py_ssize_t off, hoff

    with nogil:
        for s in range(T):
            t = s if reverse else T - 1 - s
            z = pg + t * B * G
            gz = pdz + t * B * G
            for r in range(B):
                m = pm[t * B + r]
                for j in range(H):
                    off = r * G + j
                    hoff = r * H + j
                    iv = z[off]
                    fv = z[off + H]
                    ov = z[off + 2 * H]
                    gv = z[off + 3 * H]
                    tc = ptc[(t * B + r) * H + j]
                    dhv = pdh[hoff] + pdht[(t * B + r) * H + j]
                    dhn = m * dhv
                    dcn = m * pdc[hoff] + dhn * ov * (1.0 - tc * tc)
                    gz[off] = dcn * gv * iv * (1.0 - iv)
                    gz[off + H] = dcn * pcp[(t * B + r) * H + j] * fv * (1.0 - fv)
                    gz[off + 2 * H] = dhn * tc * ov * (1.0 - ov)
                    gz[off + 3 * H] = dcn * iv * (1.0 - gv * gv)
                    pdh[hoff] = (1.0 - m) * dhv
                    pdc[hoff] = (1.0 - m) * pdc[hoff] + dcn * fv
            _mm_nt(B, H, G, gz, pwh, pdr, 0.0)
            for r in range(B * H):
                pdh[r] += pdr[r]
        if T * B > 0:
            _mm_nt(T * B, D, G, pdz, pwx, pdxt, 0.0)
            _mm_tn(D, G, T * B, pxt, pdz, pdwx, 0.0)
            _mm_tn(H, G, T * B, php, pdz, pdwh, 0.0)
        for r in range(T * B):
            for j in range(G):
                pdb[j] += pdz[r * G + j]

    dx = np.ascontiguousarray(np.transpose(dxt, (1, 0, 2)))
    return dx, dwx, dwh, db
