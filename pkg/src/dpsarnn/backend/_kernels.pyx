# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequence kernels: LSTM recurrence and streaming attention.

Same contracts as ``numpy_kernels``; the per-step gate math runs in C and
the gate/weight products go straight to BLAS, removing the per-timestep
Python overhead that dominates chunk latency in the fallback.

The input and recurrent projections are fused into a single GEMM per step
against the concatenated weight matrix [W_ih | W_hh].  Keeping one call
per timestep (rather than batching the input projection across time) makes
every BLAS call shape-independent of how the sequence was split, which is
what guarantees bit-exact state carry-over across chunk boundaries.

BLAS is column-major, so every row-major [r, c] array below is handed over
as its own transpose; time slices x[:, t, :] of a C-contiguous [B, T, I]
array form valid column-major I x B matrices with leading dimension T*I.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expf, tanh, tanhf
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, dgemv, sgemm, sgemv

cdef extern from "gatemath.h":
    void gate_sigmoid_f(float* p, long n) nogil
    void gate_tanh_f(float* p, long n) nogil
    void gate_cell_update_f(const float* g, float* c, float* h, float* out,
                            long hidden) nogil
    void gate_sigmoid_d(double* p, long n) nogil
    void gate_tanh_d(double* p, long n) nogil
    void gate_cell_update_d(const double* g, double* c, double* h, double* out,
                            long hidden) nogil

NAME = "ext"

cdef char CHAR_T = b'T'
cdef char CHAR_N = b'N'

ctypedef fused real:
    float
    double


cdef inline real _tanh(real x) noexcept nogil:
    if real is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, real alpha,
                       real* a, int lda, real* b, int ldb, real beta,
                       real* c, int ldc) noexcept nogil:
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef inline void _gemv(char trans, int m, int n, real alpha, real* a, int lda,
                       real* x, real beta, real* y) noexcept nogil:
    cdef int one = 1
    if real is float:
        sgemv(&trans, &m, &n, &alpha, a, &lda, x, &one, &beta, y, &one)
    else:
        dgemv(&trans, &m, &n, &alpha, a, &lda, x, &one, &beta, y, &one)


cdef void _forward_impl(real[:, :, ::1] x, real[:, ::1] w_cat, real[::1] b,
                        real[:, ::1] h, real[:, ::1] c,
                        real[:, :, ::1] out, real[:, :, ::1] acts,
                        real[:, :, ::1] cs, real[:, ::1] gates,
                        real[:, ::1] xh, bint want_cache) noexcept nogil:
    cdef int B = x.shape[0]
    cdef int T = x.shape[1]
    cdef int I = x.shape[2]
    cdef int G = w_cat.shape[0]
    cdef int H = G / 4
    cdef int IH = I + H
    cdef int t, r
    cdef size_t sz = sizeof(real)
    for t in range(T):
        for r in range(B):
            memcpy(&xh[r, 0], &x[r, t, 0], I * sz)
            memcpy(&xh[r, I], &h[r, 0], H * sz)
            memcpy(&gates[r, 0], &b[0], G * sz)
        # gates^T (G x B) += W_cat (G x IH) @ xh^T (IH x B)
        _gemm(CHAR_T, CHAR_N, G, B, IH, <real>1.0,
              &w_cat[0, 0], IH, &xh[0, 0], IH, <real>1.0,
              &gates[0, 0], G)
        for r in range(B):
            # activate in place: (input, forget) | cell | output
            if real is float:
                gate_sigmoid_f(<float*>&gates[r, 0], 2 * H)
                gate_tanh_f(<float*>&gates[r, 2 * H], H)
                gate_sigmoid_f(<float*>&gates[r, 3 * H], H)
                gate_cell_update_f(<const float*>&gates[r, 0], <float*>&c[r, 0],
                                   <float*>&h[r, 0], <float*>&out[r, t, 0], H)
            else:
                gate_sigmoid_d(<double*>&gates[r, 0], 2 * H)
                gate_tanh_d(<double*>&gates[r, 2 * H], H)
                gate_sigmoid_d(<double*>&gates[r, 3 * H], H)
                gate_cell_update_d(<const double*>&gates[r, 0], <double*>&c[r, 0],
                                   <double*>&h[r, 0], <double*>&out[r, t, 0], H)
            if want_cache:
                memcpy(&acts[r, t, 0], &gates[r, 0], G * sz)
                memcpy(&cs[r, t, 0], &c[r, 0], H * sz)


cdef void _backward_impl(real[:, :, ::1] x, real[:, ::1] w_ih, real[:, ::1] w_hh,
                         real[:, ::1] h0, real[:, ::1] c0, real[:, :, ::1] out,
                         real[:, :, ::1] acts, real[:, :, ::1] cs,
                         real[:, :, ::1] d_out, real[:, ::1] dh, real[:, ::1] dc,
                         real[:, :, ::1] dx, real[:, ::1] dw_ih, real[:, ::1] dw_hh,
                         real[::1] db, real[:, ::1] dpre) noexcept nogil:
    cdef int B = x.shape[0]
    cdef int T = x.shape[1]
    cdef int I = x.shape[2]
    cdef int H = w_hh.shape[1]
    cdef int G = 4 * H
    cdef int t, r, j, ld_h
    cdef real ig, fg, gg, og, cv, tc, dh_v, dc_v
    cdef real* h_prev
    for t in range(T - 1, -1, -1):
        for r in range(B):
            for j in range(H):
                ig = acts[r, t, j]
                fg = acts[r, t, H + j]
                gg = acts[r, t, 2 * H + j]
                og = acts[r, t, 3 * H + j]
                cv = cs[r, t, j]
                tc = _tanh(cv)
                dh_v = dh[r, j] + d_out[r, t, j]
                dc_v = dc[r, j] + dh_v * og * (<real>1.0 - tc * tc)
                dpre[r, j] = dc_v * gg * ig * (<real>1.0 - ig)
                if t > 0:
                    dpre[r, H + j] = dc_v * cs[r, t - 1, j] * fg * (<real>1.0 - fg)
                else:
                    dpre[r, H + j] = dc_v * c0[r, j] * fg * (<real>1.0 - fg)
                dpre[r, 2 * H + j] = dc_v * ig * (<real>1.0 - gg * gg)
                dpre[r, 3 * H + j] = dh_v * tc * og * (<real>1.0 - og)
                dc[r, j] = dc_v * fg
        # dx_t^T (I x B) = W_ih^T (I x G) @ dpre^T (G x B)
        _gemm(CHAR_N, CHAR_N, I, B, G, <real>1.0,
              &w_ih[0, 0], I, &dpre[0, 0], G, <real>0.0,
              &dx[0, t, 0], T * I)
        # dh^T (H x B) = W_hh^T (H x G) @ dpre^T (G x B)
        _gemm(CHAR_N, CHAR_N, H, B, G, <real>1.0,
              &w_hh[0, 0], H, &dpre[0, 0], G, <real>0.0,
              &dh[0, 0], H)
        # dW_ih^T (I x G) += x_t^T (I x B) @ dpre (B x G)
        _gemm(CHAR_N, CHAR_T, I, G, B, <real>1.0,
              &x[0, t, 0], T * I, &dpre[0, 0], G, <real>1.0,
              &dw_ih[0, 0], I)
        if t > 0:
            h_prev = &out[0, t - 1, 0]
            ld_h = T * H
        else:
            h_prev = &h0[0, 0]
            ld_h = H
        # dW_hh^T (H x G) += h_prev^T (H x B) @ dpre (B x G)
        _gemm(CHAR_N, CHAR_T, H, G, B, <real>1.0,
              h_prev, ld_h, &dpre[0, 0], G, <real>1.0,
              &dw_hh[0, 0], H)
        for r in range(B):
            for j in range(G):
                db[j] += dpre[r, j]


cdef void _attn_logits(real[:, ::1] q, real[:, :, :] keys, int ldk,
                       real scale, real[:, ::1] logits) noexcept nogil:
    cdef int K = q.shape[0]
    cdef int N = q.shape[1]
    cdef int ctx = keys.shape[1]
    cdef int k
    for k in range(K):
        # logits[k] (ctx) = scale * keys[k] (ctx x N row-major) @ q[k] (N)
        _gemv(CHAR_T, N, ctx, scale, &keys[k, 0, 0], ldk, &q[k, 0],
              <real>0.0, &logits[k, 0])


cdef void _attn_values(real[:, :, :] vals, int ldv, real[:, ::1] weights,
                       real[:, ::1] out) noexcept nogil:
    cdef int K = out.shape[0]
    cdef int N = out.shape[1]
    cdef int ctx = weights.shape[1]
    cdef int k
    for k in range(K):
        # out[k] (N) = vals[k]^T (N x ctx column-major) @ weights[k] (ctx)
        _gemv(CHAR_N, N, ctx, <real>1.0, &vals[k, 0, 0], ldv, &weights[k, 0],
              <real>0.0, &out[k, 0])


def lstm_forward(x, w_ih, w_hh, b, h0, c0, bint want_cache):
    """Compiled counterpart of numpy_kernels.lstm_forward."""
    xa = np.ascontiguousarray(x)
    dtype = xa.dtype
    B, T, _ = xa.shape
    H = w_hh.shape[1]
    w_cat = np.concatenate((w_ih, w_hh), axis=1)
    out = np.empty((B, T, H), dtype=dtype)
    h = np.ascontiguousarray(h0).copy()
    c = np.ascontiguousarray(c0).copy()
    if want_cache:
        acts = np.empty((B, T, 4 * H), dtype=dtype)
        cs = np.empty((B, T, H), dtype=dtype)
    else:
        acts = np.empty((1, 1, 4), dtype=dtype)
        cs = np.empty((1, 1, 1), dtype=dtype)
    gates = np.empty((B, 4 * H), dtype=dtype)
    xh = np.empty((B, w_cat.shape[1]), dtype=dtype)
    if dtype == np.float32:
        _forward_impl[float](xa, w_cat, b, h, c, out, acts, cs, gates, xh,
                             want_cache)
    else:
        _forward_impl[double](xa, w_cat, b, h, c, out, acts, cs, gates, xh,
                              want_cache)
    cache = (acts, cs) if want_cache else None
    return out, h, c, cache


def lstm_backward(x, w_ih, w_hh, h0, c0, out, acts, cs, d_out, d_hT, d_cT):
    """Compiled counterpart of numpy_kernels.lstm_backward."""
    xa = np.ascontiguousarray(x)
    dtype = xa.dtype
    B, T, I = xa.shape
    H = w_hh.shape[1]
    dx = np.empty((B, T, I), dtype=dtype)
    dw_ih = np.zeros_like(w_ih)
    dw_hh = np.zeros_like(w_hh)
    db = np.zeros(4 * H, dtype=dtype)
    dh = np.ascontiguousarray(d_hT).copy()
    dc = np.ascontiguousarray(d_cT).copy()
    d_out_c = np.ascontiguousarray(d_out)
    dpre = np.empty((B, 4 * H), dtype=dtype)
    if dtype == np.float32:
        _backward_impl[float](xa, w_ih, w_hh, h0, c0, out, acts, cs, d_out_c,
                              dh, dc, dx, dw_ih, dw_hh, db, dpre)
    else:
        _backward_impl[double](xa, w_ih, w_hh, h0, c0, out, acts, cs, d_out_c,
                               dh, dc, dx, dw_ih, dw_hh, db, dpre)
    return dx, dw_ih, dw_hh, db, dh, dc


def attention_step(q, keys, vals, double scale):
    """Compiled counterpart of numpy_kernels.attention_step.

    q: [K, N] C-contiguous; keys/vals: [K, ctx, N] with contiguous rows
    (strided views of a larger cache buffer are fine).  Returns [K, N].
    """
    dtype = q.dtype
    K, N = q.shape
    ctx = keys.shape[1]
    itemsize = dtype.itemsize
    if keys.strides[2] != itemsize:
        keys = np.ascontiguousarray(keys)
    if vals.strides[2] != itemsize:
        vals = np.ascontiguousarray(vals)
    ldk = keys.strides[1] // itemsize
    ldv = vals.strides[1] // itemsize
    out = np.empty((K, N), dtype=dtype)
    logits = np.empty((K, ctx), dtype=dtype)
    if dtype == np.float32:
        _attn_logits[float](q, keys, ldk, <float>scale, logits)
    else:
        _attn_logits[double](q, keys, ldk, <double>scale, logits)
    np.subtract(logits, logits.max(axis=1, keepdims=True), out=logits)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    if dtype == np.float32:
        _attn_values[float](vals, ldv, logits, out)
    else:
        _attn_values[double](vals, ldv, logits, out)
    return out
