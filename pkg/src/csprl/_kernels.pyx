# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Matrix products go straight to BLAS ``dgemm`` through scipy's Cython
bindings; activations, their derivatives and the anchor mixing are fused
loops. Arrays are C-contiguous row-major, so every call passes the
transposed problem to the column-major BLAS.
"""
import numpy as np
from libc.math cimport tanh
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"

cdef double LEAKY_SLOPE = 0.2
# LEAKY_SLOPE + LEAKY_REST == 1.0 exactly, so the branchless factor is exact
cdef double LEAKY_REST = 1.0 - 0.2


cdef inline void _mm(double* a, double* w, double* c, int rows, int n_in, int n_out,
                     double beta) noexcept nogil:
    # c[rows, n_out] = a[rows, n_in] @ w[n_in, n_out] + beta * c
    cdef char tn = b'N'
    cdef double one = 1.0
    dgemm(&tn, &tn, &n_out, &rows, &n_in, &one, w, &n_out, a, &n_in, &beta, c, &n_out)


cdef inline void _mm_wt(double* d, double* w, double* c, int rows, int n_in, int n_out,
                        double scale, double beta) noexcept nogil:
    # c[rows, n_in] = scale * d[rows, n_out] @ w[n_in, n_out]^T + beta * c
    cdef char tt = b'T'
    cdef char tn = b'N'
    dgemm(&tt, &tn, &n_in, &rows, &n_out, &scale, w, &n_out, d, &n_out, &beta, c, &n_in)


cdef inline void _mm_ht(double* h, double* d, double* c, int rows, int n_in, int n_out) noexcept nogil:
    # c[n_in, n_out] = h[rows, n_in]^T @ d[rows, n_out]
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tn, &tt, &n_out, &n_in, &rows, &one, d, &n_out, h, &n_in, &zero, c, &n_out)


cdef inline void _activate(double* z, Py_ssize_t n, long code) noexcept nogil:
    cdef Py_ssize_t i
    if code == 1:
        for i in range(n):
            z[i] = z[i] * (LEAKY_SLOPE + LEAKY_REST * (z[i] > 0.0))
    elif code == 2:
        for i in range(n):
            z[i] = tanh(z[i])


cdef inline void _derivative(double* d, const double* h, Py_ssize_t n, long code) noexcept nogil:
    cdef Py_ssize_t i
    if code == 1:
        for i in range(n):
            d[i] = d[i] * (LEAKY_SLOPE + LEAKY_REST * (h[i] > 0.0))
    elif code == 2:
        for i in range(n):
            d[i] = d[i] * (1.0 - h[i] * h[i])


def mlp_forward(double[::1] params, long[:, ::1] layout, x):
    h_arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] z
    cdef int rows = h.shape[0]
    cdef Py_ssize_t li, r, o
    cdef long w0, b0, code
    cdef int n_in, n_out
    cdef double* zp
    cdef double* bp
    hs = [h_arr]
    for li in range(layout.shape[0]):
        w0 = layout[li, 0]
        b0 = layout[li, 1]
        n_in = <int>layout[li, 2]
        n_out = <int>layout[li, 3]
        code = layout[li, 4]
        z_arr = np.empty((rows, n_out))
        z = z_arr
        zp = &z[0, 0]
        bp = &params[b0]
        with nogil:
            for r in range(rows):
                for o in range(n_out):
                    zp[r * n_out + o] = bp[o]
            _mm(&h[0, 0], &params[w0], zp, rows, n_in, n_out, 1.0)
            _activate(zp, rows * n_out, code)
        hs.append(z_arr)
        h = z
        h_arr = z_arr
    return h_arr, hs


def mlp_backward(double[::1] params, long[:, ::1] layout, list hs, dy, bint need_dx=False,
                 bint need_grad=True):
    d_arr = np.array(dy, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] d = d_arr
    cdef double[:, ::1] hin, hout, nd
    cdef double[::1] gv
    cdef int rows = d.shape[0]
    cdef Py_ssize_t li, r, o
    cdef long w0, b0, code
    cdef int n_in, n_out
    cdef double* dp
    cdef double s
    cdef Py_ssize_t n_layers = layout.shape[0]
    dx = None
    grad = None
    if need_grad:
        grad = np.zeros(params.shape[0])
        gv = grad
    for li in range(n_layers - 1, -1, -1):
        w0 = layout[li, 0]
        b0 = layout[li, 1]
        n_in = <int>layout[li, 2]
        n_out = <int>layout[li, 3]
        code = layout[li, 4]
        hin = hs[li]
        hout = hs[li + 1]
        dp = &d[0, 0]
        with nogil:
            _derivative(dp, &hout[0, 0], rows * n_out, code)
            if need_grad:
                _mm_ht(&hin[0, 0], dp, &gv[w0], rows, n_in, n_out)
                for o in range(n_out):
                    s = 0.0
                    for r in range(rows):
                        s = s + dp[r * n_out + o]
                    gv[b0 + o] = s
        if li > 0 or need_dx:
            nd_arr = np.empty((rows, n_in))
            nd = nd_arr
            with nogil:
                _mm_wt(dp, &params[w0], &nd[0, 0], rows, n_in, n_out, 1.0, 0.0)
            d = nd
            d_arr = nd_arr
            if li == 0:
                dx = d_arr
    return grad, dx


def mix_forward(double[:, ::1] anchors, double[:, ::1] alphas, long[:, ::1] layout, x):
    h_arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] z
    cdef double[:, ::1] tmp
    cdef int rows = h.shape[0]
    cdef Py_ssize_t m = anchors.shape[0]
    cdef Py_ssize_t li, r, o, k
    cdef long w0, b0, code
    cdef int n_in, n_out
    cdef double* zp
    cdef double* tp
    cdef double a
    hs = [h_arr]
    for li in range(layout.shape[0]):
        w0 = layout[li, 0]
        b0 = layout[li, 1]
        n_in = <int>layout[li, 2]
        n_out = <int>layout[li, 3]
        code = layout[li, 4]
        z_arr = np.zeros((rows, n_out))
        z = z_arr
        tmp = np.empty((rows, n_out))
        zp = &z[0, 0]
        tp = &tmp[0, 0]
        with nogil:
            for k in range(m):
                _mm(&h[0, 0], &anchors[k, w0], tp, rows, n_in, n_out, 0.0)
                for r in range(rows):
                    a = alphas[r, k]
                    if a != 0.0:
                        for o in range(n_out):
                            zp[r * n_out + o] += a * (tp[r * n_out + o] + anchors[k, b0 + o])
            _activate(zp, rows * n_out, code)
        hs.append(z_arr)
        h = z
        h_arr = z_arr
    return h_arr, hs


def mix_backward(double[:, ::1] anchors, double[:, ::1] alphas, long[:, ::1] layout, list hs, dy,
                 Py_ssize_t k, bint need_dx=False):
    d_arr = np.array(dy, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] d = d_arr
    cdef double[:, ::1] hin, hout, nd, dk
    grad = np.zeros(anchors.shape[1])
    cdef double[::1] gv = grad
    cdef int rows = d.shape[0]
    cdef Py_ssize_t m = anchors.shape[0]
    cdef Py_ssize_t li, r, o, j
    cdef long w0, b0, code
    cdef int n_in, n_out
    cdef double* dp
    cdef double* dkp
    cdef double s, a
    cdef Py_ssize_t n_layers = layout.shape[0]
    dx = None
    for li in range(n_layers - 1, -1, -1):
        w0 = layout[li, 0]
        b0 = layout[li, 1]
        n_in = <int>layout[li, 2]
        n_out = <int>layout[li, 3]
        code = layout[li, 4]
        hin = hs[li]
        hout = hs[li + 1]
        dk = np.empty((rows, n_out))
        dp = &d[0, 0]
        dkp = &dk[0, 0]
        with nogil:
            _derivative(dp, &hout[0, 0], rows * n_out, code)
            for r in range(rows):
                a = alphas[r, k]
                for o in range(n_out):
                    dkp[r * n_out + o] = a * dp[r * n_out + o]
            _mm_ht(&hin[0, 0], dkp, &gv[w0], rows, n_in, n_out)
            for o in range(n_out):
                s = 0.0
                for r in range(rows):
                    s = s + dkp[r * n_out + o]
                gv[b0 + o] = s
        if li > 0 or need_dx:
            nd_arr = np.zeros((rows, n_in))
            nd = nd_arr
            with nogil:
                for j in range(m):
                    for r in range(rows):
                        a = alphas[r, j]
                        for o in range(n_out):
                            dkp[r * n_out + o] = a * dp[r * n_out + o]
                    _mm_wt(dkp, &anchors[j, w0], &nd[0, 0], rows, n_in, n_out, 1.0, 1.0)
            d = nd
            d_arr = nd_arr
            if li == 0:
                dx = d_arr
    return grad, dx


def pointmass_step(pos, vel, action, double mass, double gravity_mult, double friction_mult,
                   double action_coeff, act_mask, double dt, double gain, double g0x, double g0y,
                   double c0, double ctrl_cost):
    cdef double[:, ::1] p = np.ascontiguousarray(pos, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(vel, dtype=np.float64)
    cdef double[:, ::1] a = np.ascontiguousarray(action, dtype=np.float64)
    cdef double[::1] am = np.ascontiguousarray(act_mask, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    out_p = np.empty((n, 2))
    out_v = np.empty((n, 2))
    out_r = np.empty(n)
    cdef double[:, ::1] op = out_p
    cdef double[:, ::1] ov = out_v
    cdef double[::1] orw = out_r
    cdef Py_ssize_t i
    cdef double ax, ay, vx, vy
    for i in range(n):
        ax = action_coeff * (am[0] * a[i, 0])
        ay = action_coeff * (am[1] * a[i, 1])
        vx = v[i, 0] + dt * ((gain * ax / mass - friction_mult * c0 * v[i, 0]) + gravity_mult * g0x)
        vy = v[i, 1] + dt * ((gain * ay / mass - friction_mult * c0 * v[i, 1]) + gravity_mult * g0y)
        ov[i, 0] = vx
        ov[i, 1] = vy
        op[i, 0] = p[i, 0] + dt * vx
        op[i, 1] = p[i, 1] + dt * vy
        orw[i] = vx - ctrl_cost * (a[i, 0] * a[i, 0] + a[i, 1] * a[i, 1])
    return out_p, out_v, out_r
