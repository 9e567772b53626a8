# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward pass over the joint state-action chain.

Same contract as :func:`i2c._kernel_py.forward_backward`. Small dense matrices are
handled with hand-written loops; a non-positive-definite predicted covariance in the
backward pass is reported through the ``degenerate`` status so the caller can rerun
the numpy path, which switches to a pseudo-inverse.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, fabs, sqrt
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

cnp.import_array()


cdef inline void _mm(const double* a, const double* b, double* out, int m, int k, int n) noexcept nogil:
    # out = a @ b
    cdef int i, j, l
    cdef double s
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i * k + l] * b[l * n + j]
            out[i * n + j] = s


cdef inline void _mmT(const double* a, const double* b, double* out, int m, int k, int n) noexcept nogil:
    # out = a @ b.T, b is (n, k)
    cdef int i, j, l
    cdef double s
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i * k + l] * b[j * k + l]
            out[i * n + j] = s


cdef inline void _mv(const double* a, const double* x, double* out, int m, int n) noexcept nogil:
    cdef int i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i * n + j] * x[j]
        out[i] = s


cdef inline double _quad(const double* a, const double* x, const double* y, int n) noexcept nogil:
    # x^T a y
    cdef int i, j
    cdef double s = 0.0, r
    for i in range(n):
        r = 0.0
        for j in range(n):
            r += a[i * n + j] * y[j]
        s += x[i] * r
    return s


cdef inline void _sym(double* a, int n) noexcept nogil:
    cdef int i, j
    cdef double v
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (a[i * n + j] + a[j * n + i])
            a[i * n + j] = v
            a[j * n + i] = v


cdef int _lu(double* a, int* piv, int n, double* logdet) noexcept nogil:
    # in-place LU with partial pivoting; log|det| accumulated
    cdef int i, j, k, p
    cdef double big, v, tmp
    logdet[0] = 0.0
    for k in range(n):
        p = k
        big = fabs(a[k * n + k])
        for i in range(k + 1, n):
            v = fabs(a[i * n + k])
            if v > big:
                big = v
                p = i
        piv[k] = p
        if big == 0.0:
            return 1
        if p != k:
            for j in range(n):
                tmp = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = tmp
        logdet[0] += log(big)
        for i in range(k + 1, n):
            a[i * n + k] /= a[k * n + k]
            v = a[i * n + k]
            if v != 0.0:
                for j in range(k + 1, n):
                    a[i * n + j] -= v * a[k * n + j]
    return 0


cdef void _lu_solve(const double* lu, const int* piv, double* b, int n, int nrhs) noexcept nogil:
    # b (n, nrhs) overwritten with lu^-1 b
    cdef int i, j, k, p
    cdef double tmp, v
    for k in range(n):
        p = piv[k]
        if p != k:
            for j in range(nrhs):
                tmp = b[k * nrhs + j]
                b[k * nrhs + j] = b[p * nrhs + j]
                b[p * nrhs + j] = tmp
    for i in range(n):
        for k in range(i):
            v = lu[i * n + k]
            if v != 0.0:
                for j in range(nrhs):
                    b[i * nrhs + j] -= v * b[k * nrhs + j]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            v = lu[i * n + k]
            if v != 0.0:
                for j in range(nrhs):
                    b[i * nrhs + j] -= v * b[k * nrhs + j]
        v = lu[i * n + i]
        for j in range(nrhs):
            b[i * nrhs + j] /= v


cdef int _chol(double* a, int n) noexcept nogil:
    # lower Cholesky in place; returns 1 when a is not positive definite
    cdef int i, j, k
    cdef double s, v
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= a[j * n + k] * a[j * n + k]
        if not (s > 0.0):
            return 1
        s = sqrt(s)
        a[j * n + j] = s
        for i in range(j + 1, n):
            a[j * n + i] = 0.0
            v = a[i * n + j]
            for k in range(j):
                v -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = v / s
    return 0


cdef void _chol_solve(const double* L, double* b, int n, int nrhs) noexcept nogil:
    cdef int i, j, k
    cdef double v
    for i in range(n):
        for k in range(i):
            v = L[i * n + k]
            for j in range(nrhs):
                b[i * nrhs + j] -= v * b[k * nrhs + j]
        v = L[i * n + i]
        for j in range(nrhs):
            b[i * nrhs + j] /= v
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            v = L[k * n + i]
            for j in range(nrhs):
                b[i * nrhs + j] -= v * b[k * nrhs + j]
        v = L[i * n + i]
        for j in range(nrhs):
            b[i * nrhs + j] /= v


cdef double _update(const double* mu, const double* P, const double* J, const double* h,
                    double* mn, double* Pn, double* work, int* piv, double* g, int n) noexcept nogil:
    # posterior of N(mu, P) times exp(-0.5 s'Js + h's); returns the likelihood fragment
    cdef int i, j
    cdef double logdet, frag
    _mm(P, J, work, n, n, n)
    for i in range(n):
        work[i * n + i] += 1.0
    _lu(work, piv, n, &logdet)
    memcpy(Pn, P, n * n * sizeof(double))
    _lu_solve(work, piv, Pn, n, n)
    _sym(Pn, n)
    _mv(J, mu, g, n, n)
    for i in range(n):
        g[i] = h[i] - g[i]
    _mv(Pn, g, mn, n, n)
    frag = logdet + _quad(J, mu, mu, n) - _quad(Pn, g, g, n)
    for i in range(n):
        mn[i] += mu[i]
        frag -= 2.0 * h[i] * mu[i]
    return frag


def forward_backward(A, B, c, SW, Kp, mu_u, Su, m0, P0, Jf, hf, JT, hT):
    """Returns the tuple fields of ``ChainResult`` plus a status flag (1 = degenerate)."""
    cdef const double[:, :, ::1] A_ = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, :, ::1] B_ = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[:, ::1] c_ = np.ascontiguousarray(c, dtype=np.float64)
    cdef const double[:, :, ::1] SW_ = np.ascontiguousarray(SW, dtype=np.float64)
    cdef const double[:, :, ::1] Kp_ = np.ascontiguousarray(Kp, dtype=np.float64)
    cdef const double[:, ::1] muu_ = np.ascontiguousarray(mu_u, dtype=np.float64)
    cdef const double[:, :, ::1] Su_ = np.ascontiguousarray(Su, dtype=np.float64)
    cdef const double[::1] m0_ = np.ascontiguousarray(m0, dtype=np.float64)
    cdef const double[:, ::1] P0_ = np.ascontiguousarray(P0, dtype=np.float64)
    cdef const double[:, :, ::1] Jf_ = np.ascontiguousarray(Jf, dtype=np.float64)
    cdef const double[:, ::1] hf_ = np.ascontiguousarray(hf, dtype=np.float64)
    cdef const double[:, ::1] JT_ = np.ascontiguousarray(JT, dtype=np.float64)
    cdef const double[::1] hT_ = np.ascontiguousarray(hT, dtype=np.float64)

    cdef int T = B_.shape[0]
    cdef int dx = B_.shape[1]
    cdef int du = B_.shape[2]
    cdef int n = dx + du

    fm_a = np.empty((T, n))
    fP_a = np.empty((T, n, n))
    sm_a = np.empty((T, n))
    sP_a = np.empty((T, n, n))
    pm_a = np.empty((T + 1, dx))
    pP_a = np.empty((T + 1, dx, dx))
    xTm_a = np.empty(dx)
    xTP_a = np.empty((dx, dx))
    G_a = np.empty((T, n, dx))
    lf_a = np.empty(T + 1)
    cdef double[:, ::1] fm = fm_a
    cdef double[:, :, ::1] fP = fP_a
    cdef double[:, ::1] sm = sm_a
    cdef double[:, :, ::1] sP = sP_a
    cdef double[:, ::1] pm = pm_a
    cdef double[:, :, ::1] pP = pP_a
    cdef double[::1] xTm = xTm_a
    cdef double[:, ::1] xTP = xTP_a
    cdef double[:, :, ::1] G = G_a
    cdef double[::1] lf = lf_a

    cdef double* mu = <double*> malloc(n * sizeof(double))
    cdef double* P = <double*> malloc(n * n * sizeof(double))
    cdef double* work = <double*> malloc(n * n * sizeof(double))
    cdef double* g = <double*> malloc(n * sizeof(double))
    cdef double* Mdyn = <double*> malloc(dx * n * sizeof(double))
    cdef double* cross = <double*> malloc(n * dx * sizeof(double))
    cdef double* tmp = <double*> malloc(n * n * sizeof(double))
    cdef double* crossT = <double*> malloc(dx * n * sizeof(double))
    cdef double* Lc = <double*> malloc(dx * dx * sizeof(double))
    cdef double* dP = <double*> malloc(dx * dx * sizeof(double))
    cdef double* dm = <double*> malloc(dx * sizeof(double))
    cdef double* PxK = <double*> malloc(dx * du * sizeof(double))
    cdef int* piv = <int*> malloc(n * sizeof(int))
    cdef const double* nxm
    cdef const double* nxP
    cdef int t, i, j, k, status = 0
    cdef double s

    try:
        with nogil:
            memcpy(&pm[0, 0], &m0_[0], dx * sizeof(double))
            memcpy(&pP[0, 0, 0], &P0_[0, 0], dx * dx * sizeof(double))
            for t in range(T):
                # predicted joint over [x_t; u_t]
                for i in range(dx):
                    mu[i] = pm[t, i]
                for i in range(du):
                    s = muu_[t, i]
                    for j in range(dx):
                        s += Kp_[t, i, j] * pm[t, j]
                    mu[dx + i] = s
                _mmT(&pP[t, 0, 0], &Kp_[t, 0, 0], PxK, dx, dx, du)
                for i in range(dx):
                    for j in range(dx):
                        P[i * n + j] = pP[t, i, j]
                    for j in range(du):
                        P[i * n + dx + j] = PxK[i * du + j]
                        P[(dx + j) * n + i] = PxK[i * du + j]
                for i in range(du):
                    for j in range(du):
                        s = Su_[t, i, j]
                        for k in range(dx):
                            s += Kp_[t, i, k] * PxK[k * du + j]
                        P[(dx + i) * n + dx + j] = s
                lf[t] = _update(mu, P, &Jf_[t, 0, 0], &hf_[t, 0], &fm[t, 0], &fP[t, 0, 0],
                                work, piv, g, n)
                # predict x_{t+1}
                for i in range(dx):
                    for j in range(dx):
                        Mdyn[i * n + j] = A_[t, i, j]
                    for j in range(du):
                        Mdyn[i * n + dx + j] = B_[t, i, j]
                _mv(Mdyn, &fm[t, 0], &pm[t + 1, 0], dx, n)
                for i in range(dx):
                    pm[t + 1, i] += c_[t, i]
                _mm(Mdyn, &fP[t, 0, 0], crossT, dx, n, n)
                _mmT(crossT, Mdyn, &pP[t + 1, 0, 0], dx, n, dx)
                for i in range(dx):
                    for j in range(dx):
                        pP[t + 1, i, j] += SW_[t, i, j]
                _sym(&pP[t + 1, 0, 0], dx)

            lf[T] = _update(&pm[T, 0], &pP[T, 0, 0], &JT_[0, 0], &hT_[0], &xTm[0], &xTP[0, 0],
                            work, piv, g, dx)

            nxm = &xTm[0]
            nxP = &xTP[0, 0]
            for t in range(T - 1, -1, -1):
                for i in range(dx):
                    for j in range(dx):
                        Mdyn[i * n + j] = A_[t, i, j]
                    for j in range(du):
                        Mdyn[i * n + dx + j] = B_[t, i, j]
                # crossT = M fP (dx, n) = (fP M^T)^T
                _mm(Mdyn, &fP[t, 0, 0], crossT, dx, n, n)
                memcpy(Lc, &pP[t + 1, 0, 0], dx * dx * sizeof(double))
                if _chol(Lc, dx):
                    status = 1
                    break
                _chol_solve(Lc, crossT, dx, n)
                for i in range(n):
                    for j in range(dx):
                        G[t, i, j] = crossT[j * n + i]
                for i in range(dx):
                    dm[i] = nxm[i] - pm[t + 1, i]
                    for j in range(dx):
                        dP[i * dx + j] = nxP[i * dx + j] - pP[t + 1, i, j]
                _mv(&G[t, 0, 0], dm, &sm[t, 0], n, dx)
                for i in range(n):
                    sm[t, i] += fm[t, i]
                _mm(&G[t, 0, 0], dP, cross, n, dx, dx)
                _mmT(cross, &G[t, 0, 0], &sP[t, 0, 0], n, dx, n)
                for i in range(n):
                    for j in range(n):
                        sP[t, i, j] += fP[t, i, j]
                _sym(&sP[t, 0, 0], n)
                # x-block of the smoothed joint seeds the next step back
                for i in range(dx):
                    dm[i] = sm[t, i]
                    for j in range(dx):
                        Lc[i * dx + j] = sP[t, i, j]
                memcpy(tmp, dm, dx * sizeof(double))
                memcpy(&tmp[dx], Lc, dx * dx * sizeof(double))
                nxm = tmp
                nxP = &tmp[dx]
    finally:
        free(mu); free(P); free(work); free(g); free(Mdyn); free(cross); free(tmp)
        free(crossT); free(Lc); free(dP); free(dm); free(PxK); free(piv)

    return (fm_a, fP_a, sm_a, sP_a, pm_a, pP_a, xTm_a, xTP_a, G_a, lf_a, status)
