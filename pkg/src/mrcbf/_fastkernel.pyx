# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Two inner loops dominate closed-loop Monte Carlo runtime: RK4 substepping
of the Segway dynamics between control ticks, and the small dense LDL^T
factor/solve inside the cone solver.  Both have pure-numpy twins in
``_slowkernel`` with identical signatures; ``_backend`` picks one at import.
"""

from libc.math cimport cos, sin

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline void _segway_rates(const double* p, const double* x, double u,
                               double* out) noexcept nogil:
    # p packs (m_t, mbl, J, mgl, inv_r, k_m, friction, theta_star);
    # layout fixed by dynamics.pack_segway_params.
    cdef double s = sin(x[2] - p[7])
    cdef double c = cos(x[2] - p[7])
    cdef double mblc = p[1] * c
    cdef double tau = p[5] * u - p[6] * (x[1] * p[4] - x[3])
    cdef double rhs1 = p[1] * s * x[3] * x[3] + tau * p[4]
    cdef double rhs2 = p[3] * s - tau
    cdef double det = p[0] * p[2] - mblc * mblc
    out[0] = x[1]
    out[1] = (p[2] * rhs1 - mblc * rhs2) / det
    out[2] = x[3]
    out[3] = (-mblc * rhs1 + p[0] * rhs2) / det


def segway_rates(double[::1] params, double[::1] x, double u):
    """State derivative of the planar Segway at state ``x`` under torque ``u``."""
    out = np.empty(4)
    cdef double[::1] ov = out
    _segway_rates(&params[0], &x[0], u, &ov[0])
    return out


def rk4_rollout(double[::1] params, double[::1] x0, double u, double dt,
                int nsteps):
    """Integrate ``nsteps`` classical RK4 steps under a held input ``u``."""
    out = np.array(x0, copy=True)
    cdef double[::1] x = out
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef double xt[4]
    cdef double h2 = dt / 2.0
    cdef double h6 = dt / 6.0
    cdef int i, j
    with nogil:
        for i in range(nsteps):
            _segway_rates(&params[0], &x[0], u, k1)
            for j in range(4):
                xt[j] = x[j] + h2 * k1[j]
            _segway_rates(&params[0], xt, u, k2)
            for j in range(4):
                xt[j] = x[j] + h2 * k2[j]
            _segway_rates(&params[0], xt, u, k3)
            for j in range(4):
                xt[j] = x[j] + dt * k3[j]
            _segway_rates(&params[0], xt, u, k4)
            for j in range(4):
                x[j] = x[j] + h6 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return out


def ldl_solve(double[:, ::1] K, double[:, ::1] B):
    """Solve ``K X = B`` for symmetric quasidefinite ``K`` via unpivoted LDL^T.

    The caller applies signed static regularization, which keeps the
    unpivoted factorization well defined.  ``B`` has one column per rhs.
    """
    cdef int n = K.shape[0]
    cdef int m = B.shape[1]
    L_arr = np.array(K, copy=True)
    X_arr = np.array(B, copy=True)
    d_arr = np.empty(n)
    cdef double[:, ::1] L = L_arr
    cdef double[:, ::1] X = X_arr
    cdef double[::1] d = d_arr
    cdef int i, j, k, r
    cdef double acc, dj
    with nogil:
        for j in range(n):
            acc = L[j, j]
            for k in range(j):
                acc -= L[j, k] * L[j, k] * d[k]
            if -1e-300 < acc < 1e-300:
                acc = 1e-300 if acc >= 0 else -1e-300
            d[j] = acc
            dj = acc
            for i in range(j + 1, n):
                acc = L[i, j]
                for k in range(j):
                    acc -= L[i, k] * L[j, k] * d[k]
                L[i, j] = acc / dj
        # forward substitution (unit lower triangular)
        for r in range(m):
            for i in range(n):
                acc = X[i, r]
                for k in range(i):
                    acc -= L[i, k] * X[k, r]
                X[i, r] = acc
            for i in range(n):
                X[i, r] /= d[i]
            for i in range(n - 1, -1, -1):
                acc = X[i, r]
                for k in range(i + 1, n):
                    acc -= L[k, i] * X[k, r]
                X[i, r] = acc
    return X_arr
