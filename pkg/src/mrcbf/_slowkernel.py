"""Pure-numpy twins of the compiled kernels in ``_fastkernel``.

Same signatures, same numerical recipes; used when the extension is not
built or when ``MRCBF_PURE_PYTHON`` is set.
"""
import numpy as np


def segway_rates(params, x, u):
    """State derivative of the planar Segway at state ``x`` under torque ``u``."""
    m_t, mbl, inertia, mgl, inv_r, k_m, friction, theta_star = params
    s = np.sin(x[2] - theta_star)
    c = np.cos(x[2] - theta_star)
    mblc = mbl * c
    tau = k_m * u - friction * (x[1] * inv_r - x[3])
    rhs1 = mbl * s * x[3] * x[3] + tau * inv_r
    rhs2 = mgl * s - tau
    det = m_t * inertia - mblc * mblc
    return np.array([
        x[1],
        (inertia * rhs1 - mblc * rhs2) / det,
        x[3],
        (-mblc * rhs1 + m_t * rhs2) / det,
    ])


def rk4_rollout(params, x0, u, dt, nsteps):
    """Integrate ``nsteps`` classical RK4 steps under a held input ``u``."""
    x = np.array(x0, copy=True)
    for _ in range(nsteps):
        k1 = segway_rates(params, x, u)
        k2 = segway_rates(params, x + 0.5 * dt * k1, u)
        k3 = segway_rates(params, x + 0.5 * dt * k2, u)
        k4 = segway_rates(params, x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def ldl_solve(K, B):
    """Solve ``K X = B`` for symmetric quasidefinite ``K`` via unpivoted LDL^T."""
    n = K.shape[0]
    L = np.array(K, copy=True)
    X = np.array(B, copy=True)
    d = np.empty(n)
    for j in range(n):
        acc = L[j, j] - np.dot(L[j, :j] * L[j, :j], d[:j])
        if -1e-300 < acc < 1e-300:
            acc = 1e-300 if acc >= 0 else -1e-300
        d[j] = acc
        L[j + 1:, j] = (L[j + 1:, j] - (L[j + 1:, :j] * L[j, :j]) @ d[:j]) / acc
    for i in range(n):
        X[i] -= L[i, :i] @ X[:i]
    X /= d[:, None]
    for i in range(n - 1, -1, -1):
        X[i] -= L[i + 1:, i] @ X[i + 1:]
    return X
