"""Control-affine systems and the planar Segway instance.

States are plain float ndarrays.  The Segway state is
``x = (r, r_dot, theta, theta_dot)``: horizontal position [m], horizontal
velocity [m/s], pitch angle [rad], pitch rate [rad/s].  Input is a single
torque applied identically to both wheels [N*m], so ``m = 1``.

Dynamics come from the unconstrained Euler-Lagrange equations of the
2-DOF wheeled inverted pendulum, with the mass matrix inverted in closed
form.  The body reference axis is offset from the center-of-mass direction
by ``equilibrium_pitch``, so the drift vanishes at
``(., 0, equilibrium_pitch, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._backend import rk4_rollout, segway_rates


@dataclass(frozen=True)
class SegwayParams:
    """Physical parameters of the planar Segway."""

    wheel_mass: float = 2.0          # combined wheel mass [kg]
    body_mass: float = 44.8          # [kg]
    wheel_radius: float = 0.195      # [m]
    com_distance: float = 0.28       # axle-to-body-COM distance [m]
    body_inertia: float = 3.343      # about the body COM [kg*m^2]
    wheel_inertia: float = 0.038     # combined, about the axle [kg*m^2]
    gravity: float = 9.81            # [m/s^2]
    torque_constant: float = 1.0     # input torque scaling
    friction: float = 0.0            # viscous drag on wheel/body relative spin
    equilibrium_pitch: float = 0.138  # upright pitch angle [rad]

    def validate(self) -> None:
        for name in ("wheel_mass", "body_mass", "wheel_radius", "com_distance",
                     "body_inertia", "wheel_inertia", "gravity"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"segway parameter {name!r} must be positive")
        if self.torque_constant <= 0.0:
            raise ValueError("segway parameter 'torque_constant' must be positive")
        if self.friction < 0.0:
            raise ValueError("segway parameter 'friction' must be nonnegative")


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics pair (f, g) for ``x_dot = f(x) + g(x) u``.

    ``drift`` and ``actuation`` accept arrays of shape ``(..., n)`` and
    broadcast over leading axes.  ``fast_rollout(x, u, dt, nsteps)``, when
    present, integrates held-input RK4 steps in the compiled kernel.
    """

    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    equilibrium: np.ndarray
    fast_rollout: Callable[[np.ndarray, np.ndarray, float, int], np.ndarray] | None = None


def pack_segway_params(params: SegwayParams) -> np.ndarray:
    """Pack derived constants into the flat vector the kernels consume."""
    m_t = (params.wheel_mass + params.body_mass
           + params.wheel_inertia / params.wheel_radius ** 2)
    mbl = params.body_mass * params.com_distance
    inertia = params.body_mass * params.com_distance ** 2 + params.body_inertia
    mgl = params.body_mass * params.gravity * params.com_distance
    return np.array([m_t, mbl, inertia, mgl, 1.0 / params.wheel_radius,
                     params.torque_constant, params.friction,
                     params.equilibrium_pitch])


def _segway_drift(packed: np.ndarray, x: np.ndarray) -> np.ndarray:
    m_t, mbl, inertia, mgl, inv_r, _, friction, theta_star = packed
    x = np.asarray(x, dtype=float)
    s = np.sin(x[..., 2] - theta_star)
    c = np.cos(x[..., 2] - theta_star)
    mblc = mbl * c
    tau = -friction * (x[..., 1] * inv_r - x[..., 3])
    rhs1 = mbl * s * x[..., 3] ** 2 + tau * inv_r
    rhs2 = mgl * s - tau
    det = m_t * inertia - mblc ** 2
    return np.stack([
        x[..., 1],
        (inertia * rhs1 - mblc * rhs2) / det,
        x[..., 3],
        (-mblc * rhs1 + m_t * rhs2) / det,
    ], axis=-1)


def _segway_actuation(packed: np.ndarray, x: np.ndarray) -> np.ndarray:
    m_t, mbl, inertia, _, inv_r, k_m, _, theta_star = packed
    x = np.asarray(x, dtype=float)
    c = np.cos(x[..., 2] - theta_star)
    mblc = mbl * c
    det = m_t * inertia - mblc ** 2
    zero = np.zeros_like(c)
    col = np.stack([
        zero,
        k_m * (inertia * inv_r + mblc) / det,
        zero,
        k_m * (-mblc * inv_r - m_t) / det,
    ], axis=-1)
    return col[..., None]


def segway_system(params: SegwayParams) -> ControlAffineSystem:
    """Planar Segway as a 4-state, 1-input control-affine system."""
    params.validate()
    packed = pack_segway_params(params)
    equilibrium = np.array([0.0, 0.0, params.equilibrium_pitch, 0.0])

    def drift(x):
        return _segway_drift(packed, x)

    def actuation(x):
        return _segway_actuation(packed, x)

    def fast_rollout(x, u, dt, nsteps):
        return rk4_rollout(packed, np.asarray(x, dtype=float),
                           float(np.asarray(u).reshape(-1)[0]), dt, nsteps)

    return ControlAffineSystem(n=4, m=1, drift=drift, actuation=actuation,
                               equilibrium=equilibrium, fast_rollout=fast_rollout)


def segway_energy(params: SegwayParams, x: np.ndarray) -> float:
    """Total mechanical energy; conserved when unactuated and frictionless."""
    m_t, mbl, inertia, mgl, _, _, _, theta_star = pack_segway_params(params)
    _, r_dot, theta, theta_dot = np.asarray(x, dtype=float)
    c = np.cos(theta - theta_star)
    kinetic = (0.5 * m_t * r_dot ** 2 + mbl * c * r_dot * theta_dot
               + 0.5 * inertia * theta_dot ** 2)
    return float(kinetic + mgl * c)


def single_rates(params: SegwayParams, x: np.ndarray, u: float) -> np.ndarray:
    """Kernel-backed single-state derivative (used by tests and benchmarks)."""
    return segway_rates(pack_segway_params(params), np.asarray(x, dtype=float),
                        float(u))


def linearize(sys: ControlAffineSystem, x: np.ndarray,
              step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central finite-difference Jacobians (A, B) of the dynamics at ``(x, 0)``."""
    x = np.asarray(x, dtype=float)
    A = np.empty((sys.n, sys.n))
    for j in range(sys.n):
        dx = np.zeros(sys.n)
        dx[j] = step
        A[:, j] = (sys.drift(x + dx) - sys.drift(x - dx)) / (2.0 * step)
    B = np.empty((sys.n, sys.m))
    gx = sys.actuation(x)
    for j in range(sys.m):
        du = np.zeros(sys.m)
        du[j] = step
        B[:, j] = (gx @ du - gx @ (-du)) / (2.0 * step)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite dynamics output during linearization")
    return A, B
