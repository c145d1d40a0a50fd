"""Barrier functions, Lie derivatives, grid Lipschitz estimation, CBF-QP filter.

The Segway pair of pitch-protection barriers is

    h1 = -theta_dot + rate_gain * (half_width - theta + theta_star)
    h2 = +theta_dot + rate_gain * (half_width + theta - theta_star)

whose gradients are antisymmetric (``grad h1 = -grad h2``).  The safe set
is ``{h1 >= 0, h2 >= 0}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import ControlAffineSystem

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class ExtendedClassK:
    """Strictly increasing reshaping function with ``evaluate(0) == 0``."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    tag: str = "linear"


def linear_class_k(gain: float = 1.0) -> ExtendedClassK:
    if gain <= 0.0:
        raise ValueError("class-K gain must be positive")
    return ExtendedClassK(evaluate=lambda r: gain * np.asarray(r, dtype=float),
                          tag=f"linear({gain:g})")


@dataclass(frozen=True)
class BarrierFunction:
    """Scalar barrier with analytic gradient and reshaping function.

    ``h`` maps ``(..., n) -> (...,)`` and ``grad_h`` maps
    ``(..., n) -> (..., n)``; both broadcast over leading axes.
    """

    h: Callable[[np.ndarray], np.ndarray]
    grad_h: Callable[[np.ndarray], np.ndarray]
    alpha: ExtendedClassK


@dataclass(frozen=True)
class SegwayBarrierConfig:
    half_width: float = 0.4     # pitch-angle half width [rad]
    rate_gain: float = 4.0      # [1/s]
    theta_star: float = 0.138   # equilibrium pitch [rad]
    class_k_gain: float = 50.0

    def validate(self) -> None:
        if self.half_width <= 0.0:
            raise ValueError("barrier half_width must be positive")
        if self.rate_gain <= 0.0:
            raise ValueError("barrier rate_gain must be positive")
        if self.class_k_gain <= 0.0:
            raise ValueError("barrier class_k_gain must be positive")


@dataclass(frozen=True)
class LipschitzBundle:
    """Grid-estimated Lipschitz constants of the three filter ingredients."""

    lfh: float
    lgh: float
    alpha_h: float
    grid_spec: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FilterResult:
    input: np.ndarray
    slack: float
    status: str        # optimal | infeasible | max_iters | numerical_failure
    margin: float


def segway_barriers(cfg: SegwayBarrierConfig) -> tuple[BarrierFunction, BarrierFunction]:
    cfg.validate()
    c, a_e, t_s = cfg.half_width, cfg.rate_gain, cfg.theta_star
    alpha = linear_class_k(cfg.class_k_gain)

    def h1(x):
        x = np.asarray(x, dtype=float)
        return -x[..., 3] + a_e * (c - x[..., 2] + t_s)

    def grad_h1(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape)
        g[..., 2] = -a_e
        g[..., 3] = -1.0
        return g

    def h2(x):
        x = np.asarray(x, dtype=float)
        return x[..., 3] + a_e * (c + x[..., 2] - t_s)

    def grad_h2(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape)
        g[..., 2] = a_e
        g[..., 3] = 1.0
        return g

    return (BarrierFunction(h=h1, grad_h=grad_h1, alpha=alpha),
            BarrierFunction(h=h2, grad_h=grad_h2, alpha=alpha))


def lie_derivatives(bf: BarrierFunction, sys: ControlAffineSystem,
                    x: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``(Lfh, Lgh)`` = (grad_h . f, grad_h . g) at a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},), got {x.shape}")
    grad = np.asarray(bf.grad_h(x), dtype=float)
    if grad.shape != (sys.n,):
        raise ValueError("grad_h shape mismatch")
    lfh = float(grad @ sys.drift(x))
    lgh = grad @ sys.actuation(x)
    return lfh, np.asarray(lgh, dtype=float).reshape(sys.m)


def boolean_composition(h_values: Sequence[float]) -> float:
    """Composite barrier value: nonnegative iff every constituent is."""
    vals = np.asarray(h_values, dtype=float)
    if vals.size == 0:
        raise ValueError("boolean composition of an empty list")
    return float(np.min(vals))


def _axis_grid(box: Sequence[tuple[float, float]], resolution) -> list[np.ndarray]:
    box = [tuple(map(float, b)) for b in box]
    if np.isscalar(resolution):
        resolution = [int(resolution)] * len(box)
    axes = []
    for (lo, hi), res in zip(box, resolution):
        if hi < lo:
            raise ValueError("box upper bound below lower bound")
        axes.append(np.array([lo]) if (res < 2 or hi == lo)
                    else np.linspace(lo, hi, res))
    return axes


def _max_adjacent_slope(values: np.ndarray, axes: list[np.ndarray],
                        vector_field: bool = False) -> float:
    best = 0.0
    for a, pts in enumerate(axes):
        if pts.size < 2:
            continue
        spacing = pts[1] - pts[0]
        diff = np.diff(values, axis=a)
        mag = np.linalg.norm(diff, axis=-1) if vector_field else np.abs(diff)
        if mag.size:
            best = max(best, float(np.max(mag)) / spacing)
    return best


def estimate_lipschitz(bf: BarrierFunction, sys: ControlAffineSystem,
                       box: Sequence[tuple[float, float]], resolution,
                       safety_factor: float = 1.2) -> LipschitzBundle:
    """Grid-estimate Lipschitz constants of ``Lfh``, ``Lgh`` and ``alpha(h)``.

    Evaluates each field on an axis-aligned grid over ``box`` and takes the
    maximum slope between axis-adjacent points.  Adjacent-slope estimates
    under-estimate the true constant, so a configurable safety factor is
    applied (and recorded in ``grid_spec``).
    """
    axes = _axis_grid(box, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack(mesh, axis=-1)

    grad = np.asarray(bf.grad_h(X), dtype=float)
    f = np.asarray(sys.drift(X), dtype=float)
    g = np.asarray(sys.actuation(X), dtype=float)
    lfh = np.sum(grad * f, axis=-1)
    lgh = np.einsum("...n,...nm->...m", grad, g)
    alpha_h = np.asarray(bf.alpha.evaluate(np.asarray(bf.h(X), dtype=float)))

    for name, arr in (("Lfh", lfh), ("Lgh", lgh), ("alpha(h)", alpha_h)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {name} evaluation inside the grid box")

    bundle = LipschitzBundle(
        lfh=safety_factor * _max_adjacent_slope(lfh, axes),
        lgh=safety_factor * _max_adjacent_slope(lgh, axes, vector_field=True),
        alpha_h=safety_factor * _max_adjacent_slope(alpha_h, axes),
        grid_spec={"box": [list(b) for b in box],
                   "resolution": resolution,
                   "safety_factor": safety_factor},
    )
    return bundle


def _affine_constraints(barriers, sys, x):
    """Stack the barrier conditions as ``C u >= b`` rows."""
    rows, offs = [], []
    for bf in barriers:
        lfh, lgh = lie_derivatives(bf, sys, x)
        alpha_h = float(bf.alpha.evaluate(float(bf.h(x))))
        rows.append(lgh)
        offs.append(-alpha_h - lfh)
    return np.array(rows), np.array(offs)


def _least_violating_1d(C, b):
    """Minimize the worst constraint violation of ``C u >= b`` over scalar u."""
    c = C[:, 0]
    candidates = [0.0]
    for i in range(len(c)):
        if c[i] != 0.0:
            candidates.append(b[i] / c[i])
        for j in range(i + 1, len(c)):
            if c[i] != c[j]:
                candidates.append((b[i] - b[j]) / (c[i] - c[j]))
    candidates = np.array(candidates)
    worst = np.max(b[None, :] - candidates[:, None] * c[None, :], axis=1)
    k = int(np.argmin(worst))
    return np.array([candidates[k]]), float(-worst[k])


def cbf_qp_filter(bf, sys: ControlAffineSystem, x: np.ndarray,
                  u_des: np.ndarray) -> FilterResult:
    """Minimally-invasive safety filter under affine barrier constraints.

    Solves ``argmin 0.5 ||u - u_des||^2`` subject to
    ``Lfh_i + Lgh_i u >= -alpha(h_i)`` for each barrier, exactly, by
    enumerating active sets of at most two constraints.  Infeasibility is
    reported as a status (with the least-violating input for ``m = 1``),
    never raised.
    """
    barriers = [bf] if isinstance(bf, BarrierFunction) else list(bf)
    u_des = np.asarray(u_des, dtype=float).reshape(sys.m)
    C, b = _affine_constraints(barriers, sys, x)

    def feasible(u):
        return np.all(C @ u - b >= -FEAS_TOL * max(1.0, float(np.max(np.abs(b)))))

    candidates = []
    if feasible(u_des):
        candidates.append(u_des)
    for i in range(len(barriers)):
        ci = C[i]
        nrm2 = float(ci @ ci)
        if nrm2 > 0.0:
            u = u_des + (b[i] - ci @ u_des) / nrm2 * ci
            if feasible(u):
                candidates.append(u)
        for j in range(i + 1, len(barriers)):
            A = C[[i, j]]
            if np.linalg.matrix_rank(A, tol=1e-12) < min(2, sys.m + 1):
                continue
            # projection onto the two active boundaries (least-squares when m = 1)
            sol, *_ = np.linalg.lstsq(A, b[[i, j]] - A @ u_des, rcond=None)
            u = u_des + sol
            if np.allclose(A @ u, b[[i, j]], atol=1e-8) and feasible(u):
                candidates.append(u)

    if not candidates:
        if sys.m == 1:
            u, worst_margin = _least_violating_1d(C, b)
        else:
            u, worst_margin = u_des, float(np.min(C @ u_des - b))
        return FilterResult(input=u, slack=0.0, status="infeasible",
                            margin=worst_margin)

    costs = [(float((u - u_des) @ (u - u_des)), float(u @ u), k)
             for k, u in enumerate(candidates)]
    costs.sort()
    u = candidates[costs[0][2]]
    return FilterResult(input=u, slack=0.0, status="optimal",
                        margin=float(np.min(C @ u - b)))
