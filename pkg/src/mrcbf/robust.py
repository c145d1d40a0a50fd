"""Measurement-robust barrier filters.

The barrier condition at an estimated state is tightened by the margin
``a(y) + b(y)||u||`` absorbing bounded estimation error; the resulting
per-step program

    min 0.5 ||u - u_des||^2   s.t.   Lfh + Lgh u - a - b||u|| >= -alpha(h)

is a second-order cone program.  This module builds the standard-form
embedding (epigraph via a rotated cone, one cone block per barrier),
solves it, and provides the closed-form admissible-error fields and the
two-constraint feasibility threshold used to audit the filters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .barriers import BarrierFunction, FilterResult, LipschitzBundle, lie_derivatives
from .dynamics import ControlAffineSystem
from .socp import ConeProgram, SolverTolerances, rotated_cone_embed, solve


@dataclass(frozen=True)
class MRParameters:
    """Margin coefficients ``(a, b)`` as functions of the measurement."""

    a: Callable[[np.ndarray], float]
    b: Callable[[np.ndarray], float]


def canonical_parameters(eps_fn: Callable[[np.ndarray], float],
                         lips: LipschitzBundle) -> MRParameters:
    """Margin functions induced by an error bound and a Lipschitz bundle."""
    return MRParameters(
        a=lambda y: float(eps_fn(y)) * (lips.lfh + lips.alpha_h),
        b=lambda y: float(eps_fn(y)) * lips.lgh,
    )


@dataclass(frozen=True)
class RelaxationConfig:
    penalty: float = 1e3
    enabled: bool = False

    def __post_init__(self):
        if self.penalty <= 0.0:
            raise ValueError("relaxation penalty must be positive")


@dataclass(frozen=True)
class FeasibilityParams:
    """Coefficients of the paired scalar-input constraint system.

    The system is ``a u - b e |u| >= -d1 + L e`` and
    ``-a u - b e |u| >= -d2 + L e`` with error level ``e``.
    """

    a: float
    b: float
    d1: float
    d2: float
    L: float

    def __post_init__(self):
        if self.b < 0.0 or self.L < 0.0:
            raise ValueError("b and L must be nonnegative")


def robust_margin(bf: BarrierFunction, sys: ControlAffineSystem,
                  x_hat: np.ndarray, a: float, b: float,
                  u: np.ndarray) -> float:
    """Tightened barrier-condition margin at an estimated state.

    Nonnegative iff ``u`` is admissible under the error margins ``(a, b)``.
    """
    u = np.asarray(u, dtype=float).reshape(sys.m)
    lfh, lgh = lie_derivatives(bf, sys, x_hat)
    alpha_h = float(bf.alpha.evaluate(float(bf.h(x_hat))))
    return float(lfh + lgh @ u - a - b * np.linalg.norm(u) + alpha_h)


def build_robust_program(bf, sys: ControlAffineSystem, x_hat: np.ndarray,
                         eps_y: float, lips: LipschitzBundle,
                         u_des: np.ndarray,
                         relax: RelaxationConfig | None = None) -> ConeProgram:
    """Standard-form cone program for the robust filter at one state.

    Decision vector ``(t, w, u[, delta_s])`` where ``w`` is the constant-one
    slot (pinned by the equality block; its columns inside the cone rows
    stay zero, the constant contribution lives in the offset).  One rotated
    cone encodes the epigraph of ``0.5||u||^2 (+ penalty * delta^2)``; one
    cone block per barrier encodes the tightened condition.  Cost is
    ``t - u_des . u``, equal to the filter objective up to a constant.

    The slack enters as the scaled variable ``delta_s = sqrt(2 penalty) *
    delta`` so every matrix entry stays O(1) at large penalties; decode the
    physical slack as ``delta_s / sqrt(2 penalty)``.
    """
    if eps_y < 0.0:
        raise ValueError("error bound must be nonnegative")
    barriers = [bf] if isinstance(bf, BarrierFunction) else list(bf)
    relax = relax or RelaxationConfig()
    m = sys.m
    u_des = np.asarray(u_des, dtype=float).reshape(m)
    extra = 1 if relax.enabled else 0
    d = 2 + m + extra

    R, epi_dim = rotated_cone_embed(m + extra)
    rows = 1 + epi_dim + len(barriers) * (1 if eps_y * lips.lgh == 0.0 else m + 1)
    G = np.zeros((rows, d))
    h = np.zeros(rows)

    G[0, 1] = 1.0
    h[0] = 1.0

    at = 1
    G[at:at + epi_dim, 0] = -R[:, 0]
    G[at:at + epi_dim, 2:2 + m] = -R[:, 2:2 + m]
    if relax.enabled:
        G[at:at + epi_dim, 2 + m] = -R[:, m + 2]
    h[at:at + epi_dim] = R[:, 1]
    at += epi_dim

    # a vanishing input-scaled margin degenerates each barrier cone to a
    # single affine row; emit it as a 1-dim block to keep the solver away
    # from identically-zero cone coordinates
    barrier_dim = 1 if eps_y * lips.lgh == 0.0 else m + 1
    for b in barriers:
        lfh, lgh = lie_derivatives(b, sys, x_hat)
        alpha_h = float(b.alpha.evaluate(float(b.h(x_hat))))
        G[at, 2:2 + m] = -lgh
        if relax.enabled:
            G[at, 2 + m] = -1.0 / math.sqrt(2.0 * relax.penalty)
        h[at] = alpha_h + lfh - (lips.lfh + lips.alpha_h) * eps_y
        for r in range(barrier_dim - 1):
            G[at + 1 + r, 2 + r] = -eps_y * lips.lgh
        at += barrier_dim

    cost = np.zeros(d)
    cost[0] = 1.0
    cost[2:2 + m] = -u_des
    dims = [epi_dim] + [barrier_dim] * len(barriers)
    return ConeProgram(cost=cost, G=G, h=h, cone_dims=dims, eq_dim=1)


def _polish_1d(barriers, sys, x_hat, eps, lips, u_des):
    """Exact scalar-input solution by half-line interval projection.

    On each half-line the nonsmooth margin is affine in ``u``, so the
    filter reduces to projecting ``u_des`` onto two intervals; the global
    optimum is the better of the two (ties toward smaller ``|u|``).  Used
    to polish solver output for ``m = 1``; returns ``None`` when both
    half-lines are infeasible.
    """
    ud = float(np.asarray(u_des).reshape(1)[0])
    terms = []
    for bf in barriers:
        lfh, lgh = lie_derivatives(bf, sys, x_hat)
        alpha_h = float(bf.alpha.evaluate(float(bf.h(x_hat))))
        terms.append((float(lgh[0]), alpha_h + lfh - (lips.lfh + lips.alpha_h) * eps))
    candidates = []
    for sign in (1.0, -1.0):
        lo, hi = (0.0, math.inf) if sign > 0 else (-math.inf, 0.0)
        feasible = True
        for g, rhs in terms:
            c = g - sign * eps * lips.lgh
            if c > 0.0:
                lo = max(lo, -rhs / c)
            elif c < 0.0:
                hi = min(hi, -rhs / c)
            elif rhs < 0.0:
                feasible = False
        if feasible and lo <= hi:
            candidates.append(min(max(ud, lo), hi))
    if not candidates:
        return None
    candidates.sort(key=lambda u: (0.5 * (u - ud) ** 2, abs(u)))
    return np.array([candidates[0]])


def _least_violating(barriers, sys, x_hat, a, b, span: float = 100.0):
    """Scalar-input max-min robust margin by coarse-to-fine grid search."""
    margins = []
    for bf in barriers:
        lfh, lgh = lie_derivatives(bf, sys, x_hat)
        alpha_h = float(bf.alpha.evaluate(float(bf.h(x_hat))))
        margins.append((lfh + alpha_h - a, float(lgh[0])))

    def worst(u):
        vals = [c + g * u - b * np.abs(u) for c, g in margins]
        return np.min(vals, axis=0)

    lo, hi = -span, span
    best = 0.0
    for _ in range(3):
        grid = np.linspace(lo, hi, 20001)
        w = worst(grid)
        k = int(np.argmax(w))
        best = grid[k]
        width = (hi - lo) / 100.0
        lo, hi = best - width, best + width
    return np.array([best]), float(worst(np.array([best]))[0])


def robust_filter(bf, sys: ControlAffineSystem, y, x_hat: np.ndarray,
                  eps_fn, lips: LipschitzBundle, u_des: np.ndarray,
                  relax: RelaxationConfig | None = None,
                  tol: SolverTolerances | None = None) -> FilterResult:
    """Solve the robust filter and decode the safe input.

    ``eps_fn`` is either a callable on the measurement or a constant bound.
    On an infeasible unrelaxed instance the returned input is the
    least-violating one (maximal worst margin) with status ``infeasible``.
    """
    barriers = [bf] if isinstance(bf, BarrierFunction) else list(bf)
    relax = relax or RelaxationConfig()
    eps = float(eps_fn(y)) if callable(eps_fn) else float(eps_fn)
    a_val = eps * (lips.lfh + lips.alpha_h)
    b_val = eps * lips.lgh

    prog = build_robust_program(barriers, sys, x_hat, eps, lips, u_des, relax)
    rep = solve(prog, tol)
    u = rep.solution[2:2 + sys.m]
    delta = (float(rep.solution[-1]) / math.sqrt(2.0 * relax.penalty)
             if relax.enabled else 0.0)
    status = rep.status
    if relax.enabled and status == "infeasible":
        # the relaxed program is feasible by construction; a certificate
        # here is a numerical artifact of extreme instances
        status = "numerical_failure"

    if not relax.enabled and sys.m == 1:
        # active-set polish: exact on scalar-input problems; also settles
        # borderline solver exits either way
        u_des_arr = np.asarray(u_des, dtype=float).reshape(1)
        polished = _polish_1d(barriers, sys, x_hat, eps, lips, u_des_arr)
        if polished is None:
            u, worst = _least_violating(barriers, sys, x_hat, a_val, b_val)
            return FilterResult(input=u, slack=0.0, status="infeasible",
                                margin=worst)
        cost_p = 0.5 * float((polished - u_des_arr) @ (polished - u_des_arr))
        cost_s = 0.5 * float((u - u_des_arr) @ (u - u_des_arr))
        if status != "optimal" or cost_p <= cost_s + 1e-9 * max(1.0, cost_s):
            u = polished
            status = "optimal"

    margin = min(robust_margin(b, sys, x_hat, a_val, b_val, u)
                 for b in barriers)
    return FilterResult(input=u, slack=delta, status=status, margin=margin)


def _ratio(num: float, den: float) -> float:
    """Threshold of ``num >= den * e`` over error levels ``e >= 0``."""
    if den > 0.0:
        return num / den
    return math.inf if num >= 0.0 else -math.inf


def admissible_error_state(bf: BarrierFunction, sys: ControlAffineSystem,
                           x: np.ndarray, lips: LipschitzBundle) -> float:
    """Largest error bound keeping the robust condition feasible near ``x``.

    Evaluated at the true state; conservative by a factor of two relative
    to the estimate-side bound because every estimate within the error ball
    around ``x`` must admit a safe input.  Signed: a nonpositive value
    means no error is admissible at ``x``.
    """
    lfh, lgh = lie_derivatives(bf, sys, x)
    alpha_h = float(bf.alpha.evaluate(float(bf.h(x))))
    branches = []
    num1, den1 = float(np.linalg.norm(lgh)), 2.0 * lips.lgh
    if den1 > 0.0:
        branches.append(num1 / den1)
    elif num1 > 0.0:
        branches.append(math.inf)
    num2, den2 = lfh + alpha_h, 2.0 * (lips.lfh + lips.alpha_h)
    if den2 > 0.0:
        branches.append(num2 / den2)
    elif num2 > 0.0:
        branches.append(math.inf)
    if not branches:
        raise ValueError("admissible-error bound undefined: zero Lipschitz "
                         "constants with nonpositive numerators")
    return max(branches)


def admissible_error_estimate(bf: BarrierFunction, sys: ControlAffineSystem,
                              x_hat: np.ndarray,
                              lips: LipschitzBundle) -> float:
    """Estimate-side admissible error bound (no factor of two)."""
    half = LipschitzBundle(lfh=lips.lfh / 2.0, lgh=lips.lgh / 2.0,
                           alpha_h=lips.alpha_h / 2.0,
                           grid_spec=lips.grid_spec)
    return admissible_error_state(bf, sys, x_hat, half)


def feasibility_threshold(p: FeasibilityParams) -> float:
    """Closed-form largest error level keeping the paired system feasible.

    The paired system admits some scalar ``u`` exactly when the error level
    is at most the returned value.  Three cases: ``u = 0`` (both offsets
    must dominate ``L e``), ``u`` aligned with ``a`` (second constraint
    binds, so its precondition is ``e < d2/L``), and ``u`` opposed to ``a``
    (first constraint binds, precondition ``e < d1/L``).  Ratios with
    nonpositive denominators follow the one-sided convention of
    :func:`_ratio`.
    """
    a, b, d1, d2, L = abs(p.a), p.b, p.d1, p.d2, p.L
    t0 = min(_ratio(d1, L), _ratio(d2, L))
    t_pos = min(_ratio(d2, L),
                _ratio(a * (d1 + d2), b * (d2 - d1) + 2.0 * L * a))
    t_neg = min(_ratio(d1, L),
                _ratio(a * (d1 + d2), b * (d1 - d2) + 2.0 * L * a))
    return max(t0, t_pos, t_neg)


def paired_admissible_error(bf1: BarrierFunction, bf2: BarrierFunction,
                            sys: ControlAffineSystem, x: np.ndarray,
                            lips: LipschitzBundle) -> float:
    """Admissible error for enforcing both barriers simultaneously (m = 1).

    Requires the antisymmetric gradient pair ``grad h1 == -grad h2``; the
    bound is half the paired feasibility threshold because it must cover
    every estimate within the error ball around the true state.
    """
    g1 = np.asarray(bf1.grad_h(np.asarray(x, dtype=float)), dtype=float)
    g2 = np.asarray(bf2.grad_h(np.asarray(x, dtype=float)), dtype=float)
    if not np.allclose(g1, -g2, atol=1e-10):
        raise ValueError("paired bound requires antisymmetric barrier gradients")
    lfh1, lgh1 = lie_derivatives(bf1, sys, x)
    a1 = float(bf1.alpha.evaluate(float(bf1.h(x))))
    a2 = float(bf2.alpha.evaluate(float(bf2.h(x))))
    params = FeasibilityParams(
        a=float(lgh1 @ np.ones(sys.m)),
        b=lips.lgh * math.sqrt(2.0),
        d1=a1 + lfh1,
        d2=a2 - lfh1,
        L=lips.lfh + lips.alpha_h,
    )
    return feasibility_threshold(params) / 2.0


def field_over_grid(fn: Callable[[np.ndarray], float],
                    theta_axis: np.ndarray, thetadot_axis: np.ndarray,
                    embed: Callable[[float, float], np.ndarray]) -> np.ndarray:
    """Evaluate a scalar state field over a pitch/pitch-rate grid."""
    out = np.empty((theta_axis.size, thetadot_axis.size))
    for i, th in enumerate(theta_axis):
        for j, td in enumerate(thetadot_axis):
            out[i, j] = fn(embed(th, td))
    return out


def export_field_csv(path, theta_axis, thetadot_axis, field,
                     header_lines: Sequence[str] = ()) -> None:
    """Write a field grid as CSV rows ``theta,theta_dot,value``.

    Unbounded values serialize as ``inf``/``-inf``; NaN is rejected.
    """
    field = np.asarray(field, dtype=float)
    if np.any(np.isnan(field)):
        raise ValueError("field contains NaN; refusing to serialize")

    def fmt(v: float) -> str:
        if np.isposinf(v):
            return "inf"
        if np.isneginf(v):
            return "-inf"
        return f"{v:.17g}"

    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("theta,theta_dot,value\n")
        for i, th in enumerate(theta_axis):
            for j, td in enumerate(thetadot_axis):
                fh.write(f"{th:.17g},{td:.17g},{fmt(field[i, j])}\n")
