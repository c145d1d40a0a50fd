"""Closed-loop simulation harness.

Control runs at a fixed rate with zero-order-hold inputs; integration uses
classical RK4 substeps (the compiled kernel when the system provides one).
Per-tick pipeline: measure, estimate, filter, hold, integrate, log.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .barriers import (BarrierFunction, LipschitzBundle, boolean_composition,
                       cbf_qp_filter)
from .dynamics import ControlAffineSystem, linearize
from .perception import MeasurementModel, NWRegressor
from .robust import RelaxationConfig, robust_filter
from .socp import SolverTolerances

# inside the control loop the scalar-input active-set polish supplies the
# final precision, so the cone solver can stop at a lighter gap target
LOOP_TOL = SolverTolerances(polish_gap=1e-10, retry_extended=False)

FILTERS = ("none", "cbf_qp", "mr_op", "r_mr_op")
KINDS = ("worst_case_offset", "learned_perception", "perfect_state")


@dataclass(frozen=True)
class PDGains:
    """Full-state feedback gains about the upright equilibrium."""

    position: float
    velocity: float
    pitch: float
    pitch_rate: float

    def as_row(self) -> np.ndarray:
        return np.array([self.position, self.velocity,
                         self.pitch, self.pitch_rate])


@dataclass(frozen=True)
class Scenario:
    kind: str = "perfect_state"
    filter: str = "cbf_qp"
    offset_eps: float = 0.2
    initial_state: tuple = (0.0, 0.0, 0.138, 0.0)
    duration: float = 3.0
    control_rate: float = 100.0
    integrator_dt: float = 1e-3
    noise_seed: int = 0
    perception_rate: float = 15.0
    eps_mode: str = "fixed"        # fixed | nonparametric
    eps_fixed: float = 0.2
    eps_max: float = 0.5
    relax_penalty: float = 1e3
    solver_fail_limit: int = 25

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.control_rate < 1.0:
            raise ValueError("control_rate must be at least 1 Hz")
        if self.integrator_dt > 1.0 / self.control_rate + 1e-12:
            raise ValueError("integrator_dt must not exceed the control period")


@dataclass
class TrajectoryLog:
    """Column-major per-tick records of one closed-loop run."""

    t: np.ndarray
    x: np.ndarray          # (T, n) true states
    y: np.ndarray          # (T, k) measurements
    x_hat: np.ndarray      # (T, n) estimates
    err: np.ndarray        # (T,) estimation error norms
    u: np.ndarray          # (T, m)
    slack: np.ndarray      # (T,)
    h1: np.ndarray
    h2: np.ndarray
    hb_x: np.ndarray
    hb_xhat: np.ndarray
    status: list = field(default_factory=list)


@dataclass(frozen=True)
class SafetyReport:
    min_hb_x: float
    min_hb_xhat: float
    first_crossing_time: float   # nan when no crossing
    max_estimation_error: float
    max_slack: float
    infeasible_steps: int
    record_count: int


def pd_controller(gains: PDGains, equilibrium: np.ndarray,
                  x_hat: np.ndarray) -> np.ndarray:
    """Stabilizing full-state feedback about the equilibrium."""
    dx = np.asarray(x_hat, dtype=float) - equilibrium
    return np.array([-float(gains.as_row() @ dx)])


def lqr_gains(sys: ControlAffineSystem,
              state_weights: Sequence[float] = (1.0, 1.0, 40.0, 2.0),
              input_weight: float = 1.0) -> PDGains:
    """Gains from the continuous Riccati equation at the equilibrium."""
    from scipy.linalg import solve_continuous_are

    A, B = linearize(sys, sys.equilibrium)
    Q = np.diag(state_weights)
    R = np.array([[input_weight]])
    P = solve_continuous_are(A, B, Q, R)
    K = (np.linalg.solve(R, B.T @ P)).ravel()
    return PDGains(position=K[0], velocity=K[1], pitch=K[2], pitch_rate=K[3])


def step(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray,
         dt: float) -> np.ndarray:
    """One classical RK4 step of the held-input dynamics."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float).reshape(sys.m)

    def rates(state):
        return sys.drift(state) + sys.actuation(state) @ u

    k1 = rates(x)
    k2 = rates(x + 0.5 * dt * k1)
    k3 = rates(x + 0.5 * dt * k2)
    k4 = rates(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"integrator produced non-finite state {out}")
    return out


def _integrate_hold(sys, x, u, dt, nsteps):
    if sys.fast_rollout is not None:
        out = sys.fast_rollout(x, u, dt, nsteps)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"integrator produced non-finite state {out}")
        return out
    for _ in range(nsteps):
        x = step(sys, x, u, dt)
    return x


def ball_noise_estimator(eps: float, rng: np.random.Generator):
    """Adversarial-random estimate corruption: errors of full norm ``eps``."""

    def estimate(x, t):
        direction = rng.normal(size=x.shape[0])
        direction /= np.linalg.norm(direction)
        e = eps * direction
        x_hat = x + e
        return x_hat.copy(), x_hat, eps

    return estimate


def measure_and_estimate(scenario: Scenario,
                         model: MeasurementModel | None,
                         regressor: NWRegressor | None,
                         x: np.ndarray,
                         eps_of_xhat: Callable[[np.ndarray], float] | None = None):
    """Produce ``(y, x_hat, eps_y)`` for one control tick.

    Worst-case: the pitch channel is offset by the configured constant and
    the rest measured exactly.  Learned: the regressor reconstructs
    position and pitch from the measurement features, velocities pass
    through a direct channel.  Perfect: identity.
    """
    if scenario.kind == "perfect_state":
        return x.copy(), x.copy(), 0.0
    if scenario.kind == "worst_case_offset":
        y = x.copy()
        y[2] -= scenario.offset_eps
        return y, y.copy(), scenario.offset_eps
    if scenario.kind == "learned_perception":
        if model is None or regressor is None:
            raise ValueError("learned scenario needs a model and a regressor")
        y = model.forward(x)
        pos = regressor.predict(y[:4])
        x_hat = np.array([pos[0], x[1], pos[1], x[3]])
        if scenario.eps_mode == "fixed":
            eps_y = scenario.eps_fixed
        else:
            eps_y = min(scenario.eps_max,
                        eps_of_xhat(x_hat) if eps_of_xhat else scenario.eps_max)
        return y, x_hat, eps_y
    raise ValueError(f"unknown scenario kind {scenario.kind!r}")


def run(scenario: Scenario, sys: ControlAffineSystem,
        barriers: Sequence[BarrierFunction], lips: LipschitzBundle,
        gains: PDGains,
        model: MeasurementModel | None = None,
        regressor: NWRegressor | None = None,
        estimator: Callable | None = None,
        eps_of_xhat: Callable[[np.ndarray], float] | None = None) -> TrajectoryLog:
    """Simulate one closed-loop run and return the full log.

    ``estimator(x, t) -> (y, x_hat, eps_y)`` overrides the scenario's
    measurement pipeline when given (used for Monte Carlo error injection).
    """
    scenario.validate()
    barriers = list(barriers)
    h1, h2 = barriers[0], barriers[1] if len(barriers) > 1 else barriers[0]
    period = 1.0 / scenario.control_rate
    nsub = max(1, round(period / scenario.integrator_dt))
    dt = period / nsub
    ticks = int(round(scenario.duration * scenario.control_rate))
    relax = RelaxationConfig(penalty=scenario.relax_penalty, enabled=True)

    frame_period = (1.0 / scenario.perception_rate
                    if scenario.kind == "learned_perception" else 0.0)
    next_frame = 0.0
    held = None   # (y, pos-estimate, eps, frame time) held between frames

    x = np.array(scenario.initial_state, dtype=float)
    T = ticks
    cols = {name: np.empty(T) for name in
            ("t", "err", "slack", "h1", "h2", "hb_x", "hb_xhat")}
    xs = np.empty((T, sys.n))
    xhats = np.empty((T, sys.n))
    us = np.empty((T, sys.m))
    ys = None
    statuses = []
    fail_streak = 0

    for k in range(ticks):
        t = k * period
        if estimator is not None:
            y, x_hat, eps_y = estimator(x, t)
        elif scenario.kind == "learned_perception" and frame_period > 0.0:
            if held is None or t >= next_frame - 1e-12:
                y, x_hat, eps_y = measure_and_estimate(
                    scenario, model, regressor, x, eps_of_xhat)
                held = (y, x_hat[[0, 2]], eps_y, t)
                next_frame += frame_period
            else:
                # dead-reckon the held position estimate through the
                # directly measured velocities until the next frame
                y, pos, eps_y, t_frame = held
                dt_frame = t - t_frame
                x_hat = np.array([pos[0] + x[1] * dt_frame, x[1],
                                  pos[1] + x[3] * dt_frame, x[3]])
        else:
            y, x_hat, eps_y = measure_and_estimate(
                scenario, model, regressor, x, eps_of_xhat)

        u_des = pd_controller(gains, sys.equilibrium, x_hat)
        if scenario.filter == "none":
            u, slack, status = u_des, 0.0, "optimal"
        elif scenario.filter == "cbf_qp":
            res = cbf_qp_filter(barriers, sys, x_hat, u_des)
            u, slack, status = res.input, res.slack, res.status
        else:
            res = robust_filter(
                barriers, sys, y, x_hat, eps_y, lips, u_des,
                relax=relax if scenario.filter == "r_mr_op" else None,
                tol=LOOP_TOL)
            u, slack, status = res.input, res.slack, res.status

        fail_streak = fail_streak + 1 if status == "numerical_failure" else 0
        if fail_streak > scenario.solver_fail_limit:
            raise RuntimeError(
                f"solver failure streak exceeded {scenario.solver_fail_limit}")

        if ys is None:
            ys = np.empty((T, y.shape[0]))
        cols["t"][k] = t
        xs[k] = x
        ys[k] = y
        xhats[k] = x_hat
        cols["err"][k] = float(np.linalg.norm(x_hat - x))
        us[k] = u
        cols["slack"][k] = slack
        h1v, h2v = float(h1.h(x)), float(h2.h(x))
        cols["h1"][k] = h1v
        cols["h2"][k] = h2v
        cols["hb_x"][k] = boolean_composition([h1v, h2v])
        cols["hb_xhat"][k] = boolean_composition(
            [float(h1.h(x_hat)), float(h2.h(x_hat))])
        statuses.append(status)

        x = _integrate_hold(sys, x, u, dt, nsub)

    return TrajectoryLog(t=cols["t"], x=xs, y=ys, x_hat=xhats,
                         err=cols["err"], u=us, slack=cols["slack"],
                         h1=cols["h1"], h2=cols["h2"], hb_x=cols["hb_x"],
                         hb_xhat=cols["hb_xhat"], status=statuses)


def safety_audit(log: TrajectoryLog) -> SafetyReport:
    """Summarize a run: barrier minima, first crossing, error and slack peaks."""
    if log.t.size == 0:
        raise ValueError("empty trajectory log")
    crossing = math.nan
    below = np.flatnonzero(log.hb_x < 0.0)
    if below.size:
        crossing = float(log.t[below[0]])
    return SafetyReport(
        min_hb_x=float(np.min(log.hb_x)),
        min_hb_xhat=float(np.min(log.hb_xhat)),
        first_crossing_time=crossing,
        max_estimation_error=float(np.max(log.err)),
        max_slack=float(np.max(np.abs(log.slack))),
        infeasible_steps=sum(1 for s in log.status if s == "infeasible"),
        record_count=int(log.t.size),
    )


def export_trajectory_csv(path, log: TrajectoryLog,
                          header_lines: Sequence[str] = ()) -> None:
    """Fixed-column CSV export; floats serialized at full precision."""
    k = log.y.shape[1]
    cols = (["t"] + [f"x{i}" for i in range(log.x.shape[1])]
            + [f"y{i}" for i in range(k)]
            + [f"xhat{i}" for i in range(log.x_hat.shape[1])]
            + ["err", "u", "slack", "h1", "h2", "hb_x", "hb_xhat", "status"])
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(log.t.size):
            vals = np.concatenate([[log.t[i]], log.x[i], log.y[i],
                                   log.x_hat[i],
                                   [log.err[i], log.u[i][0], log.slack[i],
                                    log.h1[i], log.h2[i], log.hb_x[i],
                                    log.hb_xhat[i]]])
            fh.write(",".join(f"{v:.17g}" for v in vals)
                     + f",{log.status[i]}\n")


def phase_portrait_csv(path, log: TrajectoryLog, cfg_half_width: float,
                       cfg_rate_gain: float, theta_star: float,
                       header_lines: Sequence[str] = ()) -> None:
    """Pitch/pitch-rate projection plus the safe-set boundary polyline."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("series,theta,theta_dot\n")
        for i in range(log.t.size):
            fh.write(f"trajectory,{log.x[i][2]:.17g},{log.x[i][3]:.17g}\n")
        thetas = np.linspace(theta_star - 1.5 * cfg_half_width,
                             theta_star + 1.5 * cfg_half_width, 121)
        for th in thetas:
            fh.write(f"boundary_upper,{th:.17g},"
                     f"{cfg_rate_gain * (cfg_half_width - th + theta_star):.17g}\n")
        for th in thetas:
            fh.write(f"boundary_lower,{th:.17g},"
                     f"{-cfg_rate_gain * (cfg_half_width + th - theta_star):.17g}\n")


def monte_carlo_min_hb(scenario: Scenario, sys: ControlAffineSystem,
                       barriers: Sequence[BarrierFunction],
                       lips: LipschitzBundle, gains: PDGains,
                       initial_states: np.ndarray, eps: float,
                       base_seed: int = 0) -> np.ndarray:
    """Worst barrier value per run under per-tick random error injection."""
    mins = np.empty(len(initial_states))
    for i, x0 in enumerate(initial_states):
        rng = np.random.default_rng(base_seed + i)
        sc = replace(scenario, initial_state=tuple(x0),
                     noise_seed=base_seed + i)
        log = run(sc, sys, barriers, lips, gains,
                  estimator=ball_noise_estimator(eps, rng))
        mins[i] = float(np.min(log.hb_x))
    return mins
