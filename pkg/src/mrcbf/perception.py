"""Measurement models, local-averaging state estimation, and error bounds.

The synthetic measurement map stands in for a camera: each estimated
coordinate contributes an affine feature and a sinusoidal feature, so the
map is smooth, injective, and invertible in closed form on a box.  A
ball-kernel local-averaging regressor learns the inverse from noisy
labels; its high-probability error bound and the induced training-density
condition connect the learned estimator to the robust-filter margins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .barriers import BarrierFunction, LipschitzBundle, lie_derivatives
from .dynamics import ControlAffineSystem


class NoCoverageError(RuntimeError):
    """Query measurement has no training points within the kernel radius."""


@dataclass(frozen=True)
class MeasurementModel:
    """Forward sensor map with a known inverse (simulation/testing only).

    ``forward`` maps ``(..., n) -> (..., k)`` and ``true_inverse`` maps
    ``(..., k) -> (..., n)``; ``metric`` returns distances between a batch
    of measurements and one measurement.  ``lip_p`` and ``lip_q`` are grid
    estimates of the smoothness constants of the two maps.
    """

    n: int
    k: int
    forward: Callable[[np.ndarray], np.ndarray]
    true_inverse: Callable[[np.ndarray], np.ndarray]
    lip_p: float
    lip_q: float
    metric: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainingSet:
    """Measurement/label pairs with the generating truth kept for audits."""

    measurements: np.ndarray   # (N, k)
    labels: np.ndarray         # (N, n) noisy recorded states
    true_states: np.ndarray    # (N, n) held out for testing only
    noise_sigma: float

    def __len__(self) -> int:
        return self.measurements.shape[0]


@dataclass(frozen=True)
class NWRegressor:
    """Ball-kernel local-averaging estimator of the inverse map."""

    training: TrainingSet
    radius: float
    metric: Callable[[np.ndarray, np.ndarray], np.ndarray]
    fallback: bool = True

    def coverage(self, y: np.ndarray) -> int:
        d = self.metric(self.training.measurements, np.asarray(y, dtype=float))
        return int(np.count_nonzero(d <= self.radius))

    def predict(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        d = self.metric(self.training.measurements, y)
        mask = d <= self.radius
        if not np.any(mask):
            if not self.fallback:
                raise NoCoverageError(
                    f"no training measurement within radius {self.radius:g}")
            return self.training.labels[int(np.argmin(d))].copy()
        return self.training.labels[mask].mean(axis=0)


@dataclass(frozen=True)
class NonparametricBound:
    """Parameters of the density-dependent pointwise error bound."""

    L: float
    sigma: float
    gamma: float

    def __post_init__(self):
        if min(self.L, self.sigma, self.gamma) < 0.0:
            raise ValueError("bound parameters must be nonnegative")


def euclidean_metric(Y: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(Y) - y, axis=-1)


def _grid_lipschitz(fn, box, resolution, out_metric=None):
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    V = np.asarray(fn(X), dtype=float)
    best = 0.0
    for a in range(len(box)):
        pts = axes[a]
        if pts.size < 2:
            continue
        dv = np.diff(V, axis=a)
        mag = np.linalg.norm(dv, axis=-1) if V.ndim > X.ndim - 1 else np.abs(dv)
        if out_metric is not None:
            mag = out_metric(dv)
        best = max(best, float(np.max(mag)) / (pts[1] - pts[0]))
    return best


def synthetic_measurement_map(
        amplitudes: Sequence[float] = (0.5, 0.5),
        frequencies: Sequence[float] = (3.0, 3.0),
        box: Sequence[tuple[float, float]] | None = None,
        resolution: int = 41) -> MeasurementModel:
    """Injective smooth map from planar-Segway states to a 6-vector.

    Position and pitch each produce an (affine, sinusoidal) feature pair;
    the velocities map through affine features.  The affine components make
    the closed-form inverse exact everywhere.  Feature layout:
    ``(r, sin(w0 r), theta, sin(w1 theta), r_dot, theta_dot)``.
    """
    a0, a1 = amplitudes
    w0, w1 = frequencies
    if box is None:
        box = [(-3.0, 3.0), (-4.0, 4.0), (-1.0, 1.5), (-4.0, 4.0)]

    def forward(x):
        x = np.asarray(x, dtype=float)
        return np.stack([
            x[..., 0],
            a0 * np.sin(w0 * x[..., 0]),
            x[..., 2],
            a1 * np.sin(w1 * x[..., 2]),
            x[..., 1],
            x[..., 3],
        ], axis=-1)

    def true_inverse(y):
        y = np.asarray(y, dtype=float)
        return np.stack([y[..., 0], y[..., 4], y[..., 2], y[..., 5]], axis=-1)

    lip_p = _grid_lipschitz(forward, box, resolution,
                            out_metric=lambda dv: np.linalg.norm(dv, axis=-1))
    # the inverse is coordinate selection, so its constant is exactly 1
    lip_q = 1.0
    return MeasurementModel(n=4, k=6, forward=forward,
                            true_inverse=true_inverse,
                            lip_p=lip_p, lip_q=lip_q,
                            metric=euclidean_metric)


def position_submodel(amplitudes: Sequence[float] = (0.5, 0.5),
                      frequencies: Sequence[float] = (3.0, 3.0),
                      box: Sequence[tuple[float, float]] | None = None,
                      resolution: int = 81) -> MeasurementModel:
    """Restriction of the synthetic map to the learned coordinates.

    Domain is ``(r, theta)``; range is the four position features.  This is
    the model the local-averaging regressor actually learns in the
    perception scenario (velocities come from a direct channel).
    """
    a0, a1 = amplitudes
    w0, w1 = frequencies
    if box is None:
        box = [(-3.0, 3.0), (-1.0, 1.5)]

    def forward(p):
        p = np.asarray(p, dtype=float)
        return np.stack([
            p[..., 0],
            a0 * np.sin(w0 * p[..., 0]),
            p[..., 1],
            a1 * np.sin(w1 * p[..., 1]),
        ], axis=-1)

    def true_inverse(y):
        y = np.asarray(y, dtype=float)
        return np.stack([y[..., 0], y[..., 2]], axis=-1)

    lip_p = _grid_lipschitz(forward, box, resolution,
                            out_metric=lambda dv: np.linalg.norm(dv, axis=-1))
    return MeasurementModel(n=2, k=4, forward=forward,
                            true_inverse=true_inverse,
                            lip_p=lip_p, lip_q=1.0,
                            metric=euclidean_metric)


def make_training_set(model: MeasurementModel, states: np.ndarray,
                      sigma_w: float, rng: np.random.Generator) -> TrainingSet:
    """Record measurements with labels corrupted by i.i.d. Gaussian noise."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    noise = rng.normal(scale=sigma_w, size=states.shape) if sigma_w > 0 \
        else np.zeros_like(states)
    return TrainingSet(measurements=model.forward(states),
                       labels=states + noise,
                       true_states=states,
                       noise_sigma=sigma_w)


def nw_fit(data: TrainingSet, radius: float, fallback: bool = True,
           metric=euclidean_metric) -> NWRegressor:
    if len(data) == 0:
        raise ValueError("cannot fit a regressor to an empty training set")
    if radius <= 0.0:
        raise ValueError("kernel radius must be positive")
    return NWRegressor(training=data, radius=radius, metric=metric,
                       fallback=fallback)


def select_radius(model: MeasurementModel, data: TrainingSet,
                  candidates: Sequence[float],
                  rng: np.random.Generator) -> float:
    """Pick the kernel radius minimizing error on an 80/20 random split."""
    N = len(data)
    perm = rng.permutation(N)
    cut = max(1, int(0.8 * N))
    tr_idx, va_idx = perm[:cut], perm[cut:]
    train = TrainingSet(measurements=data.measurements[tr_idx],
                        labels=data.labels[tr_idx],
                        true_states=data.true_states[tr_idx],
                        noise_sigma=data.noise_sigma)
    best_r, best_err = None, np.inf
    for radius in candidates:
        reg = nw_fit(train, radius)
        err = 0.0
        for i in va_idx:
            pred = reg.predict(data.measurements[i])
            err += float(np.linalg.norm(pred - data.true_states[i]))
        err /= max(1, len(va_idx))
        if err < best_err:
            best_r, best_err = float(radius), err
    return best_r


def nonparam_error_bound(bound: NonparametricBound, data: TrainingSet,
                         x: np.ndarray) -> float:
    """Density-dependent pointwise bound on the estimation error at ``x``.

    Counts true training states within ``gamma``; an empty neighborhood
    yields ``inf`` (no guarantee without local data).
    """
    x = np.asarray(x, dtype=float)
    count = int(np.count_nonzero(
        np.linalg.norm(data.true_states - x, axis=1) <= bound.gamma))
    if count == 0:
        return math.inf
    return bound.L * bound.gamma + bound.sigma / math.sqrt(count)


def nw_error_bound(reg: NWRegressor, model: MeasurementModel, y: np.ndarray,
                   delta: float, n: int, sigma_w: float) -> float:
    """High-probability sup-norm error bound of the local average at ``y``.

    Holds with probability at least ``1 - delta`` over the label noise for
    a fixed query; requires nonzero kernel coverage.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    s = reg.coverage(y)
    if s == 0:
        raise NoCoverageError("error bound undefined without coverage")
    noise = 0.0
    if sigma_w > 0.0:
        noise = (n * sigma_w / math.sqrt(s)) \
            * math.sqrt(n * math.log(n * math.sqrt(s) / delta))
    return reg.radius * model.lip_q + noise


def required_sample_count(bf: BarrierFunction, sys: ControlAffineSystem,
                          x: np.ndarray, lips: LipschitzBundle,
                          bound: NonparametricBound) -> float:
    """Training density sufficient for the robust filter at ``x``.

    Returns the per-ball sample count above which the density-dependent
    error bound stays below the admissible error; ``inf`` when the bias
    term ``2 L gamma`` already exceeds the admissible error.
    """
    lfh, lgh = lie_derivatives(bf, sys, x)
    alpha_h = float(bf.alpha.evaluate(float(bf.h(x))))
    branches = []
    if lips.lgh > 0.0:
        branches.append(float(np.linalg.norm(lgh)) / lips.lgh)
    elif np.linalg.norm(lgh) > 0.0:
        return 0.0
    if lips.lfh + lips.alpha_h > 0.0:
        branches.append((lfh + alpha_h) / (lips.lfh + lips.alpha_h))
    if not branches:
        raise ValueError("degenerate Lipschitz bundle")
    margin = max(branches) - 2.0 * bound.L * bound.gamma
    if margin <= 0.0:
        return math.inf
    return 4.0 * bound.sigma ** 2 / margin ** 2


def grid_sampler(box: Sequence[tuple[float, float]], bf: BarrierFunction,
                 sys: ControlAffineSystem, lips: LipschitzBundle,
                 bound: NonparametricBound,
                 embed: Callable[[np.ndarray], np.ndarray] | None = None,
                 max_extra_rounds: int = 8) -> np.ndarray:
    """Emit sample points meeting the density condition over ``box``.

    Starts from a grid at pitch ``gamma / sqrt(dim)`` and greedily tops up
    every audited ball whose required count is unmet (extra points jittered
    deterministically inside the ball).  ``embed`` lifts a sampled point to
    a full state for the admissible-error evaluation (identity when the box
    already spans the state space).  Regions with an infinite requirement
    are reported by raising ``ValueError`` listing the offending centers.
    """
    dim = len(box)
    if embed is None:
        embed = lambda pt: pt
    pitch = bound.gamma / math.sqrt(dim)
    axes = [np.arange(lo, hi + 0.5 * pitch, pitch) for lo, hi in box]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)

    audit_axes = [np.linspace(lo, hi, max(2, int((hi - lo) / pitch) + 1))
                  for lo, hi in box]
    audit = np.stack(np.meshgrid(*audit_axes, indexing="ij"), axis=-1).reshape(-1, dim)
    rng = np.random.default_rng(1234)

    required = np.empty(audit.shape[0])
    for i, pt in enumerate(audit):
        required[i] = required_sample_count(bf, sys, embed(pt), lips, bound)
    bad = audit[~np.isfinite(required)]
    if bad.size:
        raise ValueError(f"infinite required count at {bad.shape[0]} audit "
                         f"points, first at {bad[0]}")

    for _ in range(max_extra_rounds):
        deficient = []
        for pt, req in zip(audit, required):
            have = int(np.count_nonzero(
                np.linalg.norm(points - pt, axis=1) <= bound.gamma))
            need = int(math.floor(req)) + 1 - have
            if need > 0:
                deficient.append((pt, need))
        if not deficient:
            return points
        extras = []
        for pt, need in deficient:
            jitter = rng.uniform(-0.25 * bound.gamma, 0.25 * bound.gamma,
                                 size=(need, dim))
            extras.append(pt + jitter)
        points = np.vstack([points] + extras)
    return points


def export_training_csv(path, data: TrainingSet) -> None:
    k = data.measurements.shape[1]
    n = data.labels.shape[1]
    cols = ([f"y{i}" for i in range(k)] + [f"label{i}" for i in range(n)]
            + [f"true{i}" for i in range(n)])
    with open(path, "w") as fh:
        fh.write(f"# noise_sigma={data.noise_sigma:.17g}\n")
        fh.write(",".join(cols) + "\n")
        for y, lab, tru in zip(data.measurements, data.labels, data.true_states):
            row = np.concatenate([y, lab, tru])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def import_training_csv(path) -> TrainingSet:
    sigma = 0.0
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "noise_sigma=" in line:
                    sigma = float(line.split("noise_sigma=")[1])
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
    if header is None or not rows:
        raise ValueError(f"no training rows in {path}")
    arr = np.asarray(rows)
    k = sum(1 for c in header if c.startswith("y"))
    n = sum(1 for c in header if c.startswith("label"))
    return TrainingSet(measurements=arr[:, :k], labels=arr[:, k:k + n],
                       true_states=arr[:, k + n:k + 2 * n], noise_sigma=sigma)
