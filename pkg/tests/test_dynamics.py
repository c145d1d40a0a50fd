import numpy as np
import pytest

from mrcbf import _slowkernel
from mrcbf._backend import rk4_rollout
from mrcbf.dynamics import (ControlAffineSystem, SegwayParams, linearize,
                            pack_segway_params, segway_energy, segway_system)


def test_equilibrium_drift_vanishes(segway):
    assert np.max(np.abs(segway.drift(segway.equilibrium))) < 1e-10


def test_actuation_structure(segway):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(-1, 1, size=4)
        g = segway.actuation(x)[:, 0]
        assert g[0] == 0.0 and g[2] == 0.0
        assert abs(g[1]) > 1e-6 and abs(g[3]) > 1e-6


def test_gravity_tips_body_forward(segway):
    x = segway.equilibrium + np.array([0.0, 0.0, 0.1, 0.0])
    assert segway.drift(x)[3] > 0.0


def test_unactuated_energy_conserved():
    params = SegwayParams(friction=0.0)
    packed = pack_segway_params(params)
    x0 = np.array([0.1, 0.2, params.equilibrium_pitch + 0.1, -0.3])
    e0 = segway_energy(params, x0)
    x1 = rk4_rollout(packed, x0, 0.0, 1e-4, 10000)
    assert abs(segway_energy(params, x1) - e0) < 1e-6 * max(1.0, abs(e0))


def test_kernel_matches_fallback():
    params = SegwayParams()
    packed = pack_segway_params(params)
    x0 = np.array([0.3, -0.2, 0.25, 0.8])
    a = rk4_rollout(packed, x0, 0.7, 1e-3, 400)
    b = _slowkernel.rk4_rollout(packed, x0, 0.7, 1e-3, 400)
    assert np.max(np.abs(a - b)) < 1e-12


def test_linearize_exact_for_linear_dynamics():
    A_true = np.array([[0.0, 1.0], [-2.0, -0.5]])

    sys = ControlAffineSystem(
        n=2, m=1,
        drift=lambda x: np.einsum("ij,...j->...i", A_true, np.asarray(x, dtype=float)),
        actuation=lambda x: np.broadcast_to(
            np.array([[0.0], [1.0]]), np.asarray(x).shape[:-1] + (2, 1)).copy(),
        equilibrium=np.zeros(2))
    A, B = linearize(sys, np.array([0.3, -0.7]))
    assert np.max(np.abs(A - A_true)) < 1e-8
    assert np.max(np.abs(B - np.array([[0.0], [1.0]]))) < 1e-8


def test_upright_equilibrium_is_unstable(segway):
    A, _ = linearize(segway, segway.equilibrium)
    assert np.max(np.linalg.eigvals(A).real) > 1.0


def test_input_jacobian_equals_actuation(segway):
    _, B = linearize(segway, segway.equilibrium)
    assert np.max(np.abs(B - segway.actuation(segway.equilibrium))) < 1e-8


@pytest.mark.parametrize("field", ["wheel_mass", "body_mass", "wheel_radius",
                                   "com_distance", "body_inertia",
                                   "wheel_inertia", "gravity"])
def test_rejects_nonpositive_parameters(field):
    with pytest.raises(ValueError, match=field):
        segway_system(SegwayParams(**{field: 0.0}))


def test_drift_finite_and_lipschitz_on_box(segway, barrier_cfg):
    ts = barrier_cfg.theta_star
    axes = [np.linspace(-2, 2, 7), np.linspace(-3.6, 3.6, 7),
            np.linspace(ts - 0.65, ts + 0.65, 7), np.linspace(-3.6, 3.6, 7)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    F = segway.drift(X)
    assert np.all(np.isfinite(F))
    worst = 0.0
    for a in range(4):
        spacing = axes[a][1] - axes[a][0]
        slope = np.linalg.norm(np.diff(F, axis=a), axis=-1) / spacing
        worst = max(worst, float(np.max(slope)))
    assert np.isfinite(worst) and worst > 0.0


def test_friction_dissipates_energy():
    params = SegwayParams(friction=0.5)
    packed = pack_segway_params(params)
    x0 = np.array([0.0, 0.5, params.equilibrium_pitch, 0.0])
    e0 = segway_energy(params, x0)
    x1 = rk4_rollout(packed, x0, 0.0, 1e-3, 200)
    assert segway_energy(params, x1) < e0
