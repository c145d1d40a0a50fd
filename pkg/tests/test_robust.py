import math

import numpy as np
import pytest

from mrcbf.barriers import (BarrierFunction, LipschitzBundle, cbf_qp_filter,
                            lie_derivatives, linear_class_k)
from mrcbf.dynamics import ControlAffineSystem
from mrcbf.robust import (FeasibilityParams, RelaxationConfig,
                          admissible_error_estimate, admissible_error_state,
                          build_robust_program, canonical_parameters,
                          export_field_csv, feasibility_threshold,
                          paired_admissible_error, robust_filter,
                          robust_margin)
from mrcbf.socp import SolverTolerances, rotated_cone_embed, solve


def _const_system(lfh_vec, g_col):
    """2-state system engineered for hand-computable Lie derivatives."""
    f = np.asarray(lfh_vec, dtype=float)
    g = np.asarray(g_col, dtype=float).reshape(2, 1)
    return ControlAffineSystem(
        n=2, m=1,
        drift=lambda x: np.broadcast_to(f, np.asarray(x).shape).copy(),
        actuation=lambda x: np.broadcast_to(
            g, np.asarray(x).shape[:-1] + (2, 1)).copy(),
        equilibrium=np.zeros(2))


def _coordinate_barrier(gain=1.0):
    return BarrierFunction(h=lambda x: np.asarray(x)[..., 0],
                           grad_h=lambda x: np.broadcast_to(
                               np.eye(2)[0], np.asarray(x).shape).copy(),
                           alpha=linear_class_k(gain))


class TestRobustMargin:
    def test_arithmetic(self):
        # Lfh = 1, Lgh = 2, alpha(h) = 0.5 via h = 0.5 with unit gain
        sys = _const_system([1.0, 0.0], [2.0, 0.0])
        bf = _coordinate_barrier()
        x_hat = np.array([0.5, 0.0])
        val = robust_margin(bf, sys, x_hat, a=0.3, b=0.1, u=np.array([1.0]))
        assert val == pytest.approx(1.0 + 2.0 - 0.3 - 0.1 + 0.5)

    def test_zero_margins_reduce_to_plain_condition(self, segway, barriers):
        h1, _ = barriers
        x = np.array([0.1, 0.2, 0.3, -0.4])
        u = np.array([1.7])
        lfh, lgh = lie_derivatives(h1, segway, x)
        plain = lfh + lgh @ u + float(h1.alpha.evaluate(float(h1.h(x))))
        assert robust_margin(h1, segway, x, 0.0, 0.0, u) == pytest.approx(plain)

    def test_zero_input(self):
        sys = _const_system([1.0, 0.0], [2.0, 0.0])
        bf = _coordinate_barrier()
        val = robust_margin(bf, sys, np.array([0.5, 0.0]), a=0.3, b=9.9,
                            u=np.zeros(1))
        assert val == pytest.approx(1.0 + 0.5 - 0.3)

    def test_canonical_parameters(self, lips):
        params = canonical_parameters(lambda y: 0.2, lips)
        assert params.a(None) == pytest.approx(0.2 * (lips.lfh + lips.alpha_h))
        assert params.b(None) == pytest.approx(0.2 * lips.lgh)


class TestBuildProgram:
    def test_zero_error_degenerates_to_affine_blocks(self, segway, barriers,
                                                     lips):
        prog = build_robust_program(list(barriers), segway,
                                    segway.equilibrium, 0.0, lips, [1.0])
        assert prog.cone_dims == (3, 1, 1)

    def test_decoded_solution_satisfies_original_constraint(
            self, segway, barriers, lips, state_sampler):
        rng = np.random.default_rng(7)
        sample = state_sampler(rng)
        checked = 0
        for _ in range(100):
            x = sample()
            eps = rng.uniform(0.0, 0.2)
            ud = rng.uniform(-5, 5)
            prog = build_robust_program(list(barriers), segway, x, eps, lips,
                                        [ud])
            rep = solve(prog)
            if rep.status != "optimal":
                continue
            checked += 1
            u = rep.solution[2:3]
            for bf in barriers:
                m = robust_margin(bf, segway, x,
                                  eps * (lips.lfh + lips.alpha_h),
                                  eps * lips.lgh, u)
                assert m >= -1e-10
        assert checked > 70

    def test_negative_error_rejected(self, segway, barriers, lips):
        with pytest.raises(ValueError):
            build_robust_program(list(barriers), segway, segway.equilibrium,
                                 -0.1, lips, [0.0])


class TestReduction:
    def test_matches_qp_filter_at_zero_error(self, segway, barriers, lips,
                                             state_sampler):
        rng = np.random.default_rng(3)
        sample = state_sampler(rng)
        for _ in range(200):
            x = sample()
            ud = np.array([rng.normal() * 10])
            qp = cbf_qp_filter(list(barriers), segway, x, ud)
            mr = robust_filter(list(barriers), segway, None, x, 0.0, lips, ud)
            assert mr.status == "optimal"
            assert abs(qp.input[0] - mr.input[0]) < 1e-6

    def test_inactive_constraints_return_nominal(self, segway, barriers, lips):
        res = robust_filter(list(barriers), segway, None, segway.equilibrium,
                            0.05, lips, [0.01])
        assert res.input[0] == pytest.approx(0.01, abs=1e-6)

    def test_monotone_feasibility_in_error(self, segway, barriers, lips,
                                           state_sampler):
        rng = np.random.default_rng(9)
        sample = state_sampler(rng)
        for _ in range(40):
            x = sample()
            feasible = [robust_filter(list(barriers), segway, None, x, eps,
                                      lips, [0.0]).status == "optimal"
                        for eps in (0.05, 0.15, 0.3, 0.6)]
            # once infeasible, larger error bounds stay infeasible
            seen_infeasible = False
            for ok in feasible:
                if seen_infeasible:
                    assert not ok
                seen_infeasible = seen_infeasible or not ok


class TestAdmissibleError:
    def test_branch_arithmetic(self):
        # ||Lgh|| = 0 with Lfh + alpha(h) = 1 and unit Lipschitz sums
        sys = _const_system([0.5, 0.0], [0.0, 0.0])
        bf = _coordinate_barrier()
        lips = LipschitzBundle(lfh=0.5, lgh=1.0, alpha_h=0.5)
        x = np.array([0.5, 0.0])
        assert admissible_error_state(bf, sys, x, lips) == pytest.approx(0.5)

    def test_boundary_state_uses_input_branch(self, segway, barriers, lips,
                                              barrier_cfg):
        h1, _ = barriers
        ts = barrier_cfg.theta_star
        # h1 = 0 with Lfh1 = 0: on the boundary with no drift help
        x = np.array([0.0, 0.0, ts,
                      barrier_cfg.rate_gain * barrier_cfg.half_width])
        lfh, lgh = lie_derivatives(h1, segway, x)
        expected = np.linalg.norm(lgh) / (2 * lips.lgh)
        got = admissible_error_state(h1, segway, x, lips)
        assert got >= expected - 1e-12

    def test_estimate_side_doubles_state_side(self, segway, barriers, lips,
                                              state_sampler):
        h1, _ = barriers
        rng = np.random.default_rng(13)
        sample = state_sampler(rng)
        for _ in range(20):
            x = sample()
            assert admissible_error_estimate(h1, segway, x, lips) == \
                pytest.approx(2 * admissible_error_state(h1, segway, x, lips))

    def test_all_branches_undefined_raises(self):
        sys = _const_system([-1.0, 0.0], [0.0, 0.0])
        bf = _coordinate_barrier()
        lips = LipschitzBundle(lfh=0.0, lgh=0.0, alpha_h=0.0)
        with pytest.raises(ValueError):
            admissible_error_state(bf, sys, np.array([-1.0, 0.0]), lips)

    def test_positive_on_interior_grid(self, segway, barriers, lips,
                                       barrier_cfg):
        h1, h2 = barriers
        ts = barrier_cfg.theta_star
        for th in np.linspace(ts - 0.35, ts + 0.35, 8):
            for td in np.linspace(-1.2, 1.2, 8):
                x = np.array([0.0, 0.0, th, td])
                if min(float(h1.h(x)), float(h2.h(x))) <= 0.0:
                    continue
                assert admissible_error_state(h1, segway, x, lips) > 0.0
                assert paired_admissible_error(h1, h2, segway, x, lips) > 0.0


class TestFeasibilityThreshold:
    def test_symmetric_offsets(self):
        # d1 == d2 == d: u = 0 is the witness, threshold d/L
        for d, L in ((1.0, 1.0), (2.5, 0.5)):
            t = feasibility_threshold(
                FeasibilityParams(a=3.0, b=1.0, d1=d, d2=d, L=L))
            assert t >= d / L - 1e-12

    def test_unit_example(self):
        t = feasibility_threshold(
            FeasibilityParams(a=1.0, b=1.0, d1=1.0, d2=1.0, L=1.0))
        assert t == pytest.approx(1.0)

    def test_rejects_negative_scale_params(self):
        with pytest.raises(ValueError):
            FeasibilityParams(a=1.0, b=-0.1, d1=1.0, d2=1.0, L=1.0)

    def test_brute_force_agreement(self):
        from mrcbf.oracles import lemma_suite
        result = lemma_suite(n=300, seed=17)
        assert result.passed, result.summary()

    def test_paired_bound_is_half_threshold(self, segway, barriers, lips):
        h1, h2 = barriers
        x = np.array([0.2, -0.1, 0.3, 0.6])
        lfh1, lgh1 = lie_derivatives(h1, segway, x)
        a1 = float(h1.alpha.evaluate(float(h1.h(x))))
        a2 = float(h2.alpha.evaluate(float(h2.h(x))))
        params = FeasibilityParams(a=float(lgh1[0]),
                                   b=lips.lgh * math.sqrt(2.0),
                                   d1=a1 + lfh1, d2=a2 - lfh1,
                                   L=lips.lfh + lips.alpha_h)
        assert paired_admissible_error(h1, h2, segway, x, lips) == \
            pytest.approx(feasibility_threshold(params) / 2.0)

    def test_paired_bound_requires_antisymmetry(self, segway, barriers, lips):
        h1, _ = barriers
        with pytest.raises(ValueError):
            paired_admissible_error(h1, h1, segway,
                                    np.array([0, 0, 0.2, 0.0]), lips)


class TestRelaxation:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            RelaxationConfig(penalty=0.0)

    def test_slack_negligible_on_feasible_instances(self, segway, barriers,
                                                    lips, state_sampler):
        relax = RelaxationConfig(penalty=1e8, enabled=True)
        rng = np.random.default_rng(31)
        sample = state_sampler(rng, shrink=0.8)
        checked = 0
        for _ in range(100):
            x = sample()
            ud = np.array([rng.uniform(-3, 3)])
            plain = robust_filter(list(barriers), segway, None, x, 0.15, lips,
                                  ud)
            if plain.status != "optimal" or abs(plain.input[0] - ud[0]) > 8.0:
                continue
            relaxed = robust_filter(list(barriers), segway, None, x, 0.15,
                                    lips, ud, relax=relax)
            if relaxed.status != "optimal":
                continue
            checked += 1
            assert abs(relaxed.slack) <= 1e-6
            assert abs(relaxed.input[0] - plain.input[0]) <= 1e-4
        assert checked > 40

    def test_relaxed_handles_infeasible_instance(self, segway, barriers, lips):
        # far outside the safe band: the unrelaxed system has no admissible u
        x = np.array([0.0, 0.0, 0.9, 3.4])
        relax = RelaxationConfig(penalty=1e3, enabled=True)
        plain = robust_filter(list(barriers), segway, None, x, 0.3, lips,
                              [0.0])
        relaxed = robust_filter(list(barriers), segway, None, x, 0.3, lips,
                                [0.0], relax=relax)
        assert plain.status == "infeasible"
        assert plain.margin < 0.0
        assert relaxed.status == "optimal"
        assert relaxed.slack > 0.0


class TestContinuity:
    # frozen sensitivity reference; regression guard allows 10x drift
    K_REF = 50.0

    def test_solution_map_is_empirically_continuous(self, segway, barriers,
                                                    lips, state_sampler):
        rng = np.random.default_rng(41)
        sample = state_sampler(rng, shrink=0.8)
        worst = 0.0
        pairs = 0
        while pairs < 300:
            x = sample()
            ud = np.array([rng.uniform(-3, 3)])
            dx = rng.normal(size=4)
            dx *= 1e-4 / np.linalg.norm(dx)
            r1 = robust_filter(list(barriers), segway, None, x, 0.15, lips, ud)
            r2 = robust_filter(list(barriers), segway, None, x + dx, 0.15,
                               lips, ud)
            if r1.status != "optimal" or r2.status != "optimal":
                continue
            pairs += 1
            worst = max(worst, abs(r1.input[0] - r2.input[0]) / 1e-4)
        assert worst <= 10.0 * self.K_REF


def test_field_csv_serialization(tmp_path):
    path = tmp_path / "field.csv"
    field = np.array([[1.0, np.inf], [-np.inf, 0.5]])
    export_field_csv(path, np.array([0.0, 1.0]), np.array([0.0, 1.0]), field,
                     header_lines=["test=1"])
    text = path.read_text()
    assert "inf" in text and "-inf" in text
    assert text.startswith("# test=1")
    with pytest.raises(ValueError):
        export_field_csv(path, np.array([0.0]), np.array([0.0]),
                         np.array([[np.nan]]))
