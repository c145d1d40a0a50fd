import numpy as np
import pytest

from mrcbf.robust import build_robust_program
from mrcbf.socp import (ConeProgram, SolverTolerances, brute_force_1d,
                        dump_program, rotated_cone_embed, solve)


def _membership(q):
    return q[0] - np.linalg.norm(q[1:])


class TestRotatedConeEmbed:
    def test_orthogonality(self):
        for m in (1, 2, 5):
            R, dim = rotated_cone_embed(m)
            assert dim == m + 2
            assert np.max(np.abs(R.T @ R - np.eye(m + 2))) < 1e-12

    def test_boundary_points(self):
        R, _ = rotated_cone_embed(2)
        # ||u||^2 = 1 = 2t with t = 0.5 maps onto the cone boundary
        q = R @ np.array([0.5, 1.0, 1.0, 0.0])
        assert _membership(q) == pytest.approx(0.0, abs=1e-12)
        q = R @ np.array([0.0, 1.0, 0.0, 0.0])
        assert q[0] == pytest.approx(1 / np.sqrt(2))
        assert q[1] == pytest.approx(-1 / np.sqrt(2))
        assert _membership(q) == pytest.approx(0.0, abs=1e-12)

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            rotated_cone_embed(0)


class TestSolve:
    def test_nonnegativity_cone(self):
        prog = ConeProgram(cost=[1.0], G=[[-1.0]], h=[0.0], cone_dims=[1])
        rep = solve(prog)
        assert rep.status == "optimal"
        assert rep.solution[0] == pytest.approx(0.0, abs=1e-8)

    def test_projection_with_bound(self):
        # min 0.5||u - (-1)||^2 s.t. u >= 1  ->  u = 1
        R, dim = rotated_cone_embed(1)
        G = np.zeros((5, 3))
        h = np.zeros(5)
        G[0, 1] = 1.0
        h[0] = 1.0
        G[1:4, 0] = -R[:, 0]
        G[1:4, 2] = -R[:, 2]
        h[1:4] = R[:, 1]
        G[4, 2] = -1.0
        h[4] = -1.0
        prog = ConeProgram(cost=[1.0, 0.0, 1.0], G=G, h=h,
                           cone_dims=[dim, 1], eq_dim=1)
        rep = solve(prog)
        assert rep.status == "optimal"
        assert rep.solution[2] == pytest.approx(1.0, abs=1e-7)

    def test_infeasible_box(self):
        prog = ConeProgram(cost=[0.0], G=[[-1.0], [1.0]], h=[-1.0, 0.0],
                           cone_dims=[1, 1])
        assert solve(prog).status == "infeasible"

    def test_deterministic(self, segway, barriers, lips):
        x = np.array([0.1, -0.2, 0.3, 0.5])
        prog = build_robust_program(list(barriers), segway, x, 0.15, lips,
                                    [2.0])
        a = solve(prog)
        b = solve(prog)
        assert np.array_equal(a.solution, b.solution)
        assert (a.status, a.iterations, a.duality_gap) == \
            (b.status, b.iterations, b.duality_gap)

    def test_weak_duality_and_cone_residuals(self, segway, barriers, lips,
                                             state_sampler):
        rng = np.random.default_rng(11)
        sample = state_sampler(rng)
        checked = 0
        for _ in range(50):
            x = sample()
            prog = build_robust_program(list(barriers), segway, x,
                                        rng.uniform(0, 0.2), lips,
                                        [rng.uniform(-5, 5)])
            rep = solve(prog)
            if rep.status != "optimal":
                continue
            checked += 1
            assert np.min(prog.cone_residuals(rep.solution)) >= -1e-8
            p = prog.eq_dim
            pobj = float(prog.cost @ rep.solution)
            # reconstruct a dual bound from the reported gap
            assert rep.duality_gap <= 1e-8 * max(1.0, abs(pobj))
            assert rep.primal_residual <= 1e-8
            assert rep.dual_residual <= 1e-8
        assert checked > 30

    def test_status_reflects_residuals(self):
        # max_iters so low the solve cannot converge: status must not claim
        # optimality it did not earn
        prog = ConeProgram(cost=[1.0], G=[[-1.0]], h=[0.0], cone_dims=[1])
        rep = solve(prog, SolverTolerances(max_iters=1))
        if rep.status == "optimal":
            assert rep.primal_residual <= 1e-8
            assert rep.dual_residual <= 1e-8

    def test_rejects_malformed_program(self):
        with pytest.raises(ValueError):
            ConeProgram(cost=[1.0], G=[[-1.0]], h=[0.0, 1.0], cone_dims=[2])
        with pytest.raises(ValueError):
            ConeProgram(cost=[1.0], G=[[-1.0]], h=[0.0], cone_dims=[0])


class TestBruteForce1d:
    def test_unconstrained_quadratic(self):
        res = brute_force_1d(lambda u: (u - 1.0) ** 2, [], -5, 5, 1e-3)
        assert res.feasible
        assert res.u == pytest.approx(1.0, abs=1.1e-3)

    def test_infeasible_marker(self):
        res = brute_force_1d(lambda u: u ** 2,
                             [lambda u: u - 1.0, lambda u: -u], -5, 5, 1e-3)
        assert not res.feasible
        assert res.value == np.inf

    def test_oracle_never_beats_solver(self, segway, barriers, lips,
                                       state_sampler):
        from mrcbf.barriers import lie_derivatives
        rng = np.random.default_rng(21)
        sample = state_sampler(rng)
        for _ in range(30):
            x = sample()
            eps = rng.uniform(0, 0.2)
            ud = rng.uniform(-5, 5)
            prog = build_robust_program(list(barriers), segway, x, eps, lips,
                                        [ud])
            rep = solve(prog)
            if rep.status != "optimal":
                continue
            cons = []
            for bf in barriers:
                lfh, lgh = lie_derivatives(bf, segway, x)
                ah = float(bf.alpha.evaluate(float(bf.h(x))))
                cons.append(lambda v, c0=lfh + ah - eps * (lips.lfh + lips.alpha_h),
                            g=lgh[0], b=eps * lips.lgh: c0 + g * v - b * np.abs(v))
            ref = brute_force_1d(lambda v: 0.5 * (v - ud) ** 2, cons,
                                 -50, 50, 1e-3)
            if ref.feasible:
                u = rep.solution[2]
                assert ref.value >= 0.5 * (u - ud) ** 2 - 1e-6


def test_dump_program(tmp_path, segway, barriers, lips):
    prog = build_robust_program(list(barriers), segway,
                                np.array([0, 0, 0.2, 0.1]), 0.1, lips, [1.0])
    path = tmp_path / "prog.txt"
    dump_program(prog, path)
    lines = path.read_text().strip().splitlines()
    head = lines[0].split()
    assert head[0] == "vars" and int(head[1]) == prog.cost.size
    assert len(lines) == 2 + prog.G.shape[0]
