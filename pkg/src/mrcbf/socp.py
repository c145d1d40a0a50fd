"""Standard-form second-order cone programs and a small dense solver.

Programs are

    minimize    cost . z
    subject to  G[:eq_dim] z == h[:eq_dim]            (optional equality block)
                G[eq_dim:] z + s == h[eq_dim:],  s in Q^{d1} x ... x Q^{dk}

where ``Q^d = {(q0, q1) : q0 >= ||q1||_2}``.  The solver is a primal-dual
interior-point method with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step, using dense LDL^T factorizations with static
regularization.  Problem sizes here are tiny (~10 variables), so no
sparsity machinery is used, and infeasibility detection is a normalized
Farkas-certificate check rather than a homogeneous embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

import math

from ._backend import ldl_solve
from ._slowkernel import ldl_solve as _slow_ldl_solve

REG = 1e-10  # static regularization of the KKT system


@dataclass(frozen=True)
class SolverTolerances:
    gap: float = 1e-8
    feas: float = 1e-8
    max_iters: int = 100
    # extra-precision target continued past the reporting tolerances, so
    # solution coordinates land well below `gap`; raise it to trade
    # precision for iterations in hot loops
    polish_gap: float = 1e-13
    # retry degenerate endgames in extended precision; hot loops that can
    # tolerate a best-effort answer switch this off
    retry_extended: bool = True


@dataclass(frozen=True)
class ConeProgram:
    """Cost vector, stacked constraint matrix/offset, and cone layout."""

    cost: np.ndarray
    G: np.ndarray
    h: np.ndarray
    cone_dims: tuple[int, ...]
    eq_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cost", np.asarray(self.cost, dtype=float))
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        object.__setattr__(self, "cone_dims", tuple(int(d) for d in self.cone_dims))
        if any(d < 1 for d in self.cone_dims):
            raise ValueError("cone dimensions must be positive")
        rows = self.eq_dim + sum(self.cone_dims)
        if self.G.shape != (rows, self.cost.size) or self.h.shape != (rows,):
            raise ValueError("constraint matrix/offset rows must equal "
                             "equality block plus total cone dimension")

    def cone_residuals(self, z: np.ndarray) -> np.ndarray:
        """Per-block membership margin ``s0 - ||s1||`` of ``s = h - G z``."""
        s = self.h[self.eq_dim:] - self.G[self.eq_dim:] @ z
        out = np.empty(len(self.cone_dims))
        at = 0
        for i, d in enumerate(self.cone_dims):
            blk = s[at:at + d]
            out[i] = blk[0] - np.linalg.norm(blk[1:])
            at += d
        return out


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    status: str   # optimal | infeasible | max_iters | numerical_failure
    iterations: int
    primal_residual: float
    dual_residual: float
    duality_gap: float


def rotated_cone_embed(dim_u: int) -> tuple[np.ndarray, int]:
    """Orthogonal map sending ``(t, w, u)`` with ``||u||^2 <= 2 t w`` into ``Q^{m+2}``.

    The first two output coordinates are ``((t + w)/sqrt(2), (t - w)/sqrt(2))``
    and the remaining ones are ``u``.  Returns the matrix and the cone
    dimension ``dim_u + 2``.
    """
    if dim_u < 1:
        raise ValueError("dim_u must be at least 1")
    m = dim_u
    R = np.zeros((m + 2, m + 2))
    rt = 1.0 / np.sqrt(2.0)
    R[0, 0] = R[0, 1] = rt
    R[1, 0] = rt
    R[1, 1] = -rt
    R[2:, 2:] = np.eye(m)
    return R, m + 2


# --- Jordan-algebra helpers (one second-order cone block at a time) -------

def _jprod(u, v):
    out = np.empty_like(u)
    out[0] = u @ v
    out[1:] = u[0] * v[1:] + v[0] * u[1:]
    return out


def _jsolve(u, w):
    """Solve ``u o x = w`` for ``x`` in the Jordan algebra of the cone."""
    det = u[0] * u[0] - u[1:] @ u[1:]
    x = np.empty_like(w)
    x[0] = (u[0] * w[0] - u[1:] @ w[1:]) / det
    x[1:] = (w[1:] - x[0] * u[1:]) / u[0]
    return x


def _jnorm2(u):
    u1 = u[1:]
    return u[0] * u[0] - u1 @ u1


def _step_margin(x):
    """Distance-like interiority margin ``x0 - ||x1||`` of a cone block."""
    x1 = x[1:]
    return x[0] - np.sqrt(x1 @ x1)


def _step_to_boundary(x, dx):
    """Largest step with ``x + a dx`` staying in the cone (block arrays)."""
    if x.size == 1:
        return np.inf if dx[0] >= 0.0 else -x[0] / dx[0]
    nx = np.sqrt(x[1:] @ x[1:])
    # product form: direct x0^2 - |x1|^2 cancels to zero near the boundary
    C = (x[0] - nx) * (x[0] + nx)
    A = _jnorm2(dx)
    B = 2.0 * (x[0] * dx[0] - x[1:] @ dx[1:])
    if abs(A) < 1e-300:
        return np.inf if B >= 0 else -C / B
    disc = B * B - 4.0 * A * C
    if A > 0:
        if disc < 0 or B >= 0:
            return np.inf
        # smaller root in the cancellation-free form
        return 2.0 * C / (-B + np.sqrt(disc))
    return (-B - np.sqrt(disc)) / (2.0 * A)


class _Blocks:
    """Slice bookkeeping for a product of second-order cones."""

    def __init__(self, dims: Sequence[int]):
        self.dims = list(dims)
        self.slices = []
        at = 0
        for d in dims:
            self.slices.append(slice(at, at + d))
            at += d
        self.total = at
        self.degree = sum(1 if d == 1 else 2 for d in dims)
        self.identity = np.zeros(at)
        for sl in self.slices:
            self.identity[sl.start] = 1.0

    def min_step(self, x, dx):
        return min(_step_to_boundary(x[sl], dx[sl]) for sl in self.slices)


def _nt_scaling(blocks: _Blocks, s, lam):
    """Per-block NT scaling matrices W, their inverses, and scaled point.

    W is the symmetric scaling with ``W lam == W^{-1} s``; its normalized
    part is the square root of the hyperbolic Householder reflector.
    """
    dtype = s.dtype
    Ws, Winvs = [], []
    lam_scaled = np.empty_like(s)
    for sl in blocks.slices:
        sb, lb = s[sl], lam[sl]
        ns = np.sqrt(sb[1:] @ sb[1:])
        nl = np.sqrt(lb[1:] @ lb[1:])
        ms, ml = sb[0] - ns, lb[0] - nl
        if ms <= 0.0 or ml <= 0.0:
            raise _ConeBoundary
        # product form avoids cancellation near the boundary
        a = np.sqrt(ms * (sb[0] + ns))
        b = np.sqrt(ml * (lb[0] + nl))
        sbar, lbar = sb / a, lb / b
        gamma = np.sqrt((1.0 + sbar @ lbar) / 2.0)
        w = (sbar + np.concatenate(([lbar[0]], -lbar[1:]))) / (2.0 * gamma)
        eta = np.sqrt(a / b)
        d = sl.stop - sl.start
        Wbar = np.empty((d, d), dtype=dtype)
        Wbar[0, 0] = w[0]
        Wbar[0, 1:] = w[1:]
        Wbar[1:, 0] = w[1:]
        Wbar[1:, 1:] = (np.eye(d - 1, dtype=dtype)
                        + np.outer(w[1:], w[1:]) / (1.0 + w[0]))
        W = eta * Wbar
        # inverse via J Wbar J / eta  (Wbar^2 is the reflector 2ww' - J)
        Winv = Wbar.copy()
        Winv[0, 1:] = -Winv[0, 1:]
        Winv[1:, 0] = -Winv[1:, 0]
        Winv /= eta
        Ws.append(W)
        Winvs.append(Winv)
        lam_scaled[sl] = W @ lb
    return Ws, Winvs, lam_scaled


class _ConeBoundary(Exception):
    """Iterate touched the cone boundary; stop iterating cleanly."""


def _farkas(G, h, A, b, p, lam, nu):
    """Normalized primal-infeasibility certificate quality of ``(lam, nu)``."""
    lam_norm = float(np.max(np.abs(lam)))
    if lam_norm <= 0.0 or not np.isfinite(lam_norm):
        return np.inf, np.inf
    lam_hat = lam / lam_norm
    nu_hat = nu / lam_norm
    cert_res = float(np.max(np.abs(G.T @ lam_hat
                                   + (A.T @ nu_hat if p else 0.0))))
    cert_obj = float(h @ lam_hat + (b @ nu_hat if p else 0.0))
    return cert_res, cert_obj


def solve(prog: ConeProgram, tol: SolverTolerances | None = None) -> SolveReport:
    """Solve the cone program; never raises on solver trouble, reports status.

    Runs in double precision first; degenerate instances whose endgame hits
    the float64 noise floor (non-optimal exit, or optimal with decoded cone
    residuals worse than 1e-10) are retried once in extended precision.
    """
    tol = tol or SolverTolerances()
    with np.errstate(all="ignore"):
        rep = _solve_inner(prog, tol, np.float64)
        retry = rep.status in ("max_iters", "numerical_failure")
        if rep.status == "optimal" and tol.polish_gap <= 1e-12:
            retry = float(np.min(prog.cone_residuals(rep.solution))) < -1e-10
        if retry and not tol.retry_extended:
            retry = False
        if retry:
            rep_ld = _solve_inner(prog, tol, np.longdouble)
            if rep_ld.status in ("optimal", "infeasible") or rep.status != "optimal":
                rep = rep_ld
        return rep


_RANK = {"optimal": 0, "infeasible": 1, "max_iters": 2, "numerical_failure": 3}


def _solve_inner(prog: ConeProgram, tol: SolverTolerances,
                 dtype=np.float64) -> SolveReport:
    d = prog.cost.size
    p = prog.eq_dim
    c = prog.cost.astype(dtype)
    A, b = prog.G[:p].astype(dtype), prog.h[:p].astype(dtype)
    G, h = prog.G[p:].astype(dtype), prog.h[p:].astype(dtype)
    blocks = _Blocks(prog.cone_dims)
    blocks.identity = blocks.identity.astype(dtype)
    K = blocks.total
    N = d + p + K
    if dtype is np.float64:
        kernel_ldl = ldl_solve
        reg_size = REG
    else:
        kernel_ldl = _slow_ldl_solve
        reg_size = 1e-13

    KKT = np.zeros((N, N), dtype=dtype)
    KKT[:d, d:d + p] = A.T
    KKT[d:d + p, :d] = A
    KKT[:d, d + p:] = G.T
    KKT[d + p:, :d] = G
    reg = np.concatenate([np.full(d, reg_size, dtype=dtype),
                          np.full(p + K, -reg_size, dtype=dtype)])

    # least-squares initialization: minimize ||s|| s.t. Az=b, Gz+s=h for the
    # primal and ||lam|| s.t. G'lam + A'nu + c = 0 for the dual, then shift
    # each onto the interior along the central ray of the cone product
    KKT0 = KKT.copy()
    KKT0[d + p:, d + p:] = -np.eye(K, dtype=dtype)
    KKT0[np.arange(N), np.arange(N)] += reg
    sol_p = kernel_ldl(
        KKT0, np.concatenate([np.zeros(d, dtype=dtype), b, h])[:, None])[:, 0]
    sol_d = kernel_ldl(
        KKT0, np.concatenate([-c, np.zeros(p + K, dtype=dtype)])[:, None])[:, 0]
    z = sol_p[:d]
    nu = sol_d[d:d + p]
    s = -sol_p[d + p:]
    lam = sol_d[d + p:]
    for vec in (s, lam):
        shift = -min(_step_margin(vec[sl]) for sl in blocks.slices)
        if shift >= 0.0:
            vec += (1.0 + shift) * blocks.identity

    def residuals(z, nu, s, lam):
        r_dual = c + (A.T @ nu if p else 0.0) + G.T @ lam
        r_eq = A @ z - b if p else np.zeros(0, dtype=dtype)
        r_pri = G @ z + s - h
        return r_dual, r_eq, r_pri

    def measures(z, nu, s, lam):
        r_dual, r_eq, r_pri = residuals(z, nu, s, lam)
        pres = max(float(np.max(np.abs(r_eq))) if p else 0.0,
                   float(np.max(np.abs(r_pri))))
        dres = float(np.max(np.abs(r_dual)))
        gap = float(s @ lam)
        return pres, dres, gap

    def hc_margins(zv):
        sv = h - G @ zv
        return min(_step_margin(sv[sl]) for sl in blocks.slices)

    def direction(z, nu, s, lam, mehrotra=True):
        """One scaled Newton direction; raises _ConeBoundary off the path."""
        Ws, Winvs, lam_sc = _nt_scaling(blocks, s, lam)
        KKT_dense = KKT.copy()
        for W, sl in zip(Ws, blocks.slices):
            rows = slice(d + p + sl.start, d + p + sl.stop)
            KKT_dense[rows, rows] = -(W @ W)
        KKT_dense[np.arange(N), np.arange(N)] += reg
        r_dual, r_eq, r_pri = residuals(z, nu, s, lam)
        gap = float(s @ lam)
        mu = gap / blocks.degree

        def kkt_solve(ds_target):
            blam = -r_pri.copy()
            for W, sl in zip(Ws, blocks.slices):
                blam[sl] -= W @ _jsolve(lam_sc[sl], ds_target[sl])
            rhs = np.concatenate([-r_dual, -r_eq, blam])
            sol = kernel_ldl(KKT_dense, rhs[:, None])[:, 0]
            resid = rhs - KKT_dense @ sol
            if float(np.max(np.abs(resid))) > 1e-11 * (1.0 + float(np.max(np.abs(rhs)))):
                sol += kernel_ldl(KKT_dense, resid[:, None])[:, 0]
            if not np.all(np.isfinite(sol)):
                raise _ConeBoundary
            dz, dnu, dlam = sol[:d], sol[d:d + p], sol[d + p:]
            ds = -r_pri - G @ dz
            return dz, dnu, dlam, ds

        ds_target = np.empty(K, dtype=dtype)
        for sl in blocks.slices:
            ds_target[sl] = -_jprod(lam_sc[sl], lam_sc[sl])
        dz, dnu, dlam, ds = kkt_solve(ds_target)
        if not mehrotra or mu <= 0.0:
            return dz, dnu, dlam, ds
        alpha_aff = min(1.0, blocks.min_step(s, ds), blocks.min_step(lam, dlam))
        mu_aff = float((s + alpha_aff * ds) @ (lam + alpha_aff * dlam)) / blocks.degree
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))
        for W, Winv, sl in zip(Ws, Winvs, blocks.slices):
            ds_target[sl] -= _jprod(Winv @ ds[sl], W @ dlam[sl])
            ds_target[sl.start] += sigma * mu
        return kkt_solve(ds_target)

    status = "max_iters"
    achieved = False
    achieved_at = None
    best = None          # (score, z, nu, s, lam)
    pres_hist = []
    iters = 0
    for it in range(tol.max_iters):
        iters = it + 1
        pres, dres, gap = measures(z, nu, s, lam)
        if not np.isfinite(pres + dres + gap):
            status = "numerical_failure"
            break
        scale = max(1.0, abs(float(c @ z)))
        score = max(pres, dres) + gap / scale
        if best is None or score < best[0]:
            best = (score, z.copy(), nu.copy(), s.copy(), lam.copy())
        if pres <= tol.feas and dres <= tol.feas and gap <= tol.gap * scale:
            if not achieved:
                achieved, achieved_at = True, it
            # keep polishing so solution coordinates and decoded cone
            # residuals sit well below the reporting tolerances; bounded
            # effort, stops at the target or via boundary/step stagnation
            res_floor = max(1e-12, 10.0 * tol.polish_gap)
            if ((gap <= tol.polish_gap * scale
                 and pres <= res_floor and dres <= res_floor)
                    or it - achieved_at >= 10):
                break

        # normalized Farkas certificate for primal infeasibility; the
        # relative threshold keeps feasible problems (bounded solutions)
        # from false-firing, corroborated by a stalled primal residual (it
        # cannot vanish on infeasible data, while on feasible data it is
        # still falling when the certificate looks transiently good)
        pres_hist.append(pres)
        stalled = (len(pres_hist) > 6
                   and pres > 1e-4 * (1.0 + float(np.max(np.abs(h))))
                   and pres > 0.5 * pres_hist[-6])
        if not achieved and stalled:
            cert_res, cert_obj = _farkas(G, h, A, b, p, lam, nu)
            if cert_obj <= -1e-2 and cert_res <= 1e-7 * (-cert_obj):
                status = "infeasible"
                break

        try:
            dz, dnu, dlam, ds = direction(z, nu, s, lam)
        except _ConeBoundary:
            break
        alpha = min(1.0, 0.99 * min(blocks.min_step(s, ds),
                                    blocks.min_step(lam, dlam)))
        if not np.isfinite(alpha) or alpha <= 1e-14:
            break

        # the step formula can graze the boundary in floating point;
        # backtrack until both iterates keep margins above the rounding
        # noise of their own scale, else stop and let finishing clean up
        floor = 100.0 * float(np.finfo(dtype).eps)

        def interior(vec, dvec):
            for sl in blocks.slices:
                blk = vec[sl] + alpha * dvec[sl]
                if _step_margin(blk) <= floor * (1.0 + float(np.max(np.abs(blk)))):
                    return False
            return True

        for _ in range(10):
            if interior(s, ds) and interior(lam, dlam):
                break
            alpha *= 0.5
        else:
            break
        z = z + alpha * dz
        nu = nu + alpha * dnu
        lam = lam + alpha * dlam
        s = s + alpha * ds

    if best is not None and status != "infeasible":
        _, z, nu, s, lam = best
    if status in ("max_iters", "numerical_failure") and not achieved:
        pres, _, _ = measures(z, nu, s, lam)
        if pres > 1e-4 * (1.0 + float(np.max(np.abs(h)))):
            cert_res, cert_obj = _farkas(G, h, A, b, p, lam, nu)
            if cert_obj <= -1e-2 and cert_res <= 1e-6 * (-cert_obj):
                status = "infeasible"

    # finishing steps: pure centering-free Newton steps from the best
    # iterate; a full step may land on or negligibly cross the cone
    # boundary, which is accepted when residuals, the gap, and decoded
    # cone membership all improve (classic finishing after the interior
    # iteration stalls)
    if status != "infeasible":
        for _ in range(4):
            pres, dres, gap = measures(z, nu, s, lam)
            if gap <= tol.polish_gap * max(1.0, abs(float(c @ z))):
                break
            try:
                dz, dnu, dlam, ds = direction(z, nu, s, lam, mehrotra=False)
            except _ConeBoundary:
                break
            amax = min(blocks.min_step(s, ds), blocks.min_step(lam, dlam))
            improved = False
            for alpha in (1.0, min(1.0, 0.99 * amax)):
                if not np.isfinite(alpha) or alpha <= 0.0:
                    continue
                z2 = z + alpha * dz
                nu2 = nu + alpha * dnu
                lam2 = lam + alpha * dlam
                s2 = s + alpha * ds
                pres2, dres2, gap2 = measures(z2, nu2, s2, lam2)
                if not np.isfinite(pres2 + dres2 + gap2):
                    continue
                decoded = hc_margins(z2)
                if (pres2 <= tol.feas and dres2 <= tol.feas
                        and abs(gap2) < 0.9 * abs(gap)
                        and decoded >= -1e-11
                        and min(_step_margin(s2[sl])
                                for sl in blocks.slices) >= -1e-11):
                    z, nu, lam, s = z2, nu2, lam2, s2
                    improved = True
                    break
            if not improved:
                break

    pres, dres, gap = measures(z, nu, s, lam)
    if status != "infeasible":
        if pres <= tol.feas and dres <= tol.feas \
                and gap <= tol.gap * max(1.0, abs(float(c @ z))):
            status = "optimal"
        elif status == "max_iters" and iters < tol.max_iters:
            status = "numerical_failure"
    return SolveReport(solution=np.asarray(z, dtype=np.float64),
                       status=status, iterations=iters,
                       primal_residual=float(pres), dual_residual=float(dres),
                       duality_gap=float(gap))


@dataclass(frozen=True)
class BruteForceResult:
    u: float
    value: float
    feasible: bool


def brute_force_1d(cost: Callable[[np.ndarray], np.ndarray],
                   constraints: Sequence[Callable[[np.ndarray], np.ndarray]],
                   lo: float = -50.0, hi: float = 50.0,
                   step: float = 1e-4) -> BruteForceResult:
    """Exhaustive grid minimization for scalar-input problems.

    Constraints are feasible where they evaluate ``>= 0``.  All callables
    must accept vectorized inputs.  Used as the independent test oracle for
    the cone solver; deliberately naive.
    """
    grid = np.arange(lo, hi + 0.5 * step, step)
    mask = np.ones(grid.shape, dtype=bool)
    for fn in constraints:
        mask &= np.asarray(fn(grid)) >= 0.0
    if not np.any(mask):
        return BruteForceResult(u=np.nan, value=np.inf, feasible=False)
    feas = grid[mask]
    vals = np.asarray(cost(feas), dtype=float)
    k = int(np.argmin(vals))
    return BruteForceResult(u=float(feas[k]), value=float(vals[k]), feasible=True)


def dump_program(prog: ConeProgram, path) -> None:
    """Plain-text row-major dump for external cross-checking."""
    with open(path, "w") as fh:
        fh.write(f"vars {prog.cost.size} eq {prog.eq_dim} "
                 f"cones {' '.join(map(str, prog.cone_dims))}\n")
        fh.write("cost " + " ".join(f"{v:.17g}" for v in prog.cost) + "\n")
        for row, off in zip(prog.G, prog.h):
            fh.write(" ".join(f"{v:.17g}" for v in row)
                     + f" | {off:.17g}\n")
