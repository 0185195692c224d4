"""Sparse convex QP solver: minimize ½xᵀPx + qᵀx subject to l ≤ Ax ≤ u.

Operator-splitting iteration (OSQP family). Each step solves the
regularized system (P + σI + AᵀRA) x̃ = rhs, projects onto [l, u] and takes
a dual ascent step. The system is solved either through a sparse
factorization reused across iterations (default) or by diagonally
preconditioned conjugate gradient (``linsys='cg'``). The
problem data are Ruiz-equilibrated first; once the residuals meet the
tolerances the active set is polished with a direct KKT solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "INF",
    "QuadraticProgram",
    "QpSettings",
    "QpSolution",
    "QpStatus",
    "QpWorkspace",
    "solve_qp",
    "dump_qp",
]

log = logging.getLogger(__name__)

INF = 1e20
RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_FACTOR = 1e3


class QpStatus(str, Enum):
    SOLVED = "Solved"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


@dataclass
class QuadraticProgram:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    var_blocks: dict[str, slice] = field(default_factory=dict)
    con_blocks: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P, dtype=float)
        self.A = sp.csc_matrix(self.A, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.l = np.clip(np.asarray(self.l, dtype=float).ravel(), -INF, INF)
        self.u = np.clip(np.asarray(self.u, dtype=float).ravel(), -INF, INF)
        n, m = self.n, self.m
        if self.P.shape != (n, n) or self.A.shape[1] != n:
            raise ValueError(f"inconsistent shapes P{self.P.shape} A{self.A.shape} q{self.q.shape}")
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("bound vectors must match the row count of A")
        if np.any(self.l > self.u):
            bad = int(np.argmax(self.l > self.u))
            raise ValueError(f"l > u at row {bad}")
        if (self.P - self.P.T).count_nonzero() and abs(self.P - self.P.T).max() > 0:
            raise ValueError("P must be symmetric")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iters: int = 20_000
    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 0.1
    adaptive_rho: bool = True
    scaling_iters: int = 10
    cg_tol: float = 1e-7
    cg_max_iters: int = 500
    check_every: int = 10
    polish: bool = True
    eps_pinf: float = 1e-6
    linsys: str = "direct"  # "cg" or "direct"

    def __post_init__(self):
        for name in ("eps_abs", "eps_rel", "max_iters", "sigma", "rho", "cg_tol", "cg_max_iters"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        if self.linsys not in ("cg", "direct"):
            raise ValueError("linsys must be 'cg' or 'direct'")


@dataclass
class QpSolution:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    status: QpStatus
    prim_res: float
    dual_res: float
    iterations: int
    objective: float = float("nan")
    polished: bool = False
    objective_trace: list[float] = field(default_factory=list, repr=False)


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _pcg(matvec, b, x0, inv_diag, tol, max_iters):
    """Preconditioned CG on an SPD operator; stops on ‖r‖∞ ≤ tol."""
    x = x0.copy()
    r = b - matvec(x)
    if _inf_norm(r) <= tol:
        return x, 0
    zr = inv_diag * r
    p = zr.copy()
    rz = r @ zr
    for k in range(1, max_iters + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if _inf_norm(r) <= tol:
            return x, k
        zr = inv_diag * r
        rz_new = r @ zr
        p = zr + (rz_new / rz) * p
        rz = rz_new
    return x, max_iters


class QpWorkspace:
    """Scaled problem data plus solver state that survives across solves.

    Block-1 re-solves change only ``q``; the scaling, the system operator
    and (for ``linsys='direct'``) its factorization are reused.
    """

    def __init__(self, qp: QuadraticProgram, settings: QpSettings | None = None):
        self.qp = qp
        self.settings = settings or QpSettings()
        self._scale()
        self._rho_scalar = self.settings.rho
        self._set_rho(self._rho_scalar)

    # -- setup -----------------------------------------------------------
    def _scale(self):
        qp, st = self.qp, self.settings
        n, m = qp.n, qp.m
        P, A = qp.P.copy(), qp.A.copy()
        D = np.ones(n)
        E = np.ones(m)
        for _ in range(st.scaling_iters):
            col_P = np.asarray(abs(P).max(axis=0).todense()).ravel() if P.nnz else np.zeros(n)
            col_A = np.asarray(abs(A).max(axis=0).todense()).ravel() if A.nnz else np.zeros(n)
            d = np.maximum(col_P, col_A)
            d = np.where(d < 1e-4, 1.0, d)
            d = 1.0 / np.sqrt(np.clip(d, 1e-4, 1e4))
            row_A = np.asarray(abs(A).max(axis=1).todense()).ravel() if A.nnz else np.zeros(m)
            e = np.where(row_A < 1e-4, 1.0, row_A)
            e = 1.0 / np.sqrt(np.clip(e, 1e-4, 1e4))
            Dm, Em = sp.diags(d), sp.diags(e)
            P = (Dm @ P @ Dm).tocsc()
            A = (Em @ A @ Dm).tocsc()
            D *= d
            E *= e
        self.D, self.E = D, E
        self.Ps_unscaled_cost = P
        self.As = A
        self.AsT = A.T.tocsr()
        self._set_cost_scale()
        self.eq_rows = np.abs(qp.u - qp.l) < 1e-10 * np.maximum(1.0, np.abs(qp.l))
        self.free_rows = (qp.l <= -INF) & (qp.u >= INF)
        self.x = np.zeros(n)
        self.z = np.zeros(m)
        self.y = np.zeros(m)
        self._factor = None

    def _set_cost_scale(self):
        qp = self.qp
        P = self.Ps_unscaled_cost
        qs = self.D * qp.q
        col_P = np.asarray(abs(P).max(axis=0).todense()).ravel() if P.nnz else np.zeros(qp.n)
        c = max(float(col_P.mean()) if col_P.size else 0.0, _inf_norm(qs))
        c = 1.0 if c < 1e-4 else 1.0 / min(c, 1e4)
        self.c = c
        self.Ps = (c * P).tocsc()
        self.qs = c * qs
        self.ls = np.where(qp.l <= -INF, -INF, self.E * qp.l)
        self.us = np.where(qp.u >= INF, INF, self.E * qp.u)
        self.P_diag = self.Ps.diagonal()

    def _set_rho(self, rho: float):
        rho = float(np.clip(rho, RHO_MIN, RHO_MAX))
        self._rho_scalar = rho
        r = np.full(self.qp.m, rho)
        r[self.eq_rows] = RHO_EQ_FACTOR * rho
        r[self.free_rows] = RHO_MIN
        self.rho_vec = r
        AtRA_diag = np.asarray(self.As.multiply(self.As).T @ r).ravel()
        self.K_diag = self.P_diag + self.settings.sigma + AtRA_diag
        self._factor = None

    def update_q(self, q: np.ndarray):
        """Replace the linear cost; warm-start state is kept."""
        self.qp.q = np.asarray(q, dtype=float).ravel()
        old_c = self.c
        self._set_cost_scale()
        # duals live in cost-scaled units
        self.y *= self.c / old_c

    def update_bounds(self, l: np.ndarray, u: np.ndarray):
        self.qp.l = np.clip(np.asarray(l, float), -INF, INF)
        self.qp.u = np.clip(np.asarray(u, float), -INF, INF)
        self.ls = np.where(self.qp.l <= -INF, -INF, self.E * self.qp.l)
        self.us = np.where(self.qp.u >= INF, INF, self.E * self.qp.u)
        eq = np.abs(self.qp.u - self.qp.l) < 1e-10 * np.maximum(1.0, np.abs(self.qp.l))
        if np.any(eq != self.eq_rows):
            self.eq_rows = eq
            self._set_rho(self._rho_scalar)

    def warm_start(self, x=None, y=None):
        if x is not None:
            self.x = np.asarray(x, float) / self.D
            self.z = self.As @ self.x
        if y is not None:
            self.y = self.c * np.asarray(y, float) / self.E

    # -- linear system ---------------------------------------------------
    def _matvec(self, v):
        return self.Ps @ v + self.settings.sigma * v + self.AsT @ (self.rho_vec * (self.As @ v))

    def _solve_linsys(self, rhs, x0, tol):
        if self.settings.linsys == "direct":
            if self._factor is None:
                K = (self.Ps + self.settings.sigma * sp.identity(self.qp.n)
                     + self.AsT @ sp.diags(self.rho_vec) @ self.As).tocsc()
                self._factor = spla.splu(K)
            return self._factor.solve(rhs), 1
        return _pcg(self._matvec, rhs, x0, 1.0 / self.K_diag, tol, self.settings.cg_max_iters)

    # -- residuals -------------------------------------------------------
    def _residuals(self, x, z, y):
        """Unscaled primal/dual residuals and their tolerance thresholds."""
        st = self.settings
        Ax = self.As @ x
        Px = self.Ps @ x
        Aty = self.AsT @ y
        Einv = 1.0 / self.E
        prim = _inf_norm(Einv * (Ax - z))
        dual = _inf_norm((Px + self.qs + Aty) / self.D) / self.c
        eps_p = st.eps_abs + st.eps_rel * max(_inf_norm(Einv * Ax), _inf_norm(Einv * z))
        eps_d = st.eps_abs + st.eps_rel / self.c * max(
            _inf_norm(Px / self.D), _inf_norm(Aty / self.D), _inf_norm(self.qs / self.D)
        )
        return prim, dual, eps_p, eps_d

    def _strict_ok(self, x, y) -> tuple[bool, float, float]:
        """Acceptance check in original units: bound violation ≤ eps_abs."""
        st = self.settings
        qp = self.qp
        xu = self.D * x
        yu = self.E * y / self.c
        Ax = qp.A @ xu
        viol = _inf_norm(np.maximum(qp.l - Ax, 0) + np.maximum(Ax - qp.u, 0))
        stat = qp.P @ xu + qp.q + qp.A.T @ yu
        dual = _inf_norm(stat)
        scale = max(_inf_norm(qp.P @ xu), _inf_norm(qp.A.T @ yu), _inf_norm(qp.q), 1.0)
        return viol <= st.eps_abs and dual <= st.eps_abs + st.eps_rel * scale, viol, dual

    def _primal_infeasible(self, dy) -> bool:
        eps = self.settings.eps_pinf
        dy_u = self.E * dy
        norm = _inf_norm(dy_u)
        if norm < 1e-30:
            return False
        if _inf_norm(self.D * (self.AsT @ dy)) > eps * norm:
            return False
        pos, neg = np.maximum(dy, 0), np.minimum(dy, 0)
        if np.any((pos > 0) & (self.us >= INF)) or np.any((neg < 0) & (self.ls <= -INF)):
            return False
        val = self.us @ pos + self.ls @ neg
        return val < -eps * norm

    # -- polishing -------------------------------------------------------
    def _polish(self, x, z, y, rounds: int = 8):
        """Solve the equality-constrained KKT system on a guessed active set.

        Rows violated by the polished point are added and rows whose
        multiplier has the wrong sign are dropped, for a few rounds.
        """
        ls, us = self.ls, self.us
        n = self.qp.n
        low = (z - ls < -y) | self.eq_rows
        up = (us - z < y) & ~self.eq_rows
        tol = self.settings.eps_abs
        for _ in range(rounds):
            act = np.flatnonzero(low | up)
            Aact = self.As[act]
            b = np.where(low[act], ls[act], us[act])
            delta = 1e-9
            Kp = sp.bmat([[self.Ps + delta * sp.identity(n), Aact.T],
                          [Aact, -delta * sp.identity(len(act))]], format="csc")
            K = sp.bmat([[self.Ps, Aact.T], [Aact, None]], format="csc")
            rhs = np.concatenate([-self.qs, b])
            try:
                lu = spla.splu(Kp)
            except RuntimeError:
                return None
            sol = lu.solve(rhs)
            for _ in range(5):
                sol += lu.solve(rhs - K @ sol)
            xp = sol[:n]
            if not np.all(np.isfinite(xp)):
                return None
            yp = np.zeros_like(y)
            yp[act] = sol[n:]
            zp = self.As @ xp
            Einv = 1.0 / self.E
            below = (ls - zp) * Einv > tol
            above = (zp - us) * Einv > tol
            ytol = 1e-9 * max(1.0, float(np.abs(yp).max(initial=0.0)))
            wrong_low = low & ~self.eq_rows & (yp > ytol)
            wrong_up = up & (yp < -ytol)
            if not (below.any() or above.any() or wrong_low.any() or wrong_up.any()):
                return xp, np.clip(zp, ls, us), yp
            low = (low & ~wrong_low) | below
            up = (up & ~wrong_up) | above
        return None

    # -- main loop -------------------------------------------------------
    def solve(self) -> QpSolution:
        st = self.settings
        x, z, y = self.x.copy(), self.z.copy(), self.y.copy()
        z = np.clip(z, self.ls, self.us)
        if st.polish and np.any(y != 0.0):
            # successive Block-1 problems differ only in q, so the previous
            # active set is usually still optimal: try it before iterating
            pol = self._polish(x, z, y)
            if pol is not None:
                okp, violp, dresp = self._strict_ok(pol[0], pol[2])
                if okp:
                    return self._result(*pol, QpStatus.SOLVED, violp, dresp, 0, True, [])
        xt = x.copy()
        y_prev_check = y.copy()
        obj_trace: list[float] = []
        best = np.inf
        prim = dual = np.inf
        cg_tol = 1e-3
        it = 0
        status = QpStatus.MAX_ITERS
        polished = False
        for it in range(1, st.max_iters + 1):
            rho = self.rho_vec
            rhs = st.sigma * x - self.qs + self.AsT @ (rho * z - y)
            xt, _ = self._solve_linsys(rhs, xt, cg_tol)
            zt = self.As @ xt
            x = st.alpha * xt + (1 - st.alpha) * x
            zr = st.alpha * zt + (1 - st.alpha) * z
            z_new = np.clip(zr + y / rho, self.ls, self.us)
            y = y + rho * (zr - z_new)
            z = z_new

            if it % st.check_every and it != st.max_iters:
                continue
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                raise FloatingPointError("QP iterates became non-finite")
            prim, dual, eps_p, eps_d = self._residuals(x, z, y)
            obj = self.qp.objective(self.D * x)
            best = min(best, obj)
            obj_trace.append(best)
            cg_tol = max(st.cg_tol, 0.1 * min(prim, dual) * min(1.0, self.c))
            if prim <= eps_p and dual <= eps_d:
                ok, viol, dres = self._strict_ok(x, y)
                if st.polish:
                    pol = self._polish(x, z, y)
                    if pol is not None:
                        okp, violp, dresp = self._strict_ok(pol[0], pol[2])
                        # a sign-consistent active-set point is the exact optimum, even
                        # when the ε-feasible iterate scores lower by leaning on a bound
                        if okp:
                            x, z, y = pol
                            ok, viol, dres, polished = True, violp, dresp, True
                if ok:
                    prim, dual = viol, dres
                    status = QpStatus.SOLVED
                    break
                # tighten and keep iterating
                cg_tol = max(st.cg_tol * 1e-2, cg_tol * 0.1)
            if self._primal_infeasible(y - y_prev_check):
                status = QpStatus.INFEASIBLE
                break
            y_prev_check = y.copy()
            if st.adaptive_rho and it % (5 * st.check_every) == 0:
                self._adapt_rho(x, z, y)
        return self._result(x, z, y, status, prim, dual, it, polished, obj_trace)

    def _result(self, x, z, y, status, prim, dual, it, polished, obj_trace) -> QpSolution:
        self.x, self.z, self.y = x, z, y
        xu = self.D * x
        sol = QpSolution(
            x=xu,
            z=self.qp.A @ xu,
            y=self.E * y / self.c,
            status=status,
            prim_res=float(prim),
            dual_res=float(dual),
            iterations=it,
            objective=self.qp.objective(xu),
            polished=polished,
            objective_trace=obj_trace,
        )
        if status is not QpStatus.SOLVED:
            log.debug("QP finished with %s after %d iterations (prim %.3g dual %.3g)",
                      status.value, it, prim, dual)
        return sol

    def _adapt_rho(self, x, z, y):
        Ax = self.As @ x
        Px = self.Ps @ x
        Aty = self.AsT @ y
        pn = _inf_norm(Ax - z) / max(_inf_norm(Ax), _inf_norm(z), 1e-10)
        dn = _inf_norm(Px + self.qs + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(self.qs), 1e-10)
        ratio = np.sqrt(pn / max(dn, 1e-30))
        if ratio > 5.0 or ratio < 0.2:
            self._set_rho(self._rho_scalar * ratio)


def solve_qp(qp: QuadraticProgram, settings: QpSettings | None = None,
             warm_start: QpSolution | None = None) -> QpSolution:
    """One-shot solve. ``warm_start`` seeds x and the duals."""
    ws = QpWorkspace(qp, settings)
    if warm_start is not None:
        ws.warm_start(warm_start.x, warm_start.y)
    sol = ws.solve()
    if warm_start is not None and sol.status is QpStatus.SOLVED and warm_start.status is QpStatus.SOLVED:
        # a warm start must never return something worse than itself
        ok, _, _ = ws._strict_ok(warm_start.x / ws.D, ws.c * warm_start.y / ws.E)
        if ok and qp.objective(warm_start.x) < sol.objective - 1e-9 * max(1.0, abs(sol.objective)):
            return replace(warm_start, objective=qp.objective(warm_start.x), iterations=sol.iterations)
    return sol


def dump_qp(qp: QuadraticProgram, path: str | Path) -> Path:
    """Write (P, q, A, l, u) as a matrix-market-style coordinate listing."""
    path = Path(path)
    lines = [f"% quadratic program n={qp.n} m={qp.m}"]

    def block(name, M):
        M = sp.coo_matrix(M)
        lines.append(f"%% {name} {M.shape[0]} {M.shape[1]} {M.nnz}")
        lines.extend(f"{i + 1} {j + 1} {v:.17g}" for i, j, v in zip(M.row, M.col, M.data))

    def vec(name, v):
        lines.append(f"%% {name} {len(v)}")
        lines.extend(f"{x:.17g}" for x in v)

    block("P", sp.triu(qp.P))
    vec("q", qp.q)
    block("A", qp.A)
    vec("l", qp.l)
    vec("u", qp.u)
    path.write_text("\n".join(lines) + "\n")
    return path
