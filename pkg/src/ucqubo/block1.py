"""Block 1: the continuous dispatch/reserve QP and the augmented Lagrangian.

Variable layout of the assembled QP (``NT = N*T``, unit-major, ``k = i*T + t``)::

    [ y (NT) | u (NT) | v (NT) | p_1 | ru_1 | rd_1 | ... | p_S | ru_S | rd_S ]

Consensus quantities (relaxed commitments, proxies, slacks, duals) carry a
leading family axis in the order y, u, v and are never indexed by scenario.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .model import UcInstance
from .qp import INF, QpSettings, QpSolution, QuadraticProgram

__all__ = [
    "FAMILIES",
    "AdmmState",
    "RelaxedSolution",
    "DimensionError",
    "LayoutError",
    "initial_state",
    "assemble_block1_qp",
    "block1_linear_cost",
    "evaluate_augmented_lagrangian",
    "uc_cost",
    "extract_solution",
    "constraint_violations",
    "pack_variables",
    "with_fixed_binaries",
]

log = logging.getLogger(__name__)

FAMILIES = ("y", "u", "v")


class DimensionError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass
class AdmmState:
    """All iterates of the three-block scheme.

    ``rel``, ``z``, ``xi``, ``lam`` have shape (3, N, T); ``p``, ``r_up``,
    ``r_down`` have shape (N, T, S); ``rho`` and ``beta`` hold one value
    per family.
    """

    rel: np.ndarray
    p: np.ndarray
    r_up: np.ndarray
    r_down: np.ndarray
    z: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    rho: np.ndarray
    beta: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        N, T, S = self.p.shape
        return N, T, S

    @property
    def residual(self) -> np.ndarray:
        """Consensus residual rel − z + ξ per family."""
        return self.rel - self.z + self.xi

    def copy(self) -> "AdmmState":
        return AdmmState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})

    def check(self, inst: UcInstance) -> None:
        N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
        for name in ("rel", "z", "xi", "lam"):
            if getattr(self, name).shape != (3, N, T):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(3, N, T)}")
        for name in ("p", "r_up", "r_down"):
            if getattr(self, name).shape != (N, T, S):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(N, T, S)}")
        if np.shape(self.rho) != (3,) or np.shape(self.beta) != (3,):
            raise DimensionError("rho and beta need one entry per family")


@dataclass
class RelaxedSolution:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    r_up: np.ndarray
    r_down: np.ndarray
    objective: float

    @property
    def rel(self) -> np.ndarray:
        return np.stack([self.y, self.u, self.v])


def initial_state(inst: UcInstance, rho, beta) -> AdmmState:
    """Starting point: relaxed (y,u,v)=(0.5,0,0), p tiled from L/N, zero
    reserves/slacks/duals; proxies follow the t=0 commitment."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    rel = np.zeros((3, N, T))
    rel[0] = 0.5
    L = np.asarray(inst.scenarios.net_load, float)  # (T, S)
    p = np.broadcast_to(L[None, :, :] / N, (N, T, S)).copy()
    z = np.zeros((3, N, T))
    z[0] = np.asarray(inst.initial.y0, float)[:, None]
    return AdmmState(
        rel=rel,
        p=p,
        r_up=np.zeros((N, T, S)),
        r_down=np.zeros((N, T, S)),
        z=z,
        xi=np.zeros((3, N, T)),
        lam=np.zeros((3, N, T)),
        rho=np.broadcast_to(np.asarray(rho, float), (3,)).copy(),
        beta=np.broadcast_to(np.asarray(beta, float), (3,)).copy(),
    )


# ---------------------------------------------------------------------------
# assembly


class _Rows:
    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.lo: list[np.ndarray] = []
        self.hi: list[np.ndarray] = []
        self.blocks: dict[str, slice] = {}
        self.m = 0

    def add(self, name, n_rows, entries, lo, hi):
        """``entries`` is a list of (local_row, col, val) array triples."""
        for r, c, v in entries:
            r, c, v = np.broadcast_arrays(np.asarray(r), np.asarray(c), np.asarray(v, float))
            self.rows.append(r.ravel() + self.m)
            self.cols.append(c.ravel())
            self.vals.append(v.ravel())
        self.lo.append(np.broadcast_to(np.asarray(lo, float), (n_rows,)).ravel())
        self.hi.append(np.broadcast_to(np.asarray(hi, float), (n_rows,)).ravel())
        self.blocks[name] = slice(self.m, self.m + n_rows)
        self.m += n_rows

    def matrix(self):
        A = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.m, self.n_cols),
        ).tocsc()
        A.sum_duplicates()
        return A, np.concatenate(self.lo), np.concatenate(self.hi)


def _layout(N, T, S):
    NT = N * T
    k = np.arange(NT).reshape(N, T)
    fam = {f: j * NT + k for j, f in enumerate(FAMILIES)}
    scen = []
    for s in range(S):
        base = 3 * NT + 3 * NT * s
        scen.append({"p": base + k, "ru": base + NT + k, "rd": base + 2 * NT + k})
    return fam, scen


def block1_linear_cost(inst: UcInstance, state: AdmmState) -> np.ndarray:
    """Linear term q of the Block-1 QP for the current proxies/slacks/duals."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    NT = N * T
    q = np.zeros(3 * NT * (1 + S))
    fixed = np.stack([inst.gen_array("cost_fixed"), inst.gen_array("startup_cost"),
                      inst.gen_array("shutdown_cost")])  # (3, N)
    rho = state.rho[:, None, None]
    qf = fixed[:, :, None] + state.lam + rho * (state.xi - state.z)
    q[: 3 * NT] = qf.reshape(-1)
    B = inst.gen_array("cost_linear")
    pi = np.asarray(inst.scenarios.pi, float)
    for s in range(S):
        base = 3 * NT + 3 * NT * s
        q[base: base + NT] = np.repeat(pi[s] * B, T)
    return q


def assemble_block1_qp(inst: UcInstance, state: AdmmState) -> QuadraticProgram:
    """Block-1 QP: augmented Lagrangian in (y,u,v,p,r) under the UC constraints."""
    state.check(inst)
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    NT = N * T
    n = 3 * NT * (1 + S)
    fam, scen = _layout(N, T, S)

    C = inst.gen_array("cost_quad")
    pi = np.asarray(inst.scenarios.pi, float)
    pdiag = np.zeros(n)
    for j in range(3):
        pdiag[j * NT:(j + 1) * NT] = state.rho[j]
    for s in range(S):
        pdiag[scen[s]["p"].ravel()] = np.repeat(2.0 * pi[s] * C, T)
    P = sp.diags(pdiag).tocsc()
    q = block1_linear_cost(inst, state)

    pmin, pmax = inst.gen_array("p_min"), inst.gen_array("p_max")
    RU, RD = inst.gen_array("ramp_up"), inst.gen_array("ramp_down")
    SU, SD = inst.gen_array("startup_ramp"), inst.gen_array("shutdown_ramp")
    Uup = inst.gen_array("min_up").astype(int)
    Ddn = inst.gen_array("min_down").astype(int)
    y0 = np.asarray(inst.initial.y0, float)
    p0 = np.asarray(inst.initial.p0, float)
    sc = inst.scenarios
    L = np.asarray(sc.net_load, float)
    dtau = float(sc.delta_tau)

    Y, U, V = fam["y"], fam["u"], fam["v"]
    rows = _Rows(n)
    loc = np.arange(NT).reshape(N, T)
    pminK = np.repeat(pmin, T).reshape(N, T)
    pmaxK = np.repeat(pmax, T).reshape(N, T)

    rows.add("bounds_yuv", 3 * NT, [(np.arange(3 * NT), np.arange(3 * NT), 1.0)], 0.0, 1.0)

    # (1d) logic, (1e) no simultaneous start/stop, (1f)/(1g) minimum up/down
    prevY = np.roll(Y, 1, axis=1)
    tt = np.broadcast_to(np.arange(T), (N, T))
    has_prev = tt > 0
    rows.add("1d", NT, [
        (loc, Y, 1.0), (loc, U, -1.0), (loc, V, 1.0),
        (loc[has_prev], prevY[has_prev], -1.0),
    ], np.where(has_prev, 0.0, y0[:, None]).ravel(), np.where(has_prev, 0.0, y0[:, None]).ravel())
    rows.add("1e", NT, [(loc, U, 1.0), (loc, V, 1.0)], -INF, 1.0)
    f_entries = [(loc, Y, -1.0)]
    g_entries = [(loc, Y, 1.0)]
    for i in range(N):
        for t in range(T):
            ks = np.arange(max(0, t - Uup[i] + 1), t + 1)
            f_entries.append((np.full(ks.size, loc[i, t]), U[i, ks], 1.0))
            ks = np.arange(max(0, t - Ddn[i] + 1), t + 1)
            g_entries.append((np.full(ks.size, loc[i, t]), V[i, ks], 1.0))
    rows.add("1f", NT, f_entries, -INF, 0.0)
    rows.add("1g", NT, g_entries, -INF, 1.0)

    for s in range(S):
        Pp, Ru, Rd = scen[s]["p"], scen[s]["ru"], scen[s]["rd"]
        tag = f"[{s}]"
        # (1b) balance
        rows.add("1b" + tag, T, [(np.broadcast_to(np.arange(T), (N, T)), Pp, 1.0)], L[:, s], L[:, s])
        # (1c) capacity coupled to commitment
        rows.add("1c_lo" + tag, NT, [(loc, Pp, 1.0), (loc, Y, -pminK)], 0.0, INF)
        rows.add("1c_hi" + tag, NT, [(loc, Pp, 1.0), (loc, Y, -pmaxK)], -INF, 0.0)
        # (1h) ramp up: p_t - p_{t-1} - RU y_{t-1} - SU u_t <= 0, t=0 uses (p0, y0)
        prevP = np.roll(Pp, 1, axis=1)
        ru_k = np.repeat(RU, T).reshape(N, T)
        rd_k = np.repeat(RD, T).reshape(N, T)
        su_k = np.repeat(SU, T).reshape(N, T)
        sd_k = np.repeat(SD, T).reshape(N, T)
        hp = has_prev
        hi_h = np.where(hp, 0.0, (p0 + RU * y0)[:, None]).ravel()
        rows.add("1h" + tag, NT, [
            (loc, Pp, 1.0), (loc, U, -su_k),
            (loc[hp], prevP[hp], -1.0), (loc[hp], prevY[hp], -ru_k[hp]),
        ], -INF, hi_h)
        # (1i) ramp down: p_{t-1} - p_t - RD y_t - SD v_t <= 0
        hi_i = np.where(hp, 0.0, -p0[:, None]).ravel()
        rows.add("1i" + tag, NT, [
            (loc, Pp, -1.0), (loc, Y, -rd_k), (loc, V, -sd_k),
            (loc[hp], prevP[hp], 1.0),
        ], -INF, hi_i)
        # (1j),(1k) deliverability
        rows.add("1j" + tag, NT, [(loc, Ru, 1.0), (loc, Pp, 1.0), (loc, Y, -pmaxK)], -INF, 0.0)
        rows.add("1k" + tag, NT, [(loc, Rd, 1.0), (loc, Pp, -1.0), (loc, Y, pminK)], -INF, 0.0)
        # (1l) reserve caps together with r >= 0
        rows.add("1l_up" + tag, NT, [(loc, Ru, 1.0)], 0.0, (ru_k * dtau).ravel())
        rows.add("1l_dn" + tag, NT, [(loc, Rd, 1.0)], 0.0, (rd_k * dtau).ravel())
        # (1m) adequacy
        tN = np.broadcast_to(np.arange(T), (N, T))
        rows.add("1m_up" + tag, T, [(tN, Ru, 1.0)], np.asarray(sc.r_up, float)[:, s], INF)
        rows.add("1m_dn" + tag, T, [(tN, Rd, 1.0)], np.asarray(sc.r_down, float)[:, s], INF)

    A, lo, hi = rows.matrix()
    var_blocks = {f: slice(j * NT, (j + 1) * NT) for j, f in enumerate(FAMILIES)}
    for s in range(S):
        base = 3 * NT + 3 * NT * s
        var_blocks[f"p[{s}]"] = slice(base, base + NT)
        var_blocks[f"ru[{s}]"] = slice(base + NT, base + 2 * NT)
        var_blocks[f"rd[{s}]"] = slice(base + 2 * NT, base + 3 * NT)
    return QuadraticProgram(P=P, q=q, A=A, l=lo, u=hi, var_blocks=var_blocks, con_blocks=rows.blocks)


def pack_variables(inst: UcInstance, rel, p, r_up, r_down) -> np.ndarray:
    """Stack primal arrays into the QP variable vector."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    parts = [np.asarray(rel, float).reshape(-1)]
    for s in range(S):
        parts += [p[:, :, s].reshape(-1), r_up[:, :, s].reshape(-1), r_down[:, :, s].reshape(-1)]
    return np.concatenate(parts)


def extract_solution(sol: QpSolution, inst: UcInstance, eps: float | None = None) -> RelaxedSolution:
    """Unstack the QP vector; nudges y,u,v back into [0,1] when within ``eps``."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    NT = N * T
    x = np.asarray(sol.x, float)
    if x.shape != (3 * NT * (1 + S),):
        raise LayoutError(f"solution has {x.size} entries, layout needs {3 * NT * (1 + S)}")
    eps = QpSettings().eps_abs if eps is None else eps
    rel = x[: 3 * NT].reshape(3, N, T).copy()
    outside = np.maximum(rel - 1.0, -rel).max(initial=0.0)
    if outside > eps:
        log.warning("relaxed commitments leave [0,1] by %.3g (> %.3g)", outside, eps)
    rel = np.clip(rel, 0.0, 1.0)
    p = np.empty((N, T, S))
    ru = np.empty((N, T, S))
    rd = np.empty((N, T, S))
    for s in range(S):
        base = 3 * NT + 3 * NT * s
        p[:, :, s] = x[base: base + NT].reshape(N, T)
        ru[:, :, s] = x[base + NT: base + 2 * NT].reshape(N, T)
        rd[:, :, s] = x[base + 2 * NT: base + 3 * NT].reshape(N, T)
    return RelaxedSolution(y=rel[0], u=rel[1], v=rel[2], p=p, r_up=ru, r_down=rd,
                           objective=float(sol.objective))


# ---------------------------------------------------------------------------
# objective pieces


def uc_cost(inst: UcInstance, y, u, v, p) -> float:
    """Expected operating cost: fixed/startup/shutdown plus π-weighted fuel."""
    A, Sc, H = inst.gen_array("cost_fixed"), inst.gen_array("startup_cost"), inst.gen_array("shutdown_cost")
    B, C = inst.gen_array("cost_linear"), inst.gen_array("cost_quad")
    pi = np.asarray(inst.scenarios.pi, float)
    commit = float(A @ np.sum(y, axis=1) + Sc @ np.sum(u, axis=1) + H @ np.sum(v, axis=1))
    fuel = np.einsum("its,i->ts", p, B) + np.einsum("its,i->ts", p * p, C)
    return commit + float(fuel.sum(axis=0) @ pi)


def evaluate_augmented_lagrangian(inst: UcInstance, state: AdmmState) -> float:
    """Cost plus dual, penalty and proximal terms at the given iterate."""
    r = state.residual
    rho = state.rho[:, None, None]
    beta = state.beta[:, None, None]
    cost = uc_cost(inst, state.rel[0], state.rel[1], state.rel[2], state.p)
    return float(cost + np.sum(state.lam * r) + np.sum(0.5 * rho * r * r)
                 + np.sum(0.5 * beta * state.xi * state.xi))


def constraint_violations(inst: UcInstance, rel, p, r_up, r_down) -> dict[str, float]:
    """Worst violation per constraint family at a given point (0 when satisfied)."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    dummy = initial_state(inst, 1.0, 1.0)
    qp = assemble_block1_qp(inst, dummy)
    x = pack_variables(inst, rel, p, r_up, r_down)
    Ax = qp.A @ x
    viol = np.maximum(qp.l - Ax, 0) + np.maximum(Ax - qp.u, 0)
    out: dict[str, float] = {}
    for name, sl in qp.con_blocks.items():
        key = name.split("[")[0]
        out[key] = max(out.get(key, 0.0), float(viol[sl].max(initial=0.0)))
    return out


def with_fixed_binaries(qp: QuadraticProgram, z: np.ndarray) -> QuadraticProgram:
    """Copy of a Block-1 QP whose commitment rows are pinned to ``z``."""
    l, u = qp.l.copy(), qp.u.copy()
    sl = qp.con_blocks["bounds_yuv"]
    l[sl] = z.reshape(-1)
    u[sl] = z.reshape(-1)
    return replace(qp, l=l, u=u)
