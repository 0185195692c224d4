"""Three-block consensus ADMM: relaxed QP, binary proxies via QUBOs, slacks,
then dual ascent, repeated until the consensus residuals vanish."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .block1 import (
    AdmmState,
    assemble_block1_qp,
    block1_linear_cost,
    constraint_violations,
    evaluate_augmented_lagrangian,
    extract_solution,
    initial_state,
    pack_variables,
    uc_cost,
    with_fixed_binaries,
)
from .model import UcInstance
from .qp import QpSettings, QpStatus, QpWorkspace
from .qubo import (
    PenaltyWeights,
    Qubo,
    assemble_batched_qubo,
    build_all_micro,
    hardness_score,
    partition_three_qubos,
    plan_batches,
)
from .qubo import _block_diagonal
from .solvers import (
    BRUTE_MAX_VARS,
    DvqeConfig,
    SolveReport,
    accept_if_better,
    accept_per_block,
    brute_force_solve,
    default_register_sizes,
    dvqe_solve,
)

__all__ = [
    "MODES",
    "BACKENDS",
    "AdmmError",
    "AdmmConfig",
    "IterationTrace",
    "Schedule",
    "ConvergenceReport",
    "run_admm",
    "update_slacks",
    "update_duals",
    "compute_residuals",
    "lyapunov_value",
    "TRACE_HEADER",
]

log = logging.getLogger(__name__)

MODES = ("monolithic", "three", "micro", "batched")
BACKENDS = ("brute", "dvqe")
TRACE_HEADER = (
    "iter", "pri_y", "pri_u", "pri_v", "dual", "auglag", "cost", "lyapunov",
    "block2_energy", "telegate_ops", "t_block1_ms", "t_block2_ms",
)


class AdmmError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdmmConfig:
    rho: tuple[float, float, float] = (9e5, 9e5, 9e5)
    beta: tuple[float, float, float] = (2e6, 2e6, 2e6)
    eps_pri: float = 1e-3
    eps_dual: float = 1e-3
    max_iter: int = 4000
    mode: str = "batched"
    batches: int = 3
    unit_coherent: bool = False
    backend: str = "brute"
    weights: PenaltyWeights | None = None  # default: fractions of rho_y
    dvqe: DvqeConfig = field(default_factory=DvqeConfig)
    seed: int = 0
    kappa: float | None = None  # default: 2·max rho
    qp: QpSettings = field(default_factory=QpSettings)
    threads: int | None = None  # default: DUC_THREADS or 1
    compare_exact: bool = False  # also run brute force to score DVQE matches

    def __post_init__(self):
        rho = tuple(float(r) for r in np.broadcast_to(np.asarray(self.rho, float), (3,)))
        beta = tuple(float(b) for b in np.broadcast_to(np.asarray(self.beta, float), (3,)))
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "beta", beta)
        errors = []
        if min(rho) <= 0:
            errors.append("rho must be positive")
        if min(beta) <= 0:
            errors.append("beta must be positive")
        if not (self.eps_pri > 0 and self.eps_dual > 0):
            errors.append("eps must be positive")
        if self.max_iter < 1:
            errors.append("max_iter must be >= 1")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}")
        if self.backend not in BACKENDS:
            errors.append(f"backend must be one of {BACKENDS}")
        if self.batches < 1:
            errors.append("batches must be >= 1")
        if self.kappa is not None and self.kappa < 2 * max(rho):
            errors.append("kappa must be at least 2·max(rho)")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def penalty(self) -> PenaltyWeights:
        return self.weights if self.weights is not None else PenaltyWeights.from_rho(self.rho[0])

    @property
    def lyapunov_kappa(self) -> float:
        return self.kappa if self.kappa is not None else 2.0 * max(self.rho)

    def n_threads(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        try:
            return max(1, int(os.environ.get("DUC_THREADS", "1")))
        except ValueError:
            return 1


@dataclass
class IterationTrace:
    iters: list[int] = field(default_factory=list)
    pri_y: list[float] = field(default_factory=list)
    pri_u: list[float] = field(default_factory=list)
    pri_v: list[float] = field(default_factory=list)
    dual: list[float] = field(default_factory=list)
    auglag: list[float] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)
    lyapunov: list[float] = field(default_factory=list)
    block2_candidate: list[float] = field(default_factory=list)
    block2_incumbent: list[float] = field(default_factory=list)
    block2_energy: list[float] = field(default_factory=list)
    telegate_ops: list[int] = field(default_factory=list)
    exact_match: list[float] = field(default_factory=list)
    t_block1_ms: list[float] = field(default_factory=list)
    t_block2_ms: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iters)

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def lyapunov_increases(self, rel_tol: float = 1e-6) -> int:
        V = self.lyapunov
        return sum(1 for a, b in zip(V[:-1], V[1:]) if b > a + rel_tol * abs(a))

    def to_csv(self, path=None, timings: bool = False) -> str:
        """CSV text with the fixed header. Timing columns stay empty unless
        ``timings`` is set, so repeated runs produce identical files."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(len(self)):
            w.writerow([
                self.iters[k],
                repr(self.pri_y[k]), repr(self.pri_u[k]), repr(self.pri_v[k]), repr(self.dual[k]),
                repr(self.auglag[k]), repr(self.cost[k]), repr(self.lyapunov[k]),
                repr(self.block2_energy[k]), self.telegate_ops[k],
                f"{self.t_block1_ms[k]:.3f}" if timings else "",
                f"{self.t_block2_ms[k]:.3f}" if timings else "",
            ])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class Schedule:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    r_up: np.ndarray
    r_down: np.ndarray


@dataclass
class ConvergenceReport:
    status: str  # "Converged" | "MaxIter"
    schedule: Schedule
    cost: float
    residuals: tuple[float, float, float, float]
    trace: IterationTrace
    iterations: int
    state: AdmmState
    dispatch_status: str
    violations: dict[str, float]
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "Converged"


# ---------------------------------------------------------------------------
# block 3, duals, diagnostics


def update_slacks(state: AdmmState) -> AdmmState:
    """Minimise the slack terms in closed form, then project onto ξ ≥ 0."""
    rho = state.rho[:, None, None]
    beta = state.beta[:, None, None]
    raw = -(state.lam + rho * (state.rel - state.z)) / (beta + rho)
    state.xi = np.maximum(raw, 0.0)
    return state


def update_duals(state: AdmmState) -> AdmmState:
    state.lam = state.lam + state.rho[:, None, None] * state.residual
    return state


def compute_residuals(state: AdmmState, prev: AdmmState) -> tuple[float, float, float, float]:
    """Consensus norms per family and the ρ-scaled change of Z − Ξ."""
    r = state.residual
    pri = [float(np.linalg.norm(r[f])) for f in range(3)]
    d = (state.z - prev.z) - (state.xi - prev.xi)
    dual = float(np.linalg.norm(state.rho[:, None, None] * d))
    return pri[0], pri[1], pri[2], dual


def lyapunov_value(inst: UcInstance, state: AdmmState, kappa: float) -> float:
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    r = state.residual
    return evaluate_augmented_lagrangian(inst, state) + 0.5 * kappa * float(np.sum(r * r))


# ---------------------------------------------------------------------------
# block 2


@dataclass
class _Block2Result:
    z: np.ndarray
    candidate: float
    incumbent: float
    accepted: float
    telegate_ops: int
    exact_match: float


def _seed_for(seed: int, it: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, it, k]).generate_state(1)[0])


class _Block2:
    def __init__(self, inst: UcInstance, cfg: AdmmConfig):
        self.inst = inst
        self.cfg = cfg
        self.y0 = np.asarray(inst.initial.y0, float)
        self.weights = cfg.penalty
        self.threads = cfg.n_threads()
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _solve_all(self, qubos: list[Qubo], it: int) -> list[tuple[SolveReport, float | None]]:
        cfg = self.cfg

        def one(args):
            k, qb = args
            if cfg.backend == "brute":
                rep = brute_force_solve(qb)
                return rep, (1.0 if cfg.compare_exact else None)
            dcfg = replace(cfg.dvqe, seed=_seed_for(cfg.seed, it, k))
            rep = dvqe_solve(qb, default_register_sizes(qb.n), dcfg)
            match = None
            if cfg.compare_exact and max((len(c) for c in qb.components()), default=0) <= BRUTE_MAX_VARS:
                ref = brute_force_solve(qb)
                match = float(rep.energy <= ref.energy + 1e-9 * max(1.0, abs(ref.energy)))
            return rep, match

        items = list(enumerate(qubos))
        if self.pool is None:
            return [one(a) for a in items]
        return list(self.pool.map(one, items))

    def run(self, state: AdmmState, it: int) -> _Block2Result:
        mode = self.cfg.mode
        N, T = state.z.shape[1:]
        inc_z = state.z.astype(np.int8)
        if mode == "three":
            qubos = list(partition_three_qubos(state))
            results = self._solve_all(qubos, it)
            new = np.empty_like(inc_z)
            cand_e = inc_e = acc_e = 0.0
            parts = []
            for f, (qb, (rep, _)) in enumerate(zip(qubos, results)):
                inc = inc_z[f].reshape(-1)
                acc, e_acc, e_inc = accept_per_block(rep.x, inc, qb, [[k] for k in range(qb.n)])
                new[f] = acc.reshape(N, T)
                parts.append((rep.energy, math.fsum(e_inc) + qb.offset, math.fsum(e_acc) + qb.offset))
            cand_e, inc_e, acc_e = (math.fsum(p[j] for p in parts) for j in range(3))
            return self._finish(new, cand_e, inc_e, acc_e, results)

        micros = build_all_micro(state, self.weights, self.y0)
        whole = _block_diagonal(micros)
        inc_vec = np.transpose(inc_z, (1, 2, 0)).reshape(-1)  # (i, t, family)
        if mode == "monolithic":
            results = self._solve_all([whole], it)
            rep = results[0][0]
            acc = accept_if_better(rep.x, inc_vec, whole)
            e_acc = whole.energy(acc)
            e_inc = whole.energy(inc_vec)
            return self._finish(self._unvec(acc, N, T), rep.energy, e_inc, e_acc, results)

        if mode == "micro":
            groups = [[(m.unit, m.time)] for m in micros]
        else:
            scores = {(m.unit, m.time): hardness_score(m) for m in micros}
            plan = plan_batches(scores, self.cfg.batches, self.cfg.unit_coherent)
            groups = [list(b) for b in plan.batches if b]
        qubos = [assemble_batched_qubo(micros, g) for g in groups]
        results = self._solve_all(qubos, it)
        cand = np.empty(3 * N * T, dtype=np.int8)
        for g, (rep, _) in zip(groups, results):
            x = rep.x
            for a, (i, t) in enumerate(g):
                base = 3 * (i * T + t)
                cand[base: base + 3] = x[3 * a: 3 * a + 3]
        triplets = [[3 * k, 3 * k + 1, 3 * k + 2] for k in range(N * T)]
        acc, e_acc, e_inc = accept_per_block(cand, inc_vec, whole, triplets)
        off = whole.offset
        cand_e = math.fsum(rep.energy for rep, _ in results)
        return self._finish(self._unvec(acc, N, T), cand_e, math.fsum(e_inc) + off,
                            math.fsum(e_acc) + off, results)

    @staticmethod
    def _unvec(vec, N, T):
        return np.transpose(np.asarray(vec, dtype=np.int8).reshape(N, T, 3), (2, 0, 1))

    def _finish(self, z, cand, inc, acc, results) -> _Block2Result:
        matches = [m for _, m in results if m is not None]
        rate = float(np.mean(matches)) if matches else float("nan")
        tele = int(sum(rep.telegate_ops for rep, _ in results))
        return _Block2Result(z.astype(float), float(cand), float(inc), float(acc), tele, rate)


# ---------------------------------------------------------------------------
# driver


def run_admm(inst: UcInstance, config: AdmmConfig | None = None, callback=None) -> ConvergenceReport:
    """Run the three-block scheme until the stopping rule or ``max_iter``.

    Convergence requires every primal residual ≤ ε_pri, the dual residual
    ≤ ε_dual and every slack ≤ ε_pri, so that the proxies are a binary
    point of the relaxed feasible set up to ε.
    """
    cfg = config or AdmmConfig()
    t_start = time.perf_counter()
    state = initial_state(inst, cfg.rho, cfg.beta)
    state.check(inst)
    qp = assemble_block1_qp(inst, state)
    ws = QpWorkspace(qp, cfg.qp)
    ws.warm_start(pack_variables(inst, state.rel, state.p, state.r_up, state.r_down))
    block2 = _Block2(inst, cfg)
    trace = IterationTrace()
    kappa = cfg.lyapunov_kappa

    best_state, best_key = None, math.inf
    status = "MaxIter"
    res = (math.inf,) * 4
    it = 0
    try:
        for it in range(1, cfg.max_iter + 1):
            prev = state.copy()
            t0 = time.perf_counter()
            try:
                ws.update_q(block1_linear_cost(inst, state))
                sol = ws.solve()
            except Exception as exc:  # pragma: no cover - defensive
                raise AdmmError(f"iteration {it}: Block-1 solve failed: {exc}") from exc
            if sol.status is QpStatus.INFEASIBLE:
                raise AdmmError(f"iteration {it}: Block-1 QP reported infeasible")
            if sol.status is not QpStatus.SOLVED:
                log.warning("iteration %d: Block-1 QP stopped at %s", it, sol.status.value)
            relax = extract_solution(sol, inst)
            state.rel = relax.rel
            state.p, state.r_up, state.r_down = relax.p, relax.r_up, relax.r_down
            t1 = time.perf_counter()
            try:
                b2 = block2.run(state, it)
            except Exception as exc:
                raise AdmmError(f"iteration {it}: Block-2 solve failed: {exc}") from exc
            state.z = b2.z
            t2 = time.perf_counter()
            update_slacks(state)
            update_duals(state)
            res = compute_residuals(state, prev)
            L = evaluate_augmented_lagrangian(inst, state)
            V = L + 0.5 * kappa * float(np.sum(state.residual ** 2))
            trace.append(
                iters=it, pri_y=res[0], pri_u=res[1], pri_v=res[2], dual=res[3], auglag=L,
                cost=uc_cost(inst, state.z[0], state.z[1], state.z[2], state.p), lyapunov=V,
                block2_candidate=b2.candidate, block2_incumbent=b2.incumbent,
                block2_energy=b2.accepted, telegate_ops=b2.telegate_ops, exact_match=b2.exact_match,
                t_block1_ms=1e3 * (t1 - t0), t_block2_ms=1e3 * (t2 - t1),
            )
            if callback is not None:
                callback(it, state, trace)
            key = max(res[:3])
            if key < best_key:
                best_key, best_state = key, state.copy()
            if (max(res[:3]) <= cfg.eps_pri and res[3] <= cfg.eps_dual
                    and float(state.xi.max(initial=0.0)) <= cfg.eps_pri):
                status = "Converged"
                break
    finally:
        block2.close()

    final = state if status == "Converged" else best_state
    if status != "Converged":
        r = final.residual
        res = tuple(float(np.linalg.norm(r[f])) for f in range(3)) + (float("nan"),)
    schedule, dispatch_status = _recover_dispatch(inst, final, ws, cfg)
    cost = uc_cost(inst, schedule.y, schedule.u, schedule.v, schedule.p)
    viol = constraint_violations(inst, np.stack([schedule.y, schedule.u, schedule.v]).astype(float),
                                 schedule.p, schedule.r_up, schedule.r_down)
    return ConvergenceReport(
        status=status,
        schedule=schedule,
        cost=cost,
        residuals=tuple(float(x) for x in res),
        trace=trace,
        iterations=it,
        state=final,
        dispatch_status=dispatch_status,
        violations=viol,
        wall_time=time.perf_counter() - t_start,
    )


def _recover_dispatch(inst: UcInstance, state: AdmmState, ws: QpWorkspace, cfg: AdmmConfig):
    """Re-solve Block 1 with commitments pinned to the proxies."""
    z = np.rint(state.z).astype(np.int8)
    qp = assemble_block1_qp(inst, state)
    fixed = with_fixed_binaries(qp, z.astype(float))
    fws = QpWorkspace(fixed, cfg.qp)
    fws.warm_start(pack_variables(inst, z.astype(float), state.p, state.r_up, state.r_down))
    sol = fws.solve()
    relax = extract_solution(sol, inst)
    sched = Schedule(y=z[0].copy(), u=z[1].copy(), v=z[2].copy(),
                     p=relax.p, r_up=relax.r_up, r_down=relax.r_down)
    return sched, sol.status.value
