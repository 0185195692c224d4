"""QUBO backends: exhaustive enumeration and a simulated distributed
variational eigensolver (register layout, layered Ry/Rz + CNOT ansatz,
parameter-shift gradients, ADAM, shot sampling).

Bit/qubit order is big-endian: qubit 0 is the most significant bit of a
basis-state index, so enumeration order is lexicographic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .qubo import Qubo, all_bitstrings

__all__ = [
    "TooLarge",
    "NonFinite",
    "SizeMismatch",
    "ArityMismatch",
    "IsingHamiltonian",
    "RegisterLayout",
    "AnsatzSpec",
    "DvqeConfig",
    "SolveReport",
    "brute_force_solve",
    "qubo_to_ising",
    "allocate_qubits",
    "default_register_sizes",
    "dvqe_solve",
    "energy_expectation",
    "statevector",
    "parameter_shift_gradient",
    "accept_if_better",
    "accept_per_block",
    "block_energies",
]

BRUTE_MAX_VARS = 26
STATEVECTOR_MAX_QUBITS = 20


class TooLarge(ValueError):
    pass


class NonFinite(RuntimeError):
    pass


class SizeMismatch(ValueError):
    pass


class ArityMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ising form


@dataclass(eq=False)
class IsingHamiltonian:
    """H(s) = offset + h.s + sum_{i<j} J_ij s_i s_j with s in {+1,-1}, s = 1 - 2x."""

    n: int
    h: np.ndarray
    J: dict[tuple[int, int], float]
    offset: float

    def coupling_arrays(self):
        keys = sorted(self.J)
        return (np.array([k[0] for k in keys], dtype=np.int64),
                np.array([k[1] for k in keys], dtype=np.int64),
                np.array([self.J[k] for k in keys], dtype=float))

    def energy(self, s) -> float | np.ndarray:
        S = np.atleast_2d(np.asarray(s, dtype=float))
        rows, cols, vals = self.coupling_arrays()
        e = S @ self.h + self.offset
        if vals.size:
            e = e + (S[:, rows] * S[:, cols]) @ vals
        return float(e[0]) if np.ndim(s) == 1 else e

    def diagonal(self, qubits=None, with_offset: bool = True) -> np.ndarray:
        """Energies of all computational basis states of ``qubits`` (default all),
        counting only fields and couplings inside that set."""
        qubits = np.arange(self.n) if qubits is None else np.asarray(qubits, dtype=np.int64)
        k = len(qubits)
        if k > STATEVECTOR_MAX_QUBITS:
            raise TooLarge(f"{k} qubits exceed the statevector limit of {STATEVECTOR_MAX_QUBITS}")
        pos = {int(q): a for a, q in enumerate(qubits)}
        S = 1.0 - 2.0 * all_bitstrings(k)
        e = S @ self.h[qubits]
        for (i, j), val in self.J.items():
            if i in pos and j in pos:
                e = e + val * S[:, pos[i]] * S[:, pos[j]]
        if with_offset:
            e = e + self.offset
        return e


def qubo_to_ising(qb: Qubo) -> IsingHamiltonian:
    """Substitute x = (1 - s)/2; energies agree identically."""
    h = -0.5 * qb.c.copy()
    J: dict[tuple[int, int], float] = {}
    off = 0.5 * float(qb.c.sum()) + qb.offset
    for (i, j), q in qb.couplings.items():
        J[(i, j)] = q / 4.0
        h[i] -= q / 4.0
        h[j] -= q / 4.0
        off += q / 4.0
    return IsingHamiltonian(qb.n, h, J, off)


# ---------------------------------------------------------------------------
# registers


@dataclass(frozen=True)
class RegisterLayout:
    sizes: tuple[int, ...]
    registers: tuple[tuple[int, ...], ...]
    qubit_register: tuple[int, ...]
    cut_pairs: tuple[tuple[int, int], ...]

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def n_cut(self) -> int:
        return len(self.cut_pairs)


def default_register_sizes(n: int, size: int = 3) -> list[int]:
    sizes = [size] * (n // size)
    if n % size:
        sizes.append(n % size)
    return sizes


def allocate_qubits(ham: IsingHamiltonian | Qubo, register_sizes) -> RegisterLayout:
    """Greedy placement of variables into fixed-size registers.

    Variables are visited by decreasing total |J| (ties to the lower index)
    and placed in the non-full register that cuts the fewest couplings to
    already-placed variables. Remaining ties prefer the register holding the
    most coupling weight to the variable, then the emptiest, then the lowest index.
    """
    sizes = [int(s) for s in register_sizes]
    n = ham.n
    if any(s < 1 for s in sizes) or sum(sizes) != n:
        raise SizeMismatch(f"register sizes {sizes} do not partition {n} qubits")
    J = ham.J if isinstance(ham, IsingHamiltonian) else {k: v / 4.0 for k, v in ham.couplings.items()}
    nbrs: list[dict[int, float]] = [dict() for _ in range(n)]
    for (i, j), val in J.items():
        if val != 0.0:
            nbrs[i][j] = nbrs[i].get(j, 0.0) + abs(val)
            nbrs[j][i] = nbrs[j].get(i, 0.0) + abs(val)
    degree = [sum(d.values()) for d in nbrs]
    order = sorted(range(n), key=lambda k: (-degree[k], k))
    where = [-1] * n
    members: list[list[int]] = [[] for _ in sizes]
    for var in order:
        best = None
        for r, cap in enumerate(sizes):
            free = cap - len(members[r])
            if free == 0:
                continue
            cut = 0
            affinity = 0.0
            for nb, w in nbrs[var].items():
                if where[nb] == -1:
                    continue
                if where[nb] == r:
                    affinity += w
                else:
                    cut += 1
            key = (cut, -affinity, -free, r)
            if best is None or key < best:
                best = key
        r = best[3]
        where[var] = r
        members[r].append(var)
    cut_pairs = tuple(sorted((i, j) for (i, j), val in J.items() if val != 0.0 and where[i] != where[j]))
    return RegisterLayout(
        sizes=tuple(sizes),
        registers=tuple(tuple(sorted(m)) for m in members),
        qubit_register=tuple(where),
        cut_pairs=cut_pairs,
    )


# ---------------------------------------------------------------------------
# circuit simulation


@dataclass(frozen=True)
class AnsatzSpec:
    """Layered circuit: per layer an Ry then Rz on every qubit, then CNOT
    chains inside each register, then one CNOT per cut coupling.

    ``theta`` has shape (depth, n, 2): [..., 0] is the Ry angle, [..., 1] the Rz angle.
    """

    depth: int
    theta: np.ndarray
    entangle: bool = True
    seed: int | None = None

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 3 or th.shape[0] != self.depth or th.shape[2] != 2:
            raise ValueError(f"theta must have shape (depth, n, 2), got {th.shape}")
        if not np.all(np.isfinite(th)):
            raise NonFinite("non-finite ansatz angles")
        object.__setattr__(self, "theta", th)

    @property
    def n_params(self) -> int:
        return int(self.theta.size)

    @classmethod
    def random(cls, n: int, depth: int, seed: int, scale: float = 0.1, entangle: bool = True) -> "AnsatzSpec":
        rng = np.random.default_rng(seed)
        return cls(depth, rng.uniform(-scale, scale, (depth, n, 2)), entangle, seed)


def _cnot_perm(n: int, pairs) -> np.ndarray:
    """Index map equivalent to applying the CNOTs ``pairs`` (control, target) in order."""
    dim = 1 << n
    idx = np.arange(dim, dtype=np.int64)
    comp = idx.copy()
    for a, b in pairs:
        ca, tb = 1 << (n - 1 - a), 1 << (n - 1 - b)
        m = np.where(idx & ca, idx ^ tb, idx)
        comp = comp[m]
    return comp


def _rot_matrices(theta: np.ndarray) -> np.ndarray:
    """Rz(phi) Ry(th) for angle pairs of shape (..., 2) -> (..., 2, 2)."""
    th, ph = theta[..., 0], theta[..., 1]
    c, s = np.cos(th / 2), np.sin(th / 2)
    em, ep = np.exp(-0.5j * ph), np.exp(0.5j * ph)
    U = np.empty(theta.shape[:-1] + (2, 2), dtype=complex)
    U[..., 0, 0] = em * c
    U[..., 0, 1] = -em * s
    U[..., 1, 0] = ep * s
    U[..., 1, 1] = ep * c
    return U


class _Circuit:
    """Simulator for one group of qubits with a fixed gate pattern."""

    def __init__(self, n: int, depth: int, entangle_pairs):
        self.n = n
        self.depth = depth
        self.perm = _cnot_perm(n, entangle_pairs) if entangle_pairs else None

    def run(self, theta: np.ndarray, check_norm: bool = False) -> np.ndarray:
        """theta (..., depth, n, 2) -> statevectors (..., 2^n)."""
        n = self.n
        batch = theta.shape[:-3]
        psi = np.zeros(batch + (1 << n,), dtype=complex)
        psi[..., 0] = 1.0
        U = _rot_matrices(theta)
        for layer in range(self.depth):
            for k in range(n):
                view = psi.reshape(batch + (1 << k, 2, 1 << (n - k - 1)))
                psi = np.einsum("...ab,...xbz->...xaz", U[..., layer, k, :, :], view).reshape(batch + (1 << n,))
                if check_norm:
                    _assert_norm(psi)
            if self.perm is not None:
                psi = psi[..., self.perm]
                if check_norm:
                    _assert_norm(psi)
        return psi


def _assert_norm(psi):
    err = np.max(np.abs(np.sum(np.abs(psi) ** 2, axis=-1) - 1.0))
    if err > 1e-10:
        raise AssertionError(f"statevector norm drift {err:.3e}")


def _chain_pairs(layout: RegisterLayout):
    """Nearest-neighbour CNOTs inside each register with alternating
    orientation: q0 -> q1, q2 -> q1, q2 -> q3, q4 -> q3, ...

    On a 3-qubit register this keeps |100>, |110> and |001> one rotation
    away from |000>, so training from near-zero angles is not trapped
    behind the commitment patterns a micro-QUBO usually prefers.
    """
    pairs = []
    for reg in layout.registers:
        for k in range(len(reg) - 1):
            a, b = reg[k], reg[k + 1]
            pairs.append((a, b) if k % 2 == 0 else (b, a))
    return pairs


def _groups(layout: RegisterLayout, entangle: bool):
    """Independent qubit groups: registers joined by a cut coupling.

    Joined registers share cross-register gates (or, without entanglers, a
    Hamiltonian term), so they are simulated together. Returns a list of
    (qubits, local entangler pairs), ordered by smallest qubit.
    """
    nreg = len(layout.registers)
    parent = list(range(nreg))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in layout.cut_pairs:
        ri, rj = find(layout.qubit_register[i]), find(layout.qubit_register[j])
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    grouped: dict[int, list[int]] = {}
    for r in range(nreg):
        grouped.setdefault(find(r), []).extend(layout.registers[r])
    out = []
    chain = _chain_pairs(layout) if entangle else []
    cross = list(layout.cut_pairs) if entangle else []
    for qs in grouped.values():
        qs = sorted(qs)
        pos = {q: a for a, q in enumerate(qs)}
        local = [(pos[a], pos[b]) for a, b in chain if a in pos]
        local += [(pos[a], pos[b]) for a, b in cross if a in pos]
        out.append((np.array(qs, dtype=np.int64), tuple(local)))
    out.sort(key=lambda g: int(g[0][0]))
    return out


def _check_group_sizes(groups):
    big = max((len(q) for q, _ in groups), default=0)
    if big > STATEVECTOR_MAX_QUBITS:
        raise TooLarge(f"a simulated group needs {big} qubits (limit {STATEVECTOR_MAX_QUBITS})")


def statevector(layout: RegisterLayout, spec: AnsatzSpec, check_norm: bool = False) -> np.ndarray:
    """Global statevector of the full circuit (no factorisation), n <= 20."""
    n = layout.n
    if n > STATEVECTOR_MAX_QUBITS:
        raise TooLarge(f"{n} qubits exceed the statevector limit of {STATEVECTOR_MAX_QUBITS}")
    pairs = (_chain_pairs(layout) + list(layout.cut_pairs)) if spec.entangle else []
    return _Circuit(n, spec.depth, pairs).run(spec.theta, check_norm=check_norm)


def energy_expectation(ham: IsingHamiltonian, layout: RegisterLayout, spec: AnsatzSpec) -> float:
    """Exact <psi(theta)|H|psi(theta)>, offset included.

    The circuit factorises over qubit groups that share no gate, so each
    group's state is simulated separately; H is diagonal, so the
    expectation is the probability-weighted sum of basis energies.
    """
    if spec.theta.shape[1] != ham.n or layout.n != ham.n:
        raise SizeMismatch("ansatz, layout and Hamiltonian sizes differ")
    groups = _groups(layout, spec.entangle)
    _check_group_sizes(groups)
    _check_separable(ham, groups)
    total = ham.offset
    for qs, pairs in groups:
        psi = _Circuit(len(qs), spec.depth, pairs).run(spec.theta[:, qs, :])
        total += float(np.abs(psi) ** 2 @ ham.diagonal(qs, with_offset=False))
    return float(total)


def _check_separable(ham: IsingHamiltonian, groups):
    gid = np.empty(ham.n, dtype=np.int64)
    for g, (qs, _) in enumerate(groups):
        gid[qs] = g
    for (i, j), val in ham.J.items():
        if val != 0.0 and gid[i] != gid[j]:
            raise AssertionError("coupling crosses independent qubit groups")


def _shift_batch(theta: np.ndarray) -> np.ndarray:
    """theta (G, d, n, 2) -> (G, 1 + 2P, d, n, 2): base, +pi/2 shifts, -pi/2 shifts."""
    G = theta.shape[0]
    P = theta[0].size
    flat = theta.reshape(G, 1, P)
    eye = np.eye(P)[None] * (np.pi / 2)
    out = np.concatenate([flat, flat + eye, flat - eye], axis=1)
    return out.reshape((G, 1 + 2 * P) + theta.shape[1:])


def parameter_shift_gradient(ham: IsingHamiltonian, layout: RegisterLayout, spec: AnsatzSpec) -> np.ndarray:
    """d<H>/dtheta with the same shape as ``spec.theta``."""
    grad = np.zeros_like(spec.theta)
    groups = _groups(layout, spec.entangle)
    _check_group_sizes(groups)
    for qs, pairs in groups:
        circ = _Circuit(len(qs), spec.depth, pairs)
        th = spec.theta[:, qs, :][None]
        psi = circ.run(_shift_batch(th))
        e = np.abs(psi) ** 2 @ ham.diagonal(qs, with_offset=False)
        P = th[0].size
        g = 0.5 * (e[0, 1:1 + P] - e[0, 1 + P:])
        grad[:, qs, :] = g.reshape(th.shape[1:])
    return grad


# ---------------------------------------------------------------------------
# reports


@dataclass
class SolveReport:
    bitstring: tuple[int, ...]
    energy: float
    histogram: dict[str, int]
    iterations: int
    expectation: float
    grad_norms: tuple[float, ...]
    telegate_ops: int
    backend: str
    wall_time: float = field(default=0.0, compare=False)

    @property
    def x(self) -> np.ndarray:
        return np.array(self.bitstring, dtype=np.int8)

    def to_text(self) -> str:
        lines = [
            f"backend {self.backend}",
            f"bitstring {''.join(map(str, self.bitstring))}",
            f"energy {self.energy!r}",
            f"iterations {self.iterations}",
            f"expectation {self.expectation!r}",
            f"telegate_ops {self.telegate_ops}",
            f"wall_time {self.wall_time:.6f}",
            "histogram_top10",
        ]
        top = sorted(self.histogram.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
        lines.extend(f"  {b} {c}" for b, c in top)
        return "\n".join(lines) + "\n"


def _bits_str(x) -> str:
    return "".join("1" if b else "0" for b in x)


# ---------------------------------------------------------------------------
# brute force


def _argmin_first(E: np.ndarray, axis=0) -> np.ndarray:
    """Index of the first entry within rounding distance of the minimum."""
    emin = E.min(axis=axis, keepdims=True)
    tol = 1e-12 * np.maximum(1.0, np.abs(emin))
    return np.argmax(E <= emin + tol, axis=axis)


def _bits_le(k: int) -> np.ndarray:
    """All assignments ordered by the integer sum_i x_i 2^i (variable 0 least significant)."""
    return np.ascontiguousarray(all_bitstrings(k)[:, ::-1])


def _le_rank(bits: np.ndarray) -> np.ndarray:
    return bits.astype(np.int64) @ (np.int64(1) << np.arange(bits.shape[-1], dtype=np.int64))


def brute_force_solve(qb: Qubo, max_vars: int = BRUTE_MAX_VARS) -> SolveReport:
    """Exact minimiser by enumeration of each connected component.

    The size guard applies per component. Ties resolve to the assignment
    with the smallest sum_i x_i 2^i, so (1,0) wins over (0,1).
    """
    t0 = time.perf_counter()
    comps = qb.components()
    big = max((len(c) for c in comps), default=0)
    if big > max_vars:
        raise TooLarge(f"component of {big} variables exceeds the brute-force limit of {max_vars}")
    x = np.zeros(qb.n, dtype=np.int8)
    by_size: dict[int, list[np.ndarray]] = {}
    for comp in comps:
        by_size.setdefault(len(comp), []).append(comp)
    Qfull = None
    for k, group in by_size.items():
        if k <= 10:
            idx = np.stack(group)  # (G, k)
            bits = _bits_le(k)
            E = bits @ qb.c[idx].T  # (2^k, G)
            if k > 1 and qb.couplings:
                if Qfull is None:
                    Qfull = _sparse_upper(qb)
                Qloc = np.stack([Qfull[np.ix_(c, c)].toarray() for c in group])
                E = E + np.einsum("sk,gkl,sl->sg", bits, Qloc, bits)
            best = _argmin_first(E, axis=0)
            x[idx] = bits[best]
        else:
            for comp in group:
                x[comp] = _enumerate_component(qb.subqubo(comp))
    e = qb.energy(x)
    return SolveReport(
        bitstring=tuple(int(b) for b in x),
        energy=float(e),
        histogram={_bits_str(x): 1},
        iterations=0,
        expectation=float(e),
        grad_norms=(),
        telegate_ops=0,
        backend="brute",
        wall_time=time.perf_counter() - t0,
    )


def _sparse_upper(qb: Qubo):
    rows, cols, vals = qb.coupling_arrays()
    return sp.csr_matrix((vals, (rows, cols)), shape=(qb.n, qb.n))


def _enumerate_component(sub: Qubo, chunk_bits: int = 16) -> np.ndarray:
    """Chunked enumeration in increasing sum_i x_i 2^i order."""
    k = sub.n
    lo = min(k, chunk_bits)
    low = _bits_le(lo)
    rest = k - lo
    best_e, best_x = np.inf, None
    X = np.empty((low.shape[0], k), dtype=np.int8)
    X[:, :lo] = low
    for hi in range(1 << rest):
        X[:, lo:] = [(hi >> a) & 1 for a in range(rest)]
        E = sub.energy(X)
        j = int(_argmin_first(E))
        if best_x is None or E[j] < best_e - 1e-12 * max(1.0, abs(best_e)):
            best_e, best_x = float(E[j]), X[j].copy()
    return best_x


# ---------------------------------------------------------------------------
# variational solver


@dataclass(frozen=True)
class DvqeConfig:
    depth: int = 2
    learning_rate: float = 0.1
    max_iters: int = 100
    shots: int = 1024
    seed: int = 0
    init_scale: float = 0.1
    entangle: bool = True
    grad_tol: float = 1e-9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.depth < 1 or self.max_iters < 0 or self.shots < 1:
            raise ValueError("depth and shots must be >= 1 and max_iters >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def dvqe_solve(qb: Qubo, register_sizes=None, config: DvqeConfig | None = None) -> SolveReport:
    """Train the layered ansatz with ADAM on exact expectations, then sample.

    Registers joined by cross-register gates form one simulated group; groups
    share no gate, so the global state is their product and every group is
    simulated on its own statevector. ADAM acts per parameter, so training the
    groups side by side in one loop is the same as training the global vector.
    The returned bitstring takes, per group, the lowest-energy sampled pattern.
    """
    cfg = config or DvqeConfig()
    t0 = time.perf_counter()
    n = qb.n
    if register_sizes is None:
        register_sizes = default_register_sizes(n)
    ham = qubo_to_ising(qb)
    layout = allocate_qubits(ham, register_sizes)
    groups = _groups(layout, cfg.entangle)
    _check_group_sizes(groups)
    _check_separable(ham, groups)

    rng = np.random.default_rng(cfg.seed)
    theta = rng.uniform(-cfg.init_scale, cfg.init_scale, (cfg.depth, n, 2))
    d = cfg.depth

    # stack groups that share a gate pattern
    classes: dict[tuple, list[int]] = {}
    for g, (qs, pairs) in enumerate(groups):
        classes.setdefault((len(qs), pairs), []).append(g)
    sims = []
    for (k, pairs), members in classes.items():
        idx = np.stack([groups[g][0] for g in members])  # (G, k)
        diag = np.stack([ham.diagonal(groups[g][0], with_offset=False) for g in members])
        sims.append((_Circuit(k, d, pairs), idx, diag))

    cross_per_circuit = d * layout.n_cut if cfg.entangle else 0
    executions = 0

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    grad_norms: list[float] = []
    scale = 1.0 + float(np.max([np.abs(diag).max() for _, _, diag in sims], initial=0.0))
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad = np.zeros_like(theta)
        for circ, idx, diag in sims:
            th = np.transpose(theta[:, idx, :], (1, 0, 2, 3))  # (G, d, k, 2)
            psi = circ.run(_shift_batch(th))
            e = np.einsum("gbs,gs->gb", np.abs(psi) ** 2, diag)
            P = th[0].size
            g = 0.5 * (e[:, 1:1 + P] - e[:, 1 + P:])
            grad[:, idx, :] = np.transpose(g.reshape(th.shape), (1, 0, 2, 3))
        executions += 1 + 2 * theta.size
        gnorm = float(np.linalg.norm(grad))
        grad_norms.append(gnorm)
        if not np.isfinite(gnorm):
            raise NonFinite(f"gradient diverged at iteration {it}")
        if gnorm <= cfg.grad_tol * scale:
            it -= 1
            break
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad**2
        mh = m / (1 - cfg.beta1**it)
        vh = v / (1 - cfg.beta2**it)
        theta = theta - cfg.learning_rate * mh / (np.sqrt(vh) + cfg.adam_eps)
        if not np.all(np.isfinite(theta)):
            raise NonFinite(f"parameters diverged at iteration {it}")

    # final state, expectation and sampling
    executions += 1
    expectation = ham.offset
    x = np.zeros(n, dtype=np.int8)
    shots = np.zeros((cfg.shots, n), dtype=np.int8)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(groups))
    probs_by_group: dict[int, np.ndarray] = {}
    for (circ, idx, diag), members in zip(sims, classes.values()):
        th = np.transpose(theta[:, idx, :], (1, 0, 2, 3))
        pr = np.abs(circ.run(th)) ** 2
        expectation += float(np.sum(pr * diag))
        for a, g in enumerate(members):
            probs_by_group[g] = (pr[a], diag[a])
    for g, (qs, _) in enumerate(groups):
        pr, diag = probs_by_group[g]
        pr = pr / pr.sum()
        samples = np.random.default_rng(seeds[g]).choice(pr.size, size=cfg.shots, p=pr)
        k = len(qs)
        bits = all_bitstrings(k)
        shots[:, qs] = bits[samples]
        seen = np.unique(samples)
        # lowest energy among the sampled patterns, ties as in brute force
        seen = seen[np.argsort(_le_rank(bits[seen]), kind="stable")]
        best = seen[_argmin_first(diag[seen])]
        x[qs] = bits[best]
    if not math.isfinite(expectation):
        raise NonFinite("non-finite expectation")
    uniq, counts = np.unique(shots, axis=0, return_counts=True)
    hist = {_bits_str(row): int(c) for row, c in zip(uniq, counts)}
    return SolveReport(
        bitstring=tuple(int(b) for b in x),
        energy=float(qb.energy(x)),
        histogram=hist,
        iterations=it,
        expectation=float(expectation),
        grad_norms=tuple(grad_norms),
        telegate_ops=int(cross_per_circuit * executions),
        backend="dvqe",
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# safeguard


def accept_if_better(candidate, incumbent, qb: Qubo) -> np.ndarray:
    """Keep the incumbent unless the candidate has strictly lower energy."""
    cand = np.asarray(candidate, dtype=np.int8).reshape(-1)
    inc = np.asarray(incumbent, dtype=np.int8).reshape(-1)
    if cand.size != qb.n or inc.size != qb.n:
        raise ArityMismatch(f"bitstrings of length {cand.size}/{inc.size} for a {qb.n}-variable QUBO")
    return cand.copy() if qb.energy(cand) < qb.energy(inc) else inc.copy()


def block_energies(x, qb: Qubo, block_of: np.ndarray, n_blocks: int) -> np.ndarray:
    """Energy of each block of variables (offset excluded); couplings must stay inside blocks."""
    x = np.asarray(x, dtype=float)
    rows, cols, vals = qb.coupling_arrays()
    if vals.size and np.any(block_of[rows] != block_of[cols]):
        raise ValueError("coupling crosses a block boundary")
    out = np.zeros(n_blocks)
    np.add.at(out, block_of, qb.c * x)
    if vals.size:
        np.add.at(out, block_of[rows], vals * x[rows] * x[cols])
    return out


def accept_per_block(candidate, incumbent, qb: Qubo, blocks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the safeguard independently to each block of variables.

    Returns (accepted bitstring, accepted block energies, incumbent block energies).
    """
    cand = np.asarray(candidate, dtype=np.int8).reshape(-1)
    inc = np.asarray(incumbent, dtype=np.int8).reshape(-1)
    if cand.size != qb.n or inc.size != qb.n:
        raise ArityMismatch(f"bitstrings of length {cand.size}/{inc.size} for a {qb.n}-variable QUBO")
    block_of = np.full(qb.n, -1, dtype=np.int64)
    for b, blk in enumerate(blocks):
        block_of[np.asarray(blk, dtype=np.int64)] = b
    if np.any(block_of < 0):
        raise ValueError("blocks must cover every variable")
    ec = block_energies(cand, qb, block_of, len(blocks))
    ei = block_energies(inc, qb, block_of, len(blocks))
    take = ec < ei
    out = np.where(take[block_of], cand, inc).astype(np.int8)
    return out, np.where(take, ec, ei), ei
