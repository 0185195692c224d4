"""Block-2 binary subproblems: unary coefficients, micro-QUBOs with local
logic penalties, hardness scoring, batching, and the four decompositions.

Energy convention everywhere: ``E(x) = sum_{i<j} Q_ij x_i x_j + c.x + offset``
with each pair counted once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .block1 import AdmmState, FAMILIES

__all__ = [
    "Qubo",
    "MicroQubo",
    "PenaltyWeights",
    "HardnessScore",
    "BatchPlan",
    "InvalidK",
    "unary_coefficients",
    "unary_coefficient_arrays",
    "eta_reference",
    "build_micro_qubo",
    "build_all_micro",
    "hardness_score",
    "plan_batches",
    "assemble_batched_qubo",
    "partition_three_qubos",
    "assemble_monolithic",
    "dumps_qubo",
    "loads_qubo",
    "save_qubo",
    "load_qubo",
    "all_bitstrings",
]


class InvalidK(ValueError):
    pass


def all_bitstrings(n: int) -> np.ndarray:
    """All 2^n assignments in lexicographic (big-endian) order, shape (2^n, n)."""
    idx = np.arange(1 << n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.int8)


@dataclass(eq=False)
class Qubo:
    """Quadratic binary objective with single-counted upper-triangular couplings.

    ``labels`` holds one ``(unit, time, kind)`` tuple per variable.
    """

    n: int
    c: np.ndarray
    couplings: dict[tuple[int, int], float] = field(default_factory=dict)
    offset: float = 0.0
    labels: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.c.shape != (self.n,):
            raise ValueError(f"linear term has length {self.c.size}, expected {self.n}")
        clean: dict[tuple[int, int], float] = {}
        for (i, j), val in self.couplings.items():
            i, j = int(i), int(j)
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"coupling ({i},{j}) out of range")
            if i == j:
                # z^2 = z
                self.c[i] += val
                continue
            if i > j:
                i, j = j, i
            clean[(i, j)] = clean.get((i, j), 0.0) + float(val)
        self.couplings = clean
        self.offset = float(self.offset)
        if self.labels and len(self.labels) != self.n:
            raise ValueError("need one label per variable")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        self._arrays = None

    def coupling_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._arrays is None:
            keys = sorted(self.couplings)
            rows = np.array([k[0] for k in keys], dtype=np.int64)
            cols = np.array([k[1] for k in keys], dtype=np.int64)
            vals = np.array([self.couplings[k] for k in keys], dtype=float)
            self._arrays = (rows, cols, vals)
        return self._arrays

    def energy(self, x) -> float | np.ndarray:
        """Energy of one bitstring (1-D) or of each row of a 2-D array."""
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n:
            raise ValueError(f"bitstring length {X.shape[1]} != {self.n}")
        rows, cols, vals = self.coupling_arrays()
        e = X @ self.c + self.offset
        if vals.size:
            e = e + (X[:, rows] * X[:, cols]) @ vals
        return float(e[0]) if single else e

    def dense_upper(self) -> np.ndarray:
        Q = np.zeros((self.n, self.n))
        rows, cols, vals = self.coupling_arrays()
        Q[rows, cols] = vals
        return Q

    def components(self) -> list[np.ndarray]:
        """Connected components of the coupling graph, each sorted, ordered by smallest index."""
        parent = list(range(self.n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for (i, j), val in self.couplings.items():
            if val != 0.0:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for k in range(self.n):
            groups.setdefault(find(k), []).append(k)
        return [np.array(g, dtype=np.int64) for _, g in sorted(groups.items())]

    def subqubo(self, idx) -> "Qubo":
        """Restriction to the variables ``idx`` (couplings leaving the set are dropped)."""
        idx = [int(k) for k in idx]
        pos = {k: a for a, k in enumerate(idx)}
        coup = {(pos[i], pos[j]): v for (i, j), v in self.couplings.items() if i in pos and j in pos}
        labels = [self.labels[k] for k in idx] if self.labels else []
        return Qubo(len(idx), self.c[idx], coup, 0.0, labels)


@dataclass(frozen=True)
class PenaltyWeights:
    gamma_c: float = 0.0
    gamma_ss: float = 0.0
    gamma_u_y: float = 0.0
    gamma_v_ybar: float = 0.0
    gamma_y: float = 0.0
    gamma_u: float = 0.0
    gamma_v: float = 0.0

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if not (val >= 0.0 and math.isfinite(val)):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")

    @classmethod
    def from_rho(cls, rho: float) -> "PenaltyWeights":
        """Default fractions of the commitment penalty."""
        return cls(
            gamma_c=0.20 * rho,
            gamma_ss=0.10 * rho,
            gamma_u_y=0.05 * rho,
            gamma_v_ybar=0.05 * rho,
            gamma_y=0.10 * rho,
            gamma_u=0.10 * rho,
            gamma_v=0.10 * rho,
        )

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.__dict__.values())


@dataclass(eq=False)
class MicroQubo:
    """Three-variable QUBO over (z^y, z^u, z^v) of one unit and period."""

    qubo: Qubo
    unit: int
    time: int
    eta: float
    anchors: tuple[float, float, float]

    def __post_init__(self):
        want = [(self.unit, self.time, k) for k in FAMILIES]
        if self.qubo.n != 3 or list(self.qubo.labels) != want:
            raise ValueError("micro-QUBO must hold exactly the y,u,v labels of its (unit, time)")

    def energy(self, x):
        return self.qubo.energy(x)


# ---------------------------------------------------------------------------
# coefficients


def unary_coefficient_arrays(state: AdmmState) -> np.ndarray:
    """Per-bit linear coefficients, shape (3, N, T): L(z=1) − L(z=0) of the
    consensus terms with the relaxed primals held fixed."""
    rho = state.rho[:, None, None]
    return -state.lam - rho * (state.rel + state.xi) + 0.5 * rho


def unary_coefficients(state: AdmmState, i: int, t: int) -> tuple[float, float, float]:
    q = unary_coefficient_arrays(state)[:, i, t]
    return float(q[0]), float(q[1]), float(q[2])


def eta_reference(state: AdmmState, y0) -> np.ndarray:
    """Previous-period commitment reference, shape (N, T): the relaxed y of
    period t−1, and the initial commitment for the first period."""
    y = state.rel[0]
    eta = np.empty_like(y)
    eta[:, 0] = np.asarray(y0, dtype=float)
    eta[:, 1:] = y[:, :-1]
    return np.clip(eta, 0.0, 1.0)


def _micro_coefficients(q, w: PenaltyWeights, eta, yh, uh, vh):
    """Linear terms, (yu, yv, uv) couplings and offset of base + penalty.

    Works elementwise on scalars or arrays.
    """
    gc = w.gamma_c
    cy = q[0] + gc * (1 - 2 * eta) + w.gamma_y * (1 - 2 * yh)
    cu = q[1] + gc * (1 + 2 * eta) + w.gamma_u * (1 - 2 * uh) + w.gamma_u_y
    cv = q[2] + gc * (1 - 2 * eta) + w.gamma_v * (1 - 2 * vh)
    qyu = -2 * gc - w.gamma_u_y
    qyv = 2 * gc + w.gamma_v_ybar
    quv = -2 * gc + w.gamma_ss
    off = gc * eta**2 + w.gamma_y * yh**2 + w.gamma_u * uh**2 + w.gamma_v * vh**2
    return (cy, cu, cv), (qyu, qyv, quv), off


def _micro_from_parts(i, t, eta, anchors, lin, quad, off) -> MicroQubo:
    coup = {(0, 1): float(quad[0]), (0, 2): float(quad[1]), (1, 2): float(quad[2])}
    coup = {k: v for k, v in coup.items() if v != 0.0}
    qb = Qubo(3, [float(x) for x in lin], coup, float(off), [(i, t, k) for k in FAMILIES])
    return MicroQubo(qb, i, t, float(eta), tuple(float(a) for a in anchors))


def build_micro_qubo(state: AdmmState, weights: PenaltyWeights, i: int, t: int, eta: float) -> MicroQubo:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0,1], got {eta}")
    q = unary_coefficients(state, i, t)
    yh, uh, vh = (float(state.rel[f, i, t]) for f in range(3))
    lin, quad, off = _micro_coefficients(q, weights, eta, yh, uh, vh)
    return _micro_from_parts(i, t, eta, (yh, uh, vh), lin, quad, off)


def build_all_micro(state: AdmmState, weights: PenaltyWeights, y0) -> list[MicroQubo]:
    """Every micro-QUBO in (i, t) row-major order."""
    q = unary_coefficient_arrays(state)
    eta = eta_reference(state, y0)
    rel = state.rel
    lin, quad, off = _micro_coefficients(q, weights, eta, rel[0], rel[1], rel[2])
    N, T = eta.shape
    out = []
    for i in range(N):
        for t in range(T):
            out.append(_micro_from_parts(
                i, t, eta[i, t], rel[:, i, t],
                [lin[0][i, t], lin[1][i, t], lin[2][i, t]],
                quad, off[i, t],
            ))
    return out


# ---------------------------------------------------------------------------
# hardness and batching


@dataclass(frozen=True)
class HardnessScore:
    total: float
    gap: float
    degeneracy: float
    frustrated: int
    ratio: float
    dynamic_range: float
    weights: tuple[float, float, float, float, float]
    eta_guard: float = 1e-6

    @property
    def components(self) -> tuple[float, float, float, float, float]:
        """The five weighted terms, in order."""
        return (
            1.0 / (self.gap + self.eta_guard),
            self.degeneracy,
            float(self.frustrated),
            self.ratio / (1.0 + self.ratio),
            self.dynamic_range,
        )


_BITS3 = all_bitstrings(3)


def hardness_score(micro: MicroQubo | Qubo, w=(0.2, 0.2, 0.2, 0.2, 0.2), eps: float | None = None,
                   eta_guard: float = 1e-6) -> HardnessScore:
    """Five-term difficulty estimate of a 3-variable QUBO.

    ``eps`` defaults to 0.01·max(1, |E_min|).
    """
    qb = micro.qubo if isinstance(micro, MicroQubo) else micro
    if qb.n != 3:
        raise ValueError("hardness score is defined for 3-variable QUBOs")
    E = np.sort(qb.energy(_BITS3))
    e_min = float(E[0])
    gap = float(E[1] - E[0])
    if eps is None:
        eps = 0.01 * max(1.0, abs(e_min))
    g = int(np.count_nonzero(E <= e_min + eps))
    degeneracy = (g - 1) / 7.0
    Qd = qb.dense_upper()
    J = np.array([Qd[0, 1], Qd[0, 2], Qd[1, 2]]) / 4.0
    frustrated = int(bool(np.all(J != 0.0) and J[0] * J[1] * J[2] > 0.0))
    coup_abs = np.abs([Qd[0, 1], Qd[0, 2], Qd[1, 2]])
    lin_abs = np.abs(qb.c)
    r = float(coup_abs.sum() / (lin_abs.sum() + eta_guard))
    nz = np.concatenate([coup_abs, lin_abs])
    nz = nz[nz > 0.0]
    if nz.size >= 2:
        dyn = float(np.clip(math.log10(nz.max() / nz.min()) / 4.0, 0.0, 1.0))
    else:
        dyn = 0.0
    w = tuple(float(x) for x in w)
    if len(w) != 5:
        raise ValueError("need five weights")
    terms = (1.0 / (gap + eta_guard), degeneracy, float(frustrated), r / (1.0 + r), dyn)
    total = float(sum(wk * tk for wk, tk in zip(w, terms)))
    return HardnessScore(total, gap, degeneracy, frustrated, r, dyn, w, eta_guard)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[tuple[tuple[int, int], ...], ...]
    sums: tuple[float, ...]
    unit_coherent: bool

    @property
    def k(self) -> int:
        return len(self.batches)


def plan_batches(scores: dict[tuple[int, int], HardnessScore | float], K: int,
                 unit_coherent: bool = False) -> BatchPlan:
    """Greedy longest-processing-time packing of (unit, time) pairs into K batches.

    Items are visited by decreasing hardness (ties to the lowest index) and
    each goes to the batch with the smallest running sum (ties to the lowest
    batch). With ``unit_coherent`` the items are whole units with summed scores.
    """
    val = {k: float(s.total if isinstance(s, HardnessScore) else s) for k, s in scores.items()}
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidK(f"K must be a positive integer, got {K}")
    if unit_coherent:
        units: dict[int, list[tuple[int, int]]] = {}
        for key in sorted(val):
            units.setdefault(key[0], []).append(key)
        if K > len(units):
            raise InvalidK(f"unit-coherent batching needs K <= N={len(units)}, got {K}")
        items = [(sum(val[k] for k in members), (u,), members) for u, members in units.items()]
    else:
        if K > len(val):
            raise InvalidK(f"K={K} exceeds the number of pairs ({len(val)})")
        items = [(v, key, [key]) for key, v in val.items()]
    items.sort(key=lambda it: (-it[0], it[1]))
    bins: list[list[tuple[int, int]]] = [[] for _ in range(K)]
    sums = [0.0] * K
    for score, _, members in items:
        b = min(range(K), key=lambda j: (sums[j], j))
        bins[b].extend(members)
        sums[b] += score
    return BatchPlan(tuple(tuple(sorted(b)) for b in bins), tuple(sums), bool(unit_coherent))


# ---------------------------------------------------------------------------
# decompositions


def _block_diagonal(micros: list[MicroQubo]) -> Qubo:
    c = []
    coup: dict[tuple[int, int], float] = {}
    labels = []
    off = 0.0
    for a, m in enumerate(micros):
        base = 3 * a
        c.extend(m.qubo.c.tolist())
        for (i, j), v in m.qubo.couplings.items():
            coup[(base + i, base + j)] = v
        labels.extend(m.qubo.labels)
        off += m.qubo.offset
    return Qubo(3 * len(micros), np.array(c), coup, off, labels)


def assemble_batched_qubo(micros: list[MicroQubo], batch) -> Qubo:
    """Block-diagonal union of the micro-QUBOs whose (unit, time) is in ``batch``,
    in the batch's iteration order."""
    lookup = {(m.unit, m.time): m for m in micros}
    members = []
    for key in batch:
        key = (int(key[0]), int(key[1]))
        if key not in lookup:
            raise KeyError(f"no micro-QUBO for {key}")
        members.append(lookup[key])
    return _block_diagonal(members)


def partition_three_qubos(state: AdmmState) -> tuple[Qubo, Qubo, Qubo]:
    """One linear QUBO per family, variables in (i, t) row-major order."""
    q = unary_coefficient_arrays(state)
    N, T = q.shape[1:]
    out = []
    for f, kind in enumerate(FAMILIES):
        labels = [(i, t, kind) for i in range(N) for t in range(T)]
        out.append(Qubo(N * T, q[f].reshape(-1), {}, 0.0, labels))
    return tuple(out)


def assemble_monolithic(state: AdmmState, weights: PenaltyWeights, y0) -> Qubo:
    """All micro-QUBOs in one 3NT-variable problem, triplets in (i, t) order."""
    return _block_diagonal(build_all_micro(state, weights, y0))


# ---------------------------------------------------------------------------
# text format


def dumps_qubo(qb: Qubo) -> str:
    lines = [str(qb.n)]
    for (i, j) in sorted(qb.couplings):
        lines.append(f"{i} {j} {qb.couplings[(i, j)]!r}")
    for i in range(qb.n):
        lines.append(f"{i} {float(qb.c[i])!r}")
    lines.append(f"offset {qb.offset!r}")
    return "\n".join(lines) + "\n"


def loads_qubo(text: str) -> Qubo:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or len(rows[0]) != 1:
        raise ValueError("first line must hold the variable count")
    n = int(rows[0][0])
    c = np.zeros(n)
    coup: dict[tuple[int, int], float] = {}
    off = 0.0
    for parts in rows[1:]:
        if parts[0] == "offset" and len(parts) == 2:
            off += float(parts[1])
        elif len(parts) == 3:
            key = (int(parts[0]), int(parts[1]))
            coup[key] = coup.get(key, 0.0) + float(parts[2])
        elif len(parts) == 2:
            c[int(parts[0])] += float(parts[1])
        else:
            raise ValueError(f"cannot parse line: {' '.join(parts)}")
    return Qubo(n, c, coup, off)


def save_qubo(qb: Qubo, path) -> Path:
    path = Path(path)
    path.write_text(dumps_qubo(qb))
    return path


def load_qubo(path) -> Qubo:
    return loads_qubo(Path(path).read_text())
