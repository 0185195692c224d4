"""Unit-commitment problem data: generators, scenarios, instance files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "GeneratorParams",
    "InitialConditions",
    "ScenarioSet",
    "UcInstance",
    "ParseError",
    "ValidationError",
    "load_instance",
    "save_instance",
    "validate_instance",
    "generate_synthetic",
    "deterministic_view",
]

PROB_TOL = 1e-9

# instance-file key -> GeneratorParams attribute
_GEN_KEYS = {
    "p_min": "p_min",
    "p_max": "p_max",
    "ru": "ramp_up",
    "rd": "ramp_down",
    "su": "startup_ramp",
    "sd": "shutdown_ramp",
    "min_up": "min_up",
    "min_down": "min_down",
    "a": "cost_fixed",
    "b": "cost_linear",
    "c": "cost_quad",
    "s_cost": "startup_cost",
    "h_cost": "shutdown_cost",
}


class ParseError(ValueError):
    """Instance file is not readable as the expected schema."""


class ValidationError(ValueError):
    """One or more instance invariants are violated."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class GeneratorParams:
    p_min: float
    p_max: float
    ramp_up: float
    ramp_down: float
    startup_ramp: float
    shutdown_ramp: float
    min_up: int
    min_down: int
    cost_fixed: float
    cost_linear: float
    cost_quad: float
    startup_cost: float
    shutdown_cost: float


@dataclass(frozen=True)
class InitialConditions:
    y0: np.ndarray
    p0: np.ndarray


@dataclass(frozen=True)
class ScenarioSet:
    net_load: np.ndarray  # (T, S)
    pi: np.ndarray  # (S,)
    r_up: np.ndarray  # (T, S)
    r_down: np.ndarray  # (T, S)
    delta_tau: float

    @property
    def n_scenarios(self) -> int:
        return int(self.net_load.shape[1])


@dataclass(frozen=True)
class UcInstance:
    generators: tuple[GeneratorParams, ...]
    initial: InitialConditions
    scenarios: ScenarioSet
    horizon: int
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def n_units(self) -> int:
        return len(self.generators)

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.n_scenarios

    def gen_array(self, attr: str) -> np.ndarray:
        """Per-unit vector of one generator attribute (cached)."""
        if attr not in self._cache:
            arr = np.array([getattr(g, attr) for g in self.generators], dtype=float)
            arr.setflags(write=False)
            self._cache[attr] = arr
        return self._cache[attr]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UcInstance):
            return NotImplemented
        return instance_close(self, other, tol=0.0)

    __hash__ = None  # type: ignore[assignment]


def instance_close(a: UcInstance, b: UcInstance, tol: float = 1e-12) -> bool:
    """Field-wise comparison of two instances within ``tol``."""
    if a.horizon != b.horizon or a.n_units != b.n_units:
        return False
    if a.scenarios.net_load.shape != b.scenarios.net_load.shape:
        return False

    def close(x, y) -> bool:
        return bool(np.all(np.abs(np.asarray(x, float) - np.asarray(y, float)) <= tol))

    for ga, gb in zip(a.generators, b.generators):
        for attr in _GEN_KEYS.values():
            if not close(getattr(ga, attr), getattr(gb, attr)):
                return False
    sa, sb = a.scenarios, b.scenarios
    return (
        close(a.initial.y0, b.initial.y0)
        and close(a.initial.p0, b.initial.p0)
        and close(sa.net_load, sb.net_load)
        and close(sa.pi, sb.pi)
        and close(sa.r_up, sb.r_up)
        and close(sa.r_down, sb.r_down)
        and close(sa.delta_tau, sb.delta_tau)
    )


# ---------------------------------------------------------------------------
# validation


def validate_instance(inst: UcInstance) -> list[str]:
    """Return every invariant violation (empty list when valid)."""
    errors: list[str] = []
    T = inst.horizon
    if T < 1:
        errors.append(f"horizon must be >= 1, got {T}")
    if inst.n_units < 1:
        errors.append("instance has no generators")

    for k, g in enumerate(inst.generators, start=1):
        label = f"unit {k}"
        values = [getattr(g, a) for a in _GEN_KEYS.values()]
        if not all(math.isfinite(float(v)) for v in values):
            errors.append(f"{label}: non-finite parameter")
            continue
        if g.p_min < 0:
            errors.append(f"{label}: p_min {g.p_min} < 0")
        if g.p_min > g.p_max:
            errors.append(f"{label}: p_min {g.p_min} > p_max {g.p_max}")
        for attr in ("ramp_up", "ramp_down", "startup_ramp", "shutdown_ramp"):
            if getattr(g, attr) < 0:
                errors.append(f"{label}: {attr} {getattr(g, attr)} < 0")
        if g.cost_quad < 0:
            errors.append(f"{label}: quadratic cost {g.cost_quad} < 0 (objective not convex)")
        for attr in ("min_up", "min_down"):
            v = getattr(g, attr)
            if int(v) != v or v < 1:
                errors.append(f"{label}: {attr} must be an integer >= 1, got {v}")

    N = inst.n_units
    y0 = np.asarray(inst.initial.y0, float)
    p0 = np.asarray(inst.initial.p0, float)
    if y0.shape != (N,) or p0.shape != (N,):
        errors.append(f"initial conditions must have length {N}")
    else:
        for k in range(N):
            if y0[k] not in (0.0, 1.0):
                errors.append(f"unit {k + 1}: y0 must be 0 or 1, got {y0[k]}")
                continue
            g = inst.generators[k]
            lo, hi = g.p_min * y0[k], g.p_max * y0[k]
            if not lo - 1e-9 <= p0[k] <= hi + 1e-9:
                errors.append(f"unit {k + 1}: p0 {p0[k]} outside [{lo}, {hi}]")

    sc = inst.scenarios
    L = np.asarray(sc.net_load, float)
    if L.ndim != 2 or L.shape[0] != T or L.shape[1] < 1:
        errors.append(f"net_load must be T x S with T={T}, S>=1; got shape {L.shape}")
        return errors
    S = L.shape[1]
    for name in ("r_up", "r_down"):
        arr = np.asarray(getattr(sc, name), float)
        if arr.shape != (T, S):
            errors.append(f"{name} must have shape ({T}, {S}), got {arr.shape}")
        elif np.any(arr < 0):
            errors.append(f"{name} has negative entries")
    pi = np.asarray(sc.pi, float)
    if pi.shape != (S,):
        errors.append(f"pi must have length {S}, got {pi.shape}")
    else:
        if np.any(pi < 0):
            errors.append("probabilities must be nonnegative")
        total = float(pi.sum())
        if abs(total - 1.0) > PROB_TOL:
            errors.append(f"probabilities sum {total:g} ≠ 1")
    if np.any(L < 0):
        errors.append("net_load has negative entries")
    if not sc.delta_tau > 0:
        errors.append(f"delta_tau must be > 0, got {sc.delta_tau}")

    if N >= 1 and np.shape(sc.r_up) == (T, S):
        cap = sum(g.p_max for g in inst.generators)
        need = float(np.max(L + np.asarray(sc.r_up, float)))
        if cap < need:
            errors.append(f"total capacity {cap:g} below peak net load plus up-reserve {need:g}")
    return errors


def _check(inst: UcInstance) -> UcInstance:
    errors = validate_instance(inst)
    if errors:
        raise ValidationError(errors)
    return inst


# ---------------------------------------------------------------------------
# file format


def instance_to_dict(inst: UcInstance) -> dict:
    sc = inst.scenarios
    return {
        "horizon": int(inst.horizon),
        "generators": [
            {key: (int(getattr(g, attr)) if key in ("min_up", "min_down") else float(getattr(g, attr)))
             for key, attr in _GEN_KEYS.items()}
            for g in inst.generators
        ],
        "initial": {
            "y0": [int(v) for v in inst.initial.y0],
            "p0": [float(v) for v in inst.initial.p0],
        },
        "scenarios": {
            "net_load": np.asarray(sc.net_load, float).tolist(),
            "pi": np.asarray(sc.pi, float).tolist(),
            "r_up": np.asarray(sc.r_up, float).tolist(),
            "r_down": np.asarray(sc.r_down, float).tolist(),
            "delta_tau": float(sc.delta_tau),
        },
    }


def instance_from_dict(data: dict) -> UcInstance:
    """Build an instance from parsed file content; raises ParseError on shape problems."""
    try:
        gens = []
        for k, rec in enumerate(data["generators"], start=1):
            missing = [key for key in _GEN_KEYS if key not in rec]
            if missing:
                raise ParseError(f"generator {k} missing keys {missing}")
            kwargs = {attr: rec[key] for key, attr in _GEN_KEYS.items()}
            kwargs = {a: (v if a in ("min_up", "min_down") else float(v)) for a, v in kwargs.items()}
            gens.append(GeneratorParams(**kwargs))
        init = data["initial"]
        sc = data["scenarios"]
        scen = ScenarioSet(
            net_load=_matrix(sc["net_load"], "net_load"),
            pi=np.asarray(sc["pi"], dtype=float),
            r_up=_matrix(sc["r_up"], "r_up"),
            r_down=_matrix(sc["r_down"], "r_down"),
            delta_tau=float(sc["delta_tau"]),
        )
        return UcInstance(
            generators=tuple(gens),
            initial=InitialConditions(
                y0=np.asarray(init["y0"], dtype=float),
                p0=np.asarray(init["p0"], dtype=float),
            ),
            scenarios=scen,
            horizon=int(data["horizon"]),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed instance: {exc!r}") from exc


def _matrix(rows, name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2:
        raise ParseError(f"{name} must be a T x S nested list")
    return arr


def load_instance(path: str | Path) -> UcInstance:
    """Read and validate an instance file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return _check(instance_from_dict(data))


def dumps_instance(inst: UcInstance) -> str:
    return json.dumps(instance_to_dict(inst), indent=2) + "\n"


def save_instance(inst: UcInstance, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_instance(inst))
    return path


# ---------------------------------------------------------------------------
# synthetic instances


def generate_synthetic(n_units: int, horizon: int, n_scenarios: int, seed: int) -> UcInstance:
    """Random but structurally feasible instance.

    The fleet can serve every scenario with all units committed: the
    minimum-stable output plus down-reserve stays below the lightest net
    load and ramp limits cover the hour-to-hour load swings. Peak net load
    lands between 55% and 80% of installed capacity.
    """
    if n_units < 1 or horizon < 1 or n_scenarios < 1:
        raise ValueError("n_units, horizon and n_scenarios must all be >= 1")
    rng = np.random.default_rng(seed)
    N, T, S = n_units, horizon, n_scenarios

    p_max = np.round(rng.uniform(60.0, 160.0, N), 1)
    p_min = np.round(p_max * rng.uniform(0.10, 0.25, N), 1)
    ramp = np.round(p_max * rng.uniform(0.45, 0.70, N), 1)
    su = np.maximum(ramp, p_min)
    cap = float(p_max.sum())

    # daily shape sampled at T points, peak normalised to 1
    hours = np.arange(T) * (24.0 / max(T, 1))
    shape = 0.78 + 0.22 * np.sin((hours - 8.0) * np.pi / 12.0)
    shape = shape + rng.uniform(-0.02, 0.02, T)
    shape = shape / shape.max()
    peak_frac = rng.uniform(0.55, 0.75)
    base = peak_frac * cap * shape

    if S == 1:
        dev = np.zeros((T, 1))
        pi = np.ones(1)
    else:
        dev = rng.uniform(-0.06, 0.06, (T, S))
        dev[:, 0] = 0.0
        pi = rng.dirichlet(np.full(S, 4.0))
        pi = pi / pi.sum()
    net = np.round(base[:, None] * (1.0 + dev), 2)
    # keep every scenario inside the servable band
    floor = 1.15 * p_min.sum() + 0.04 * net.max()
    net = np.clip(net, floor, 0.8 * cap)

    r_up = np.round(0.05 * net, 2)
    r_down = np.round(0.03 * net, 2)
    delta_tau = 1.0 / 6.0

    gens = tuple(
        GeneratorParams(
            p_min=float(p_min[k]),
            p_max=float(p_max[k]),
            ramp_up=float(ramp[k]),
            ramp_down=float(ramp[k]),
            startup_ramp=float(su[k]),
            shutdown_ramp=float(su[k]),
            min_up=int(rng.integers(1, 4)),
            min_down=int(rng.integers(1, 4)),
            cost_fixed=float(np.round(rng.uniform(50.0, 400.0), 1)),
            cost_linear=float(np.round(rng.uniform(12.0, 40.0), 2)),
            cost_quad=float(np.round(rng.uniform(0.002, 0.02), 4)),
            startup_cost=float(np.round(rng.uniform(100.0, 600.0), 1)),
            shutdown_cost=float(np.round(rng.uniform(0.0, 80.0), 1)),
        )
        for k in range(N)
    )
    # t=0 state: all units on, sharing the first-period expected load proportionally
    first = float(pi @ net[0])
    frac = (first - p_min.sum()) / (p_max - p_min).sum()
    p0 = np.round(p_min + frac * (p_max - p_min), 3)
    inst = UcInstance(
        generators=gens,
        initial=InitialConditions(y0=np.ones(N), p0=p0),
        scenarios=ScenarioSet(net_load=net, pi=pi, r_up=r_up, r_down=r_down, delta_tau=delta_tau),
        horizon=T,
    )
    return _check(inst)


def deterministic_view(inst: UcInstance) -> UcInstance:
    """Collapse the scenario set to its probability-weighted mean (S=1)."""
    sc = inst.scenarios
    if sc.n_scenarios == 1:
        return inst
    pi = np.asarray(sc.pi, float)

    def mean(a):
        return (np.asarray(a, float) @ pi)[:, None]

    return UcInstance(
        generators=inst.generators,
        initial=inst.initial,
        scenarios=ScenarioSet(
            net_load=mean(sc.net_load),
            pi=np.ones(1),
            r_up=mean(sc.r_up),
            r_down=mean(sc.r_down),
            delta_tau=sc.delta_tau,
        ),
        horizon=inst.horizon,
    )
