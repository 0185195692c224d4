"""Seeded micro-QUBO corpora shared by the solver and acceptance tests."""

from __future__ import annotations

import numpy as np

from ucqubo.block1 import AdmmState
from ucqubo.qubo import MicroQubo, PenaltyWeights, build_micro_qubo


def feasible_micro(rng: np.random.Generator, rho: float = 9e5, beta: float = 2e6) -> MicroQubo:
    """Micro-QUBO whose Block-1 anchors satisfy the period logic
    (ŷ = η + û − v̂, û + v̂ ≤ 1), as every Block-1 solution does; duals are
    drawn on the scale of 0.1·ρ and slacks near zero."""
    while True:
        eta, u, v = rng.uniform(size=3)
        if u + v <= 1 and 0 <= eta + u - v <= 1:
            break
    rel = np.array([eta + u - v, u, v]).reshape(3, 1, 1)
    zeros = np.zeros((1, 1, 1))
    state = AdmmState(
        rel=rel, p=zeros, r_up=zeros, r_down=zeros,
        z=np.zeros((3, 1, 1)),
        xi=rng.uniform(0, 1e-3, (3, 1, 1)),
        lam=rng.normal(0, 0.1 * rho, (3, 1, 1)),
        rho=np.full(3, rho),
        beta=np.full(3, beta),
    )
    return build_micro_qubo(state, PenaltyWeights.from_rho(rho), 0, 0, float(eta))


def uniform_micro(rng: np.random.Generator, rho: float = 9e5) -> MicroQubo:
    """Micro-QUBO with independent uniform anchors (harder, not all reachable by Block 1)."""
    rel = rng.uniform(size=(3, 1, 1))
    zeros = np.zeros((1, 1, 1))
    state = AdmmState(
        rel=rel, p=zeros, r_up=zeros, r_down=zeros,
        z=np.zeros((3, 1, 1)),
        xi=rng.uniform(0, 1e-3, (3, 1, 1)),
        lam=rng.normal(0, 0.1 * rho, (3, 1, 1)),
        rho=np.full(3, rho),
        beta=np.full(3, 2e6),
    )
    return build_micro_qubo(state, PenaltyWeights.from_rho(rho), 0, 0, float(rng.uniform()))


def feasible_corpus(seed: int, size: int) -> list[MicroQubo]:
    rng = np.random.default_rng(seed)
    return [feasible_micro(rng) for _ in range(size)]
