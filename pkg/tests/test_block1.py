from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ucqubo.block1 import (
    AdmmState,
    DimensionError,
    LayoutError,
    assemble_block1_qp,
    constraint_violations,
    evaluate_augmented_lagrangian,
    extract_solution,
    initial_state,
    pack_variables,
    uc_cost,
    with_fixed_binaries,
)
from ucqubo.model import generate_synthetic
from ucqubo.qp import QpSettings, QpSolution, QpStatus, solve_qp


def _random_state(inst, rng, rho=None, beta=None):
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    st_ = initial_state(inst, rho if rho is not None else rng.uniform(0.5, 5, 3),
                        beta if beta is not None else rng.uniform(0.5, 5, 3))
    st_.rel = rng.uniform(0, 1, (3, N, T))
    st_.z = rng.integers(0, 2, (3, N, T)).astype(float)
    st_.xi = rng.uniform(0, 0.5, (3, N, T))
    st_.lam = rng.normal(size=(3, N, T)) * 10
    st_.p = rng.uniform(0, 100, (N, T, S))
    st_.r_up = rng.uniform(0, 5, (N, T, S))
    st_.r_down = rng.uniform(0, 5, (N, T, S))
    return st_


def _literal_auglag(inst, s):
    """Term-by-term sum written independently of the vectorised version."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    total = 0.0
    for i, g in enumerate(inst.generators):
        for t in range(T):
            total += g.cost_fixed * s.rel[0, i, t] + g.startup_cost * s.rel[1, i, t] + g.shutdown_cost * s.rel[2, i, t]
            for sc in range(S):
                p = s.p[i, t, sc]
                total += inst.scenarios.pi[sc] * (g.cost_linear * p + g.cost_quad * p * p)
            for f in range(3):
                r = s.rel[f, i, t] - s.z[f, i, t] + s.xi[f, i, t]
                total += s.lam[f, i, t] * r + 0.5 * s.rho[f] * r * r + 0.5 * s.beta[f] * s.xi[f, i, t] ** 2
    return total


def test_row_counts_single_unit():
    inst = generate_synthetic(1, 1, 1, 3)
    qp = assemble_block1_qp(inst, initial_state(inst, 1.0, 1.0))
    assert qp.n == 6
    sizes = {k: v.stop - v.start for k, v in qp.con_blocks.items()}
    expected = {"1b[0]": 1, "1c_lo[0]": 1, "1c_hi[0]": 1, "1d": 1, "1e": 1, "1j[0]": 1, "1k[0]": 1,
                "1l_up[0]": 1, "1l_dn[0]": 1, "1m_up[0]": 1, "1m_dn[0]": 1}
    for k, v in expected.items():
        assert sizes[k] == v
    # minimum up/down, ramping and the [0,1] bounds are also present
    assert sizes["1f"] == sizes["1g"] == sizes["1h[0]"] == sizes["1i[0]"] == 1
    assert sizes["bounds_yuv"] == 3
    assert qp.m == 18


def test_quadratic_and_linear_entries():
    inst = generate_synthetic(2, 3, 2, 4)
    s = initial_state(inst, 2.0, 1.0)
    s.z[0] = 1.0
    qp = assemble_block1_qp(inst, s)
    d = qp.P.diagonal()
    C = inst.gen_array("cost_quad")
    pi = inst.scenarios.pi
    for sc in range(2):
        blk = qp.var_blocks[f"p[{sc}]"]
        np.testing.assert_allclose(d[blk], np.repeat(2 * pi[sc] * C, 3))
    np.testing.assert_allclose(d[qp.var_blocks["y"]], 2.0)
    A = inst.gen_array("cost_fixed")
    np.testing.assert_allclose(qp.q[qp.var_blocks["y"]], np.repeat(A - 2.0, 3))


def test_dimension_error():
    inst = generate_synthetic(2, 3, 1, 0)
    s = initial_state(inst, 1.0, 1.0)
    s.rel = np.zeros((3, 2, 4))
    with pytest.raises(DimensionError):
        assemble_block1_qp(inst, s)


def test_auglag_trivial_cases():
    inst = generate_synthetic(3, 4, 1, 0)
    s = initial_state(inst, 5.0, 7.0)
    s.rel[:] = 0
    s.z[:] = 0
    s.p[:] = 0
    assert evaluate_augmented_lagrangian(inst, s) == 0.0
    rng = np.random.default_rng(0)
    s = _random_state(inst, rng)
    s.xi[:] = 0
    s.rel = s.z.copy()
    cost = uc_cost(inst, s.rel[0], s.rel[1], s.rel[2], s.p)
    assert evaluate_augmented_lagrangian(inst, s) == pytest.approx(cost, rel=1e-14)


@given(seed=st.integers(0, 10_000), S=st.integers(1, 3))
def test_auglag_matches_literal_sum(seed, S):
    inst = generate_synthetic(3, 4, S, seed % 50)
    s = _random_state(inst, np.random.default_rng(seed))
    ref = _literal_auglag(inst, s)
    assert evaluate_augmented_lagrangian(inst, s) == pytest.approx(ref, rel=1e-10, abs=1e-10)


@given(seed=st.integers(0, 10_000))
def test_gradient_matches_assembled_qp(seed):
    rng = np.random.default_rng(seed)
    inst = generate_synthetic(2, 3, 2, seed % 20)
    s = _random_state(inst, rng)
    qp = assemble_block1_qp(inst, s)
    x = pack_variables(inst, s.rel, s.p, s.r_up, s.r_down)
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios

    def al(vec):
        t = s.copy()
        NT = N * T
        t.rel = vec[:3 * NT].reshape(3, N, T)
        for sc in range(S):
            b = 3 * NT + 3 * NT * sc
            t.p[:, :, sc] = vec[b:b + NT].reshape(N, T)
            t.r_up[:, :, sc] = vec[b + NT:b + 2 * NT].reshape(N, T)
            t.r_down[:, :, sc] = vec[b + 2 * NT:b + 3 * NT].reshape(N, T)
        return evaluate_augmented_lagrangian(inst, t)

    h = 1e-4
    fd = np.array([(al(x + h * e) - al(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    grad = qp.P @ x + qp.q
    np.testing.assert_allclose(fd, grad, rtol=1e-6, atol=1e-6 * np.abs(grad).max())
    # the QP objective and the augmented Lagrangian differ by a constant
    x2 = x + rng.normal(size=x.size)
    assert al(x2) - qp.objective(x2) == pytest.approx(al(x) - qp.objective(x), rel=1e-9, abs=1e-6)


def _solve_block1(inst, s):
    sol = solve_qp(assemble_block1_qp(inst, s), QpSettings())
    assert sol.status is QpStatus.SOLVED
    return sol


@pytest.mark.parametrize("S", [1, 3])
def test_solution_feasible_and_balanced(S):
    inst = generate_synthetic(4, 5, S, 8)
    s = initial_state(inst, 9e5, 2e6)
    sol = _solve_block1(inst, s)
    rel = extract_solution(sol, inst)
    np.testing.assert_allclose(rel.p.sum(axis=0), inst.scenarios.net_load, atol=1e-5)
    viol = constraint_violations(inst, rel.rel, rel.p, rel.r_up, rel.r_down)
    assert max(viol.values()) <= 10 * QpSettings().eps_abs
    assert set(viol) >= {"1b", "1c_lo", "1c_hi", "1d", "1e", "1f", "1g", "1h", "1i", "1j", "1k",
                         "1l_up", "1l_dn", "1m_up", "1m_dn"}


def test_minimizer_against_feasible_perturbations():
    inst = generate_synthetic(3, 4, 2, 12)
    rng = np.random.default_rng(5)
    s = initial_state(inst, 50.0, 80.0)
    s.lam = rng.normal(size=s.lam.shape) * 20
    qp = assemble_block1_qp(inst, s)
    x_star = solve_qp(qp).x
    # other feasible points: Block-1 optima for unrelated linear costs
    others = []
    for k in range(4):
        t = s.copy()
        t.lam = rng.normal(size=s.lam.shape) * 200
        others.append(solve_qp(assemble_block1_qp(inst, t)).x)
    f_star = qp.objective(x_star)
    for k in range(100):
        w = rng.uniform(0, 1)
        x = (1 - w) * x_star + w * others[k % 4]
        assert qp.objective(x) >= f_star - 1e-6 * max(1.0, abs(f_star))


def test_extract_solution_layout_and_clamp():
    inst = generate_synthetic(2, 2, 2, 1)
    rng = np.random.default_rng(0)
    rel = rng.uniform(0, 1, (3, 2, 2))
    p, ru, rd = (rng.uniform(0, 9, (2, 2, 2)) for _ in range(3))
    x = pack_variables(inst, rel, p, ru, rd)
    x[0] = 1 + 1e-9
    sol = QpSolution(x=x, z=np.zeros(0), y=np.zeros(0), status=QpStatus.SOLVED, prim_res=0, dual_res=0, iterations=0)
    out = extract_solution(sol, inst)
    assert out.y[0, 0] == 1.0
    np.testing.assert_array_equal(out.rel.reshape(-1)[1:], rel.reshape(-1)[1:])
    np.testing.assert_array_equal(out.p, p)
    np.testing.assert_array_equal(out.r_up, ru)
    np.testing.assert_array_equal(out.r_down, rd)
    sol.x = x[:-1]
    with pytest.raises(LayoutError):
        extract_solution(sol, inst)


def test_fixed_binaries_are_respected():
    inst = generate_synthetic(3, 4, 1, 2)
    s = initial_state(inst, 10.0, 10.0)
    qp = assemble_block1_qp(inst, s)
    z = np.zeros((3, 3, 4))
    z[0] = 1.0
    sol = solve_qp(with_fixed_binaries(qp, z))
    assert sol.status is QpStatus.SOLVED
    np.testing.assert_allclose(sol.x[:36], z.reshape(-1), atol=1e-6)
    assert isinstance(s, AdmmState)
