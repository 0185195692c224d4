from __future__ import annotations

import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from ucqubo.qp import INF, QpSettings, QpStatus, QpWorkspace, QuadraticProgram, dump_qp, solve_qp


def _qp(P, q, A, l, u):
    return QuadraticProgram(P=sp.csc_matrix(np.atleast_2d(P)), q=np.asarray(q, float),
                            A=sp.csc_matrix(np.atleast_2d(A)), l=np.asarray(l, float), u=np.asarray(u, float))


def _random_box_qp(rng, n=20):
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.5 * np.eye(n)
    q = rng.normal(size=n) * 5
    lo = -rng.uniform(0.1, 1.0, n)
    hi = rng.uniform(0.1, 1.0, n)
    return P, q, lo, hi


def _projected_gradient(P, q, lo, hi, tol=1e-10, max_iter=200_000):
    L = np.linalg.eigvalsh(P).max()
    x = np.clip(np.zeros_like(q), lo, hi)
    for _ in range(max_iter):
        x_new = np.clip(x - (P @ x + q) / L, lo, hi)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def test_scalar_lower_bound():
    sol = solve_qp(_qp([[2.0]], [0.0], [[1.0]], [1.0], [INF]))
    assert sol.status is QpStatus.SOLVED
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_unconstrained_identity():
    qp = QuadraticProgram(P=sp.identity(2, format="csc"), q=np.array([1.0, -2.0]),
                          A=sp.csc_matrix((0, 2)), l=np.zeros(0), u=np.zeros(0))
    sol = solve_qp(qp)
    assert sol.status is QpStatus.SOLVED
    np.testing.assert_allclose(sol.x, [-1.0, 2.0], atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("linsys", ["direct", "cg"])
def test_box_qp_matches_projected_gradient(seed, linsys):
    rng = np.random.default_rng(seed)
    P, q, lo, hi = _random_box_qp(rng)
    ref = _projected_gradient(P, q, lo, hi)
    qp = _qp(P, q, np.eye(len(q)), lo, hi)
    sol = solve_qp(qp, QpSettings(linsys=linsys))
    assert sol.status is QpStatus.SOLVED
    f_ref = 0.5 * ref @ P @ ref + q @ ref
    assert abs(sol.objective - f_ref) <= 1e-5 * abs(f_ref)


def _random_general_qp(rng, n, m):
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.2 * np.eye(n)
    q = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)  # guarantees feasibility
    Ax0 = A @ x0
    l = Ax0 - rng.uniform(0.0, 1.0, m)
    u = Ax0 + rng.uniform(0.0, 1.0, m)
    kind = rng.integers(0, 4, m)
    l[kind == 1] = -INF
    u[kind == 2] = INF
    l[kind == 3] = u[kind == 3] = Ax0[kind == 3]  # equality rows
    return P, q, A, l, u


def _active_set_oracle(P, q, A, l, u):
    """Minimum over all active sets of the equality-constrained optimum that is feasible."""
    n, m = len(q), len(l)
    best = np.inf
    for choice in itertools.product((0, 1, 2), repeat=m):
        rows, rhs = [], []
        ok = True
        for k, c in enumerate(choice):
            if c == 1:
                if l[k] <= -INF:
                    ok = False
                    break
                rows.append(k)
                rhs.append(l[k])
            elif c == 2:
                if u[k] >= INF or u[k] == l[k]:
                    ok = False
                    break
                rows.append(k)
                rhs.append(u[k])
        if not ok or len(rows) > n:
            continue
        Aa = A[rows]
        K = np.block([[P, Aa.T], [Aa, np.zeros((len(rows), len(rows)))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([-q, rhs]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        Ax = A @ x
        if np.all(Ax >= l - 1e-9) and np.all(Ax <= u + 1e-9):
            best = min(best, 0.5 * x @ P @ x + q @ x)
    return best


@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), m=st.integers(1, 5))
def test_small_dense_matches_active_set_enumeration(seed, n, m):
    rng = np.random.default_rng(seed)
    P, q, A, l, u = _random_general_qp(rng, n, m)
    ref = _active_set_oracle(P, q, A, l, u)
    sol = solve_qp(_qp(P, q, A, l, u))
    assert sol.status is QpStatus.SOLVED
    assert abs(sol.objective - ref) <= 1e-6 * max(1.0, abs(ref))


@given(seed=st.integers(0, 10_000))
def test_kkt_residuals_at_solution(seed):
    rng = np.random.default_rng(seed)
    P, q, A, l, u = _random_general_qp(rng, 8, 6)
    st_ = QpSettings()
    sol = solve_qp(_qp(P, q, A, l, u), st_)
    assert sol.status is QpStatus.SOLVED
    x, y = sol.x, sol.y
    Ax = A @ x
    stat = np.max(np.abs(P @ x + q + A.T @ y))
    prim = np.max(np.maximum(l - Ax, 0) + np.maximum(Ax - u, 0))
    # y > 0 only at upper bounds, y < 0 only at lower bounds
    comp = np.max(np.abs(np.maximum(y, 0) * np.minimum(u - Ax, 1e6))
                  + np.abs(np.minimum(y, 0) * np.minimum(Ax - l, 1e6)))
    scale = max(1.0, np.max(np.abs(q)), np.max(np.abs(A.T @ y)))
    assert stat <= 10 * st_.eps_abs * scale
    assert prim <= 10 * st_.eps_abs
    assert comp <= 10 * st_.eps_abs * scale


def test_warm_start_never_worse():
    rng = np.random.default_rng(7)
    P, q, A, l, u = _random_general_qp(rng, 10, 8)
    qp = _qp(P, q, A, l, u)
    cold = solve_qp(qp)
    warm = solve_qp(qp, warm_start=cold)
    assert warm.status is QpStatus.SOLVED
    assert warm.objective <= cold.objective + 1e-9 * max(1, abs(cold.objective)) + 1e-6


def test_objective_trace_is_monotone():
    rng = np.random.default_rng(3)
    P, q, lo, hi = _random_box_qp(rng, 30)
    sol = solve_qp(_qp(P, q, np.eye(30), lo, hi), QpSettings(polish=False, linsys="cg"))
    tr = np.array(sol.objective_trace)
    assert tr.size > 0
    assert np.all(np.diff(tr) <= 1e-9 * np.maximum(1.0, np.abs(tr[:-1])))


def test_infeasible_detected():
    qp = _qp([[1.0]], [0.0], [[1.0], [1.0]], [1.0, -INF], [INF, 0.0])
    sol = solve_qp(qp, QpSettings(max_iters=5000))
    assert sol.status is QpStatus.INFEASIBLE


def test_workspace_update_q_matches_fresh_solve():
    rng = np.random.default_rng(11)
    P, q, A, l, u = _random_general_qp(rng, 12, 9)
    ws = QpWorkspace(_qp(P, q, A, l, u))
    ws.solve()
    q2 = q + rng.normal(size=q.size)
    ws.update_q(q2)
    warm = ws.solve()
    fresh = solve_qp(_qp(P, q2, A, l, u))
    assert warm.status is QpStatus.SOLVED
    assert warm.objective == pytest.approx(fresh.objective, rel=1e-6, abs=1e-6)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        _qp([[1.0]], [0.0], [[1.0]], [1.0], [0.0])
    with pytest.raises(ValueError):
        _qp([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0], [[1.0, 0.0]], [0.0], [1.0])
    with pytest.raises(ValueError):
        QpSettings(alpha=2.0)
    with pytest.raises(ValueError):
        QpSettings(eps_abs=0.0)


def test_dump_listing(tmp_path):
    qp = _qp([[2.0, 0.5], [0.5, 1.0]], [1.0, -1.0], [[1.0, 1.0]], [0.0], [INF])
    text = dump_qp(qp, tmp_path / "qp.txt").read_text()
    assert text.startswith("% quadratic program n=2 m=1")
    for tag in ("%% P 2 2 3", "%% q 2", "%% A 1 2 2", "%% l 1", "%% u 1"):
        assert tag in text
