from __future__ import annotations

import numpy as np
import pytest

from ucqubo.admm import (
    TRACE_HEADER,
    AdmmConfig,
    compute_residuals,
    lyapunov_value,
    run_admm,
    update_duals,
    update_slacks,
)
from ucqubo.block1 import evaluate_augmented_lagrangian, initial_state
from ucqubo.model import generate_synthetic
from ucqubo.solvers import DvqeConfig


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(3, 4, 1, 1)


@pytest.fixture(scope="module")
def small_run(small):
    return run_admm(small, AdmmConfig())


def _one_pair(lam, rho, beta, diff):
    inst = generate_synthetic(1, 1, 1, 0)
    s = initial_state(inst, rho, beta)
    s.lam[:] = lam
    s.z[:] = 0.0
    s.rel[:] = diff
    return s


# -- closed-form updates ------------------------------------------------------


def test_slack_examples():
    s = _one_pair(0.0, 1.0, 2.0, 0.0)
    assert np.all(update_slacks(s).xi == 0.0)
    s = update_slacks(_one_pair(-3.0, 1.0, 2.0, 1.0))
    assert s.xi[0, 0, 0] == pytest.approx(2 / 3)
    # stationarity of λ r + ρ/2 r² + β/2 ξ² in ξ
    assert -3 + 1 * (1 + s.xi[0, 0, 0]) + 2 * s.xi[0, 0, 0] == pytest.approx(0.0, abs=1e-12)
    s = update_slacks(_one_pair(3.0, 1.0, 2.0, 1.0))
    assert np.all(s.xi == 0.0)


def test_dual_examples():
    s = _one_pair(1.5, 2.0, 1.0, 0.0)
    s.xi[:] = 0.0
    assert np.all(update_duals(s).lam == 1.5)
    s = _one_pair(0.0, 2.0, 1.0, 0.5)
    s.xi[:] = 0.0
    assert np.all(update_duals(s).lam == 1.0)


def test_duals_telescope(small):
    lams, sums = [], []
    acc = np.zeros((3, 3, 4))

    def cb(it, state, trace):
        nonlocal acc
        acc = acc + state.rho[:, None, None] * state.residual
        lams.append(state.lam.copy())
        sums.append(acc.copy())

    run_admm(small, AdmmConfig(max_iter=15), callback=cb)
    for lam, tot in zip(lams, sums):
        np.testing.assert_allclose(lam, tot, rtol=1e-9, atol=1e-6)


def test_residual_examples():
    inst = generate_synthetic(1, 2, 1, 0)
    s = initial_state(inst, [2.0, 3.0, 4.0], 1.0)
    s.rel = s.z.copy()
    assert compute_residuals(s, s.copy()) == (0.0, 0.0, 0.0, 0.0)
    prev = s.copy()
    s.rel = s.rel + np.array([0.3, 0.0, 0.0])[:, None, None] * np.array([[1.0, 0.0]])
    s.rel[1, 0, 1] = 0.4
    s.z[2, 0, 0] = 1.0
    s.xi[2, 0, 0] = 0.25
    py, pu, pv, d = compute_residuals(s, prev)
    assert py == pytest.approx(0.3)
    assert pu == pytest.approx(0.4)
    assert pv == pytest.approx(0.75)  # rel 0 − z 1 + ξ 0.25
    assert d == pytest.approx(4.0 * 0.75)  # ρ_v ‖ΔZ − ΔΞ‖


def test_lyapunov_examples(small):
    rng = np.random.default_rng(0)
    s = initial_state(small, 9.0, 2.0)
    s.rel = s.z.copy()
    L = evaluate_augmented_lagrangian(small, s)
    assert lyapunov_value(small, s, 18.0) == pytest.approx(L)
    s.rel = rng.uniform(0, 1, s.rel.shape)
    L = evaluate_augmented_lagrangian(small, s)
    assert lyapunov_value(small, s, 0.0) == L
    r = s.rel - s.z + s.xi
    assert lyapunov_value(small, s, 18.0) == pytest.approx(L + 9.0 * float((r * r).sum()), rel=1e-12)
    with pytest.raises(ValueError):
        lyapunov_value(small, s, -1.0)


def test_config_validation(monkeypatch):
    with pytest.raises(ValueError) as exc:
        AdmmConfig(rho=0.0, eps_pri=0.0, mode="bogus")
    msg = str(exc.value)
    assert "rho" in msg and "eps" in msg and "mode" in msg
    with pytest.raises(ValueError):
        AdmmConfig(kappa=1.0)
    assert AdmmConfig().lyapunov_kappa == 2 * 9e5
    monkeypatch.setenv("DUC_THREADS", "3")
    assert AdmmConfig().n_threads() == 3


# -- full runs -------------------------------------------------------------------


def test_converged_run_properties(small, small_run):
    rep = small_run
    cfg = AdmmConfig()
    assert rep.converged
    assert max(rep.residuals[:3]) <= cfg.eps_pri and rep.residuals[3] <= cfg.eps_dual
    assert float(rep.state.xi.max()) <= cfg.eps_pri
    z = rep.state.z
    assert np.max(np.abs(rep.state.rel[0] - np.rint(rep.state.rel[0]))) <= cfg.eps_pri
    np.testing.assert_array_equal(rep.schedule.y, z[0])
    np.testing.assert_array_equal(rep.schedule.u, z[1])
    np.testing.assert_array_equal(rep.schedule.v, z[2])
    np.testing.assert_allclose(rep.schedule.p.sum(axis=0), small.scenarios.net_load, atol=1e-5)
    assert max(rep.violations.values()) <= 1e-6
    assert len(rep.trace) == rep.iterations
    assert np.all(np.isfinite(rep.trace.lyapunov))
    assert rep.trace.lyapunov_increases() < 0.2 * rep.iterations


def test_trace_csv(small_run, tmp_path):
    text = small_run.trace.to_csv(tmp_path / "t.csv")
    lines = text.splitlines()
    assert lines[0] == ",".join(TRACE_HEADER)
    assert len(lines) == small_run.iterations + 1
    assert all(len(ln.split(",")) == len(TRACE_HEADER) for ln in lines)
    assert lines[1].endswith(",,")
    timed = small_run.trace.to_csv(timings=True).splitlines()
    assert not timed[1].endswith(",,")


def test_deterministic_repeat(small, small_run):
    again = run_admm(small, AdmmConfig())
    assert again.trace.to_csv() == small_run.trace.to_csv()


@pytest.mark.parametrize("mode", ["three", "micro", "monolithic"])
def test_safeguard_monotone_all_modes(small, mode):
    rep = run_admm(small, AdmmConfig(mode=mode, max_iter=60))
    tr = rep.trace
    assert all(a <= i for a, i in zip(tr.block2_energy, tr.block2_incumbent))
    assert all(a <= c + 1e-9 * abs(c) or a <= i for a, c, i in
               zip(tr.block2_energy, tr.block2_candidate, tr.block2_incumbent))


def test_micro_equals_batched_with_singletons(small):
    NT = small.n_units * small.horizon
    a = run_admm(small, AdmmConfig(mode="micro", max_iter=40))
    b = run_admm(small, AdmmConfig(mode="batched", batches=NT, max_iter=40))
    np.testing.assert_array_equal(a.state.z, b.state.z)
    assert a.trace.to_csv() == b.trace.to_csv()


def test_threads_do_not_change_results(small, monkeypatch):
    a = run_admm(small, AdmmConfig(max_iter=25))
    monkeypatch.setenv("DUC_THREADS", "3")
    b = run_admm(small, AdmmConfig(max_iter=25))
    assert a.trace.to_csv() == b.trace.to_csv()


def test_cross_backend_agreement(small):
    brute = run_admm(small, AdmmConfig(max_iter=30))
    dvqe = run_admm(small, AdmmConfig(max_iter=30, backend="dvqe", compare_exact=True,
                                      dvqe=DvqeConfig(max_iters=100)))
    tb, td = brute.trace, dvqe.trace
    for k in range(len(td)):
        if td.exact_match[k] < 1.0:
            break
        assert td.block2_energy[k] == tb.block2_energy[k]
        assert td.pri_y[k] == tb.pri_y[k] and td.dual[k] == tb.dual[k]
    assert all(0.0 <= m <= 1.0 for m in td.exact_match)
    assert sum(td.telegate_ops) == 0


def test_max_iter_reports_best_iterate(small):
    rep = run_admm(small, AdmmConfig(max_iter=3))
    assert rep.status == "MaxIter" and rep.iterations == 3
    worst = [max(a, b, c) for a, b, c in zip(rep.trace.pri_y, rep.trace.pri_u, rep.trace.pri_v)]
    assert max(rep.residuals[:3]) == pytest.approx(min(worst), rel=1e-12)
