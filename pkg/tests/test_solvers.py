import io
import json

import numpy as np
import pytest

from wlra.errors import DivergenceError, InputError
from wlra.linalg import FactorPair, frobenius_sq, svd_full, svd_tail, truncated_svd
from wlra.objective import WeightedProblem, residual_losses, weighted_loss
from wlra.solvers import (
    SolverConfig,
    als_half_sweep,
    initial_factors,
    solve,
    solve_adam,
    solve_adam_sgd,
    solve_als,
    solve_fwsvd,
    solve_sgd,
    solve_svd,
    switching_thresholds,
)


def hetero_problem(seed, n=12, m=10, r=3, lam=0.0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, m))
    imp = np.exp(rng.standard_normal((n, 1))) * np.exp(0.5 * rng.standard_normal((n, m)))
    return WeightedProblem(w, imp, r, lam)


def check_phases(trace, lam=0.0):
    """Phase discipline; with lam == 0 the logged loss is the pure residual, so
    the switch step can also be checked to be the first qualifying one."""
    assert trace.method == "adam_sgd"
    assert [s.step for s in trace.steps] == list(range(len(trace.steps)))
    phases = [s.phase for s in trace.steps]
    k = trace.switch_step
    if k is None:
        assert set(phases) == {"adam"}
        return
    assert all(ph == "adam" for ph in phases[:k]) and all(ph == "sgd" for ph in phases[k + 1 :])
    assert trace.steps[k].unweighted <= trace.soft_threshold
    if lam == 0:
        ok = [s.loss < trace.hard_threshold and s.unweighted <= trace.soft_threshold for s in trace.steps]
        assert ok[k] and not any(ok[:k])


# ------------------------------------------------------------------ closed forms


def test_fwsvd_uniform_matches_svd():
    w = np.random.default_rng(0).standard_normal((9, 7))
    p = WeightedProblem(w, np.full_like(w, 2.5), 3)
    f, _ = solve_fwsvd(p)
    assert frobenius_sq(w - f.product()) == pytest.approx(svd_tail(svd_full(w), 3), rel=1e-10)


def test_fwsvd_full_rank():
    p = hetero_problem(1, 6, 5, 5)
    f, jhat = solve_fwsvd(p)
    scaled = np.sqrt(p.imp.sum(axis=1))[:, None] * p.w
    assert np.allclose(f.product(), p.w, atol=1e-12)
    assert jhat <= 1e-16 * frobenius_sq(scaled) * 100


def test_fwsvd_discarded_spectrum_oracle():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((6, 5))
    rows = rng.uniform(0.1, 3.0, 6)
    imp = np.repeat(rows[:, None], 5, axis=1) * rng.uniform(0.5, 1.5, (6, 5))
    _, jhat = solve_fwsvd(WeightedProblem(w, imp, 2))
    d = np.sqrt(imp.sum(axis=1))
    oracle = np.sum(np.linalg.svd(d[:, None] * w, compute_uv=False)[2:] ** 2)
    assert jhat == pytest.approx(oracle, rel=1e-8)


def test_fwsvd_scale_equivariance():
    p = hetero_problem(2)
    f1, j1 = solve_fwsvd(p)
    f2, j2 = solve_fwsvd(WeightedProblem(p.w, p.imp * 37.0, p.rank))
    assert np.allclose(f1.a, f2.a, rtol=1e-10, atol=1e-13) and np.allclose(f1.b, f2.b, rtol=1e-10, atol=1e-13)
    assert j2 == pytest.approx(37.0 * j1, rel=1e-10)


def test_fwsvd_zero_rows_are_clamped():
    p = hetero_problem(3)
    imp = p.imp.copy()
    imp[2] = 0.0
    f, jhat = solve_fwsvd(WeightedProblem(p.w, imp, p.rank))
    assert np.all(np.isfinite(f.a)) and np.isfinite(jhat)


def test_dispatch_identity():
    p = hetero_problem(4)
    s = solve(p, SolverConfig(method="svd"))
    assert np.array_equal(s.final.a, solve_svd(p).a) and len(s.steps) == 1
    fw = solve(p, SolverConfig(method="fwsvd"))
    ref, jhat = solve_fwsvd(p)
    assert np.array_equal(fw.final.a, ref.a) and np.array_equal(fw.final.b, ref.b)
    assert fw.hard_threshold == jhat


def test_config_validation():
    for bad in (
        dict(method="nope"),
        dict(beta1=1.0),
        dict(beta2=-0.1),
        dict(adam_epsilon=0.0),
        dict(max_steps=0),
        dict(soft_threshold_factor=0.5),
        dict(init="zeros"),
    ):
        with pytest.raises(InputError):
            SolverConfig(**bad)


# ------------------------------------------------------------------------- ALS


def test_als_half_sweep_scalar_oracle():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    imp = np.array([[2.0, 0.5], [1.0, 3.0]])
    lam = 0.1
    f = FactorPair(np.array([[0.3], [0.7]]), np.array([[1.5, -0.5]]))
    g, _ = als_half_sweep(WeightedProblem(w, imp, 1, lam), f, "rows_of_A")
    b = f.b[0]
    for i in range(2):
        num = imp[i, 0] * w[i, 0] * b[0] + imp[i, 1] * w[i, 1] * b[1]
        den = imp[i, 0] * b[0] ** 2 + imp[i, 1] * b[1] ** 2 + lam
        assert g.a[i, 0] == pytest.approx(num / den, rel=1e-12)
    assert np.array_equal(g.b, f.b)


def test_als_uniform_fixed_optimal_b():
    w = np.random.default_rng(5).standard_normal((8, 6))
    res = svd_full(w)
    f = FactorPair(np.zeros((8, 2)), np.ascontiguousarray(res.v[:, :2].T))
    g, _ = als_half_sweep(WeightedProblem(w, np.ones_like(w), 2), f, "rows_of_A")
    assert frobenius_sq(w - g.product()) == pytest.approx(svd_tail(res, 2), rel=1e-10)


def test_als_monotone_half_sweeps():
    for seed in range(5):
        p = hetero_problem(seed, lam=1e-3 * (seed % 2))
        f = initial_factors(p, SolverConfig(init="random", seed=seed))
        prev = weighted_loss(p, f)
        for _ in range(50):
            for side in ("rows_of_A", "cols_of_B"):
                f, _ = als_half_sweep(p, f, side)
                cur = weighted_loss(p, f)
                assert cur <= prev * (1 + 1e-12)
                prev = cur


def test_als_full_rank_exact():
    p = hetero_problem(6, 6, 5, 5)
    tr = solve(p, SolverConfig(method="als", max_steps=3, init="random"))
    assert tr.final_loss <= 1e-12 * frobenius_sq(p.w)


def test_als_uniform_converges_to_svd():
    w = np.random.default_rng(7).standard_normal((16, 12))
    p = WeightedProblem(w, np.ones_like(w), 3)
    tr = solve(p, SolverConfig(method="als", max_steps=100, tol_rel=0, init="random"))
    assert tr.final_loss == pytest.approx(svd_tail(svd_full(w), 3), rel=1e-6)
    assert {s.phase for s in tr.steps} == {"als"}


def test_als_threads_match_serial():
    p = hetero_problem(8, 40, 30, 4)
    f0 = initial_factors(p, SolverConfig(init="random"))
    serial = solve_als(p, f0, SolverConfig(method="als", max_steps=20, tol_rel=0))
    par = solve_als(p, f0, SolverConfig(method="als", max_steps=20, tol_rel=0, threads=4))
    assert abs(par.final_loss - serial.final_loss) <= 1e-12 * serial.final_loss


def test_als_degenerate_rows_use_min_norm():
    p = hetero_problem(9)
    imp = p.imp.copy()
    imp[0] = 0.0
    q = WeightedProblem(p.w, imp, p.rank)
    tr = solve(q, SolverConfig(method="als", max_steps=5, init="random"))
    assert tr.degenerate_steps > 0
    assert np.all(np.isfinite(tr.final.a)) and np.allclose(tr.final.a[0], 0.0)


# ------------------------------------------------------------------------- SGD


def test_sgd_hand_iteration():
    p = WeightedProblem(np.array([[2.0]]), np.array([[1.0]]), 1)
    f0 = FactorPair(np.array([[1.0]]), np.array([[1.0]]))
    tr = solve_sgd(p, f0, SolverConfig(method="sgd", eta=0.1, sgd_batch=1, max_steps=1))
    assert tr.final.a[0, 0] == pytest.approx(1.2, rel=1e-15)
    assert tr.final.b[0, 0] == pytest.approx(1.24, rel=1e-15)


def test_sgd_zero_step_size():
    p = hetero_problem(10)
    f0 = solve_svd(p)
    for batch in (0, 7):
        tr = solve_sgd(p, f0, SolverConfig(method="sgd", eta=0.0, sgd_batch=batch, max_steps=20, tol_rel=0))
        assert np.array_equal(tr.final.a, f0.a) and len(set(tr.losses())) == 1


def test_sgd_full_batch_is_gradient_step():
    p = hetero_problem(11)
    f0 = solve_svd(p)
    tr = solve_sgd(p, f0, SolverConfig(method="sgd", eta=1e-3, max_steps=1))
    from wlra.objective import weighted_grad

    ga, gb = weighted_grad(p, f0)
    assert np.allclose(tr.final.a, f0.a - 1e-3 * ga, rtol=1e-14, atol=1e-16)
    assert np.allclose(tr.final.b, f0.b - 1e-3 * gb, rtol=1e-14, atol=1e-16)


def test_sgd_deterministic_and_decreasing():
    p = hetero_problem(12)
    cfg = SolverConfig(method="sgd", eta=2e-3, sgd_batch=30, max_steps=300, seed=3, init="random")
    t1, t2 = solve(p, cfg), solve(p, cfg)
    assert np.array_equal(t1.losses(), t2.losses())
    assert t1.final_loss < 0.5 * t1.steps[0].loss


def test_divergence_reports_step():
    p = hetero_problem(13)
    with pytest.raises(DivergenceError) as exc:
        solve(p, SolverConfig(method="sgd", eta=10.0, max_steps=1000))
    assert exc.value.step >= 1 and exc.value.to_dict()["context"]["step"] == exc.value.step


# ------------------------------------------------------------------------ Adam


def test_adam_first_step_is_eta():
    p = WeightedProblem(np.array([[10.0]]), np.array([[1.0]]), 1)
    f0 = FactorPair(np.array([[1.0]]), np.array([[1.0]]))
    tr = solve_adam(p, f0, SolverConfig(method="adam", eta=1e-3, max_steps=1))
    assert tr.final.a[0, 0] - 1.0 == pytest.approx(1e-3, rel=1e-5)
    assert tr.final.b[0, 0] - 1.0 == pytest.approx(1e-3, rel=1e-5)


def test_adam_zero_gradient_is_fixed_point():
    rng = np.random.default_rng(14)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    p = WeightedProblem(a @ b, rng.random((4, 4)), 4)
    tr = solve_adam(p, FactorPair(a, b), SolverConfig(method="adam", max_steps=50, tol_rel=0))
    assert np.array_equal(tr.final.a, a) and np.array_equal(tr.final.b, b)


def test_adam_halves_loss_on_8x8():
    p = hetero_problem(15, 8, 8, 2)
    tr = solve(p, SolverConfig(method="adam", eta=1e-3, max_steps=2000, init="random", seed=15))
    assert tr.final_loss <= 0.5 * tr.steps[0].loss


def test_regularized_objective_is_logged():
    p = hetero_problem(16, lam=0.05)
    tr = solve(p, SolverConfig(method="adam", max_steps=10))
    assert tr.final_loss == pytest.approx(weighted_loss(p, tr.final), rel=1e-12)


# -------------------------------------------------------------------- Adam_SGD


def test_phase_invariant_on_many_runs():
    for seed in range(6):
        lam = 1e-3 * (seed % 2)
        p = hetero_problem(seed, lam=lam)
        for init in ("svd_warm", "random"):
            tr = solve(p, SolverConfig(eta=1e-3, max_steps=1500, seed=seed, init=init))
            check_phases(tr, lam)


def test_switch_at_zero_from_fwsvd_warm_start():
    p = hetero_problem(20)
    cfg = SolverConfig(init="fwsvd_warm", threshold_rows="sum", max_steps=50)
    tr = solve(p, cfg)
    assert tr.switch_step == 0 and {s.phase for s in tr.steps} == {"sgd"}


def test_uniform_weights_sgd_only():
    w = np.random.default_rng(21).standard_normal((10, 8))
    c = 3.0
    p = WeightedProblem(w, np.full_like(w, c), 3)
    cfg = SolverConfig(threshold_rows="sum", max_steps=500)
    hard, soft = switching_thresholds(p, cfg)
    assert hard == pytest.approx(c * 8 * svd_tail(svd_full(w), 3), rel=1e-10)
    tr = solve(p, cfg)
    assert tr.switch_step == 0
    start = tr.steps[0].loss
    assert max(tr.losses()) <= start * (1 + cfg.tol_rel) + 1e-12


def test_mean_threshold_scale():
    p = hetero_problem(22)
    h_sum, soft = switching_thresholds(p, SolverConfig(threshold_rows="sum"))
    h_mean, soft2 = switching_thresholds(p, SolverConfig())
    assert h_mean == pytest.approx(h_sum / p.shape[1], rel=1e-14) and soft == soft2
    assert soft == pytest.approx(10 * svd_tail(svd_full(p.w), p.rank), rel=1e-12)


def test_never_switching_returns_adam_result():
    p = hetero_problem(23)
    tr = solve(p, SolverConfig(soft_threshold_factor=1.0, init="random", max_steps=30))
    check_phases(tr)
    assert tr.switch_step is None


def test_uniform_reduction_random_init():
    for seed in range(3):
        w = np.random.default_rng(seed).standard_normal((32, 32))
        p = WeightedProblem(w, np.ones_like(w), 4)
        tr = solve(p, SolverConfig(init="random", seed=seed, max_steps=10_000, eta=1e-2))
        assert tr.final_loss <= 1.01 * svd_tail(svd_full(w), 4)


def test_row_constant_weights_cannot_beat_fwsvd():
    rng = np.random.default_rng(24)
    w = rng.standard_normal((10, 8))
    imp = np.repeat(rng.uniform(0.2, 3, (10, 1)), 8, axis=1)
    p = WeightedProblem(w, imp, 3)
    fw = weighted_loss(p, solve_fwsvd(p)[0])
    for method in ("als", "adam", "adam_sgd", "sgd"):
        tr = solve(p, SolverConfig(method=method, max_steps=500, eta=1e-3))
        assert tr.final_loss >= fw - 1e-9


def test_hybrid_beats_closed_form_on_heterogeneous_problem():
    p = hetero_problem(25, 20, 16, 3)
    fw = weighted_loss(p, solve_fwsvd(p)[0])
    tr = solve(p, SolverConfig(eta=1e-2, max_steps=3000))
    assert tr.final_loss < fw


def test_determinism_and_jsonl():
    p = hetero_problem(26)
    cfg = SolverConfig(eta=1e-2, max_steps=200, init="random")
    t1, t2 = solve(p, cfg), solve(p, cfg)
    assert t1.steps == t2.steps
    buf = io.StringIO()
    t1.to_jsonl(buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(lines) == len(t1.steps)
    assert set(lines[0]) == {"step", "loss", "unweighted", "phase"}


def test_random_init_scale():
    p = hetero_problem(27, 200, 150, 4)
    f = initial_factors(p, SolverConfig(init="random", seed=1))
    assert np.std(f.a) == pytest.approx(0.5, rel=0.05) and np.std(f.b) == pytest.approx(0.5, rel=0.05)
    assert truncated_svd(p.w, 4).rank == 4
