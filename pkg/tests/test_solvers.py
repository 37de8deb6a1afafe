from fractions import Fraction

import numpy as np
import pytest
from conftest import small_truth
from hypothesis import given, settings
from hypothesis import strategies as st

from dbtrecon.projector import DenseOperator, Projector
from dbtrecon.regularizers import RegularizerConfig, estimate_operator_norm, grad_tv_beta, tv, tv_beta
from dbtrecon.solvers import (
    CpOptions,
    FpOptions,
    LambdaSchedule,
    Problem,
    SgpOptions,
    SolverError,
    bb_steplength,
    cg_solve,
    check_stop,
    cp_reconstruct,
    fp_hessian,
    fp_reconstruct,
    initial_volume,
    lambda_schedule,
    objective,
    objective_gradient,
    scaling_bound,
    scaling_entries,
    sgp_reconstruct,
)


@pytest.fixture(scope="module")
def small_problem(small):
    op = Projector(small)
    x = small_truth(small.grid)
    b = op.forward(x) + 0.01 * np.random.default_rng(1).standard_normal(small.data_shape)
    return op, x, b


# objective and gradient

def test_objective_examples(tiny, tiny_dense, rng):
    op = Projector(tiny)
    x = rng.random(tiny.grid.shape)
    b = op.forward(x)
    p = Problem(op, b, lam=0.0)
    assert objective(x, p, 0.0) == 0.0
    assert not objective_gradient(x, p, 0.0).any()
    z = rng.random(x.shape)
    r = tiny_dense.matrix @ z.ravel() - b.ravel()
    assert objective(z, p, 0.0) == pytest.approx(r @ r, rel=1e-12)
    g = 2 * tiny_dense.matrix.T @ r
    np.testing.assert_allclose(objective_gradient(z, p, 0.0).ravel(), g, rtol=1e-12, atol=1e-12)
    c = np.full(x.shape, 0.3)
    assert objective(c, p, 1.0) == pytest.approx(p.least_squares(c) + x.size * 0.001, rel=1e-12)


def test_gradient_finite_differences(tiny, rng):
    op = Projector(tiny)
    p = Problem(op, op.forward(rng.random(tiny.grid.shape)))
    h = 1e-6
    for _ in range(10):
        x = rng.random(tiny.grid.shape)
        lam = float(rng.uniform(0.001, 1.0))
        d = rng.standard_normal(x.shape)
        fd = (objective(x + h * d, p, lam) - objective(x - h * d, p, lam)) / (2 * h)
        an = float(np.vdot(objective_gradient(x, p, lam), d))
        assert abs(fd - an) <= 1e-5 * abs(an)


def test_problem_validation(tiny):
    op = Projector(tiny)
    with pytest.raises(ValueError):
        Problem(op, np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        Problem(op, np.full(tiny.data_shape, np.nan))
    with pytest.raises(ValueError):
        Problem(op, np.zeros(tiny.data_shape), lam=-1.0)
    with pytest.raises(ValueError):
        Problem(op, np.zeros(tiny.data_shape), lam="sometimes")


# SGP building blocks

def test_scaling_entries_examples():
    x = np.array([1.0, 100.0, 0.0])
    v = np.array([2.0, 1.0, 5.0])
    assert scaling_entries(x, v, 10.0).tolist() == [0.5, 10.0, 0.1]
    with pytest.raises(ValueError):
        scaling_entries(x, v, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20), st.floats(1.0001, 1e4), st.integers(0, 2**31))
def test_scaling_entries_bounded(xs, rho, seed):
    x = np.array(xs)
    v = np.random.default_rng(seed).uniform(1e-9, 1e3, x.size)
    s = scaling_entries(x, v, rho)
    assert np.all(s >= 1 / rho) and np.all(s <= rho)


def test_scaling_bound_decreases():
    o = SgpOptions()
    b = [scaling_bound(k, o) for k in range(50)]
    assert all(b1 > b2 > 1 for b1, b2 in zip(b, b[1:]))


def test_bb_examples():
    o = SgpOptions()
    s, y, S = np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.ones(2)
    assert bb_steplength(s, y, S, o, 3) == 0.5
    big = SgpOptions(alpha_max=10.0)
    assert bb_steplength(np.array([1.0, 0.0]), np.array([1e-3, 0.0]), S, big, 3) == 10.0
    assert bb_steplength(s, -y, S, o, 3) == o.alpha_max
    assert bb_steplength(None, None, S, o, 0, alpha0=0.7) == 0.7
    with pytest.raises(ValueError):
        bb_steplength(None, None, S, o, 0)


def test_sgp_dense_quadratic(rng):
    A = rng.standard_normal((40, 12)) + 3 * np.eye(40, 12)
    op = DenseOperator(A, (12, 1, 1), (40, 1, 1))
    x_true = rng.uniform(0.5, 2.0, (12, 1, 1))
    p = Problem(op, op.forward(x_true), lam=0.0)
    r = sgp_reconstruct(p, SgpOptions(max_iter=50, tol=0))
    direct = np.linalg.lstsq(A, op.forward(x_true).ravel(), rcond=None)[0]
    assert r.iterations <= 50
    assert np.linalg.norm(r.volume.ravel() - direct) <= 1e-6 * np.linalg.norm(direct)


def test_sgp_recovers_tiny_truth(tiny, rng):
    op = Projector(tiny)
    x_true = rng.random(tiny.grid.shape) + 0.1
    p = Problem(op, op.forward(x_true), lam=0.0)
    r = sgp_reconstruct(p, SgpOptions(max_iter=200, tol=0))
    assert r.iterations <= 200
    assert np.linalg.norm(r.volume - x_true) <= 1e-5 * np.linalg.norm(x_true)
    f = r.objective_values
    assert np.all(np.diff(f) <= 0)


def test_sgp_monotone_nonnegative_with_tv(small_problem):
    op, _, b = small_problem
    seen = []
    r = sgp_reconstruct(Problem(op, b, lam=0.05), SgpOptions(max_iter=80, tol=0),
                        callback=lambda k, x: seen.append(x.min()))
    assert np.all(np.diff(r.objective_values) <= 0)
    assert min(seen) >= 0 and r.volume.min() >= 0


def test_sgp_rejects_negative_start(small_problem):
    op, _, b = small_problem
    with pytest.raises(ValueError):
        sgp_reconstruct(Problem(op, b), x0=-np.ones(op.vol_shape))


def test_sgp_line_search_failure_is_reported(small_problem, monkeypatch):
    op, _, b = small_problem
    import dbtrecon.solvers.sgp as sgp

    # a gradient with the wrong sign can never satisfy the Armijo condition
    monkeypatch.setattr(sgp, "grad_tv_beta", lambda x, reg: -1e6 * grad_tv_beta(x, reg))
    with pytest.raises(SolverError, match="line search"):
        sgp.sgp_reconstruct(Problem(op, b, lam=1.0), SgpOptions(max_iter=20, tol=0))


# conjugate gradients and FP

def test_cg_examples(rng):
    rhs = rng.standard_normal(7)
    np.testing.assert_allclose(cg_solve(lambda v: v, rhs, 1), rhs, rtol=1e-15)
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(cg_solve(lambda v: H @ v, np.array([1.0, 2.0]), 2), [1 / 11, 7 / 11],
                               rtol=1e-14)
    B = rng.standard_normal((10, 10))
    H = B @ B.T + 10 * np.eye(10)
    rhs = rng.standard_normal(10)
    np.testing.assert_allclose(cg_solve(lambda v: H @ v, rhs, 10), np.linalg.solve(H, rhs),
                               rtol=0, atol=1e-8)
    with pytest.raises(ValueError):
        cg_solve(lambda v: v, rhs, 0)


def test_cg_breakdown_returns_iterate():
    d = cg_solve(lambda v: -v, np.ones(3), 5)
    assert not d.any()


def test_fp_budget_accounting():
    o = FpOptions(outer_iter=3, cg_iter=4)
    assert o.budget == 15 and o.cost_per_outer == 5
    assert FpOptions.for_budget(5).outer_iter == 1
    assert FpOptions.for_budget(30).outer_iter == 6


def test_fp_hessian_symmetric(small_problem, rng):
    op, x, b = small_problem
    p = Problem(op, b, lam=0.005)
    H = fp_hessian(p, x, 0.005)
    for _ in range(5):
        u, v = rng.standard_normal((2,) + op.vol_shape)
        a, c = float(np.vdot(H(u), v)), float(np.vdot(u, H(v)))
        assert abs(a - c) <= 1e-10 * max(abs(a), 1.0)
        assert float(np.vdot(u, H(u))) > 0


def test_fp_single_step_matches_dense_newton(tiny, tiny_dense, rng):
    lam = 0.01
    x_true = rng.random(tiny.grid.shape)
    p = Problem(tiny_dense, tiny_dense.forward(x_true), lam=lam)
    x0 = initial_volume(p)
    r = fp_reconstruct(p, FpOptions(outer_iter=1, cg_iter=tiny.grid.n_voxels), x0=x0)
    n = tiny.grid.n_voxels
    apply_h = fp_hessian(p, x0, lam)
    H = np.column_stack([apply_h(e.reshape(x0.shape)).ravel() for e in np.eye(n)])
    g = objective_gradient(x0, p, lam).ravel()
    d = np.linalg.solve(H, -0.5 * g)
    np.testing.assert_allclose(r.info["unprojected"].ravel(), x0.ravel() + d, rtol=0, atol=1e-8)


def test_fp_descends_on_desk_phantom(desk, desk_projector):
    from dbtrecon.phantom import PhantomSpec, generate_phantom

    x = generate_phantom(PhantomSpec(), desk.grid)
    p = Problem(desk_projector, desk_projector.forward(x), lam=0.001)
    r = fp_reconstruct(p, FpOptions(outer_iter=10, cg_iter=4))
    f = r.objective_values
    assert np.all(np.diff(f) < 0)
    assert [h.budget for h in r.history] == [5 * k for k in range(11)]


# Chambolle-Pock

def test_cp_dual_feasibility_and_steps(small_problem):
    op, _, b = small_problem
    lam = 0.05
    r = cp_reconstruct(Problem(op, b, lam=lam), CpOptions(max_iter=200))
    assert max(r.info["dual_tv_max"]) <= lam + 1e-12
    gamma = estimate_operator_norm(op, 2)
    assert r.info["gamma"] == gamma
    assert r.info["tau"] == r.info["sigma"] == 1.0 / gamma


def test_cp_best_so_far_non_increasing(small_problem):
    op, _, b = small_problem
    r = cp_reconstruct(Problem(op, b, lam=0.05), CpOptions(max_iter=300))
    best = np.minimum.accumulate(r.objective_values)
    assert np.all(np.diff(best) <= 0)
    assert np.all(np.isfinite(r.objective_values))


def test_cp_large_lambda_gives_constant(small, small_problem):
    op, _, _ = small_problem
    b = op.forward(np.full(small.grid.shape, 0.4))
    r = cp_reconstruct(Problem(op, b, lam=50.0), CpOptions(max_iter=3000),
                       x0=np.zeros(small.grid.shape))
    v = r.volume
    assert v.std() <= 1e-3 * v.mean()
    assert v.mean() == pytest.approx(0.4, rel=1e-3)


def test_cp_shrinkage_variant_runs(small_problem):
    op, _, b = small_problem
    r = cp_reconstruct(Problem(op, b, lam=0.05), CpOptions(max_iter=20, prox_variant="shrinkage",
                                                           epsilon=0.1))
    assert np.all(np.isfinite(r.volume)) and r.volume.min() >= 0
    with pytest.raises(ValueError):
        CpOptions(prox_variant="other")


def test_solvers_agree(small_problem):
    op, _, b = small_problem
    lam = 0.005
    p = Problem(op, b, lam=lam)
    ref = sgp_reconstruct(p, SgpOptions(max_iter=20000, tol=1e-12))
    f_ref = objective(ref.volume, p, lam)
    runs = {
        "sgp": sgp_reconstruct(p, SgpOptions(max_iter=500, tol=0)),
        "fp": fp_reconstruct(p, FpOptions(outer_iter=200, cg_iter=10)),
        "cp": cp_reconstruct(p, CpOptions(max_iter=2000)),
    }
    for name, r in runs.items():
        assert abs(objective(r.volume, p, lam) - f_ref) <= 1e-3 * f_ref, name


# lambda schedule and stopping rule

def test_lambda_schedule_examples(small_problem):
    op, x, b = small_problem
    p = Problem(op, b, lam="auto")
    assert lambda_schedule(0, None, p) == 0.0
    lam1 = lambda_schedule(1, x, p)
    assert lam1 == np.sqrt(p.least_squares(x)) / tv(x)
    assert lambda_schedule(4, x, p) == lam1 / 4
    with pytest.raises(ValueError):
        lambda_schedule(1, None, p)


def test_lambda_one_formula():
    # LS(x1) = 4, TV(x1) = 100 -> 0.02
    x1 = np.zeros((101, 1, 1))
    x1[1:, 0, 0] = 1.0  # one unit jump of height ... scaled below
    x1 *= 100.0
    op = DenseOperator(np.eye(101), x1.shape, x1.shape)
    b = x1.copy()
    b[0, 0, 0] = 2.0  # residual 2 in one entry -> LS = 4
    p = Problem(op, b, lam="auto")
    assert tv(x1) == 100.0 and p.least_squares(x1) == 4.0
    assert lambda_schedule(1, x1, p) == 0.02
    assert 0.02 / 4 == 0.005


def test_lambda_schedule_fallback_on_flat_first_iterate(caplog):
    op = DenseOperator(np.eye(8), (2, 2, 2), (2, 2, 2))
    p = Problem(op, np.ones((2, 2, 2)), lam="auto", lambda_fallback=0.007)
    s = LambdaSchedule(p)
    s.observe_first(np.ones((2, 2, 2)))
    assert s(1) == s(5) == 0.007
    assert "zero total variation" in caplog.text


def test_schedule_in_history(small_problem):
    op, _, b = small_problem
    r = sgp_reconstruct(Problem(op, b, lam="auto"), SgpOptions(max_iter=40, tol=0))
    lams = [h.lam for h in r.history]
    lam1 = r.info["lambda1"]
    assert lams[0] == 0.0 and lams[1] == 0.0  # iterate 1 is computed with lambda_0
    emitted = lams[2:]
    assert emitted[0] == lam1
    assert all(a > b for a, b in zip(emitted, emitted[1:]))
    for k, lam_k in enumerate(emitted, start=1):
        # the float nearest to lam1 / k
        assert lam_k == float(Fraction(lam1) / k)


def test_check_stop_examples():
    assert check_stop(1.0, 1.000001, 1e-6) is False
    assert check_stop(1.0, 1.0, 1e-6) is True
    assert check_stop(1.0, 2.0, 1e-6) is False
    assert check_stop(0.0, 3.0, 1e-6) is True
    assert check_stop(1.0, float("inf"), 1e-6) is False
    # ratio equal to tol in decimal is not below tol
    assert check_stop(4.0, 4.4, 0.1) is False
    assert check_stop(10.0, 9.7, 0.03) is False
    assert check_stop(10.0, 9.71, 0.03) is True


def test_sgp_stops_on_desk_data(desk, desk_projector):
    from dbtrecon.phantom import NoiseSpec, PhantomSpec, generate_phantom, simulate_projections

    x = generate_phantom(PhantomSpec(), desk.grid)
    b = simulate_projections(desk, x, NoiseSpec("gaussian", sigma=0.002, seed=0), desk_projector)
    r = sgp_reconstruct(Problem(desk_projector, b, lam=0.005), SgpOptions(max_iter=499, tol=1e-6))
    assert r.termination_reason == "converged"
    assert r.iterations < 500
    assert np.all(np.diff(r.objective_values) <= 0)
