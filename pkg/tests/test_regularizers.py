import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbtrecon.projector import DenseOperator
from dbtrecon.regularizers import (
    GradientField,
    RegularizerConfig,
    apply_diffusion,
    divergence_adjoint,
    estimate_operator_norm,
    grad_tv_beta,
    spatial_gradient,
    tv,
    tv_beta,
)

CFG = RegularizerConfig(beta=0.001)
small = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
               elements=st.floats(-10, 10))


def loop_gradient(x):
    nx, ny, nz = x.shape
    g = np.zeros((3,) + x.shape)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if i < nx - 1:
                    g[0, i, j, k] = x[i + 1, j, k] - x[i, j, k]
                if j < ny - 1:
                    g[1, i, j, k] = x[i, j + 1, k] - x[i, j, k]
                if k < nz - 1:
                    g[2, i, j, k] = x[i, j, k + 1] - x[i, j, k]
    return g


def test_gradient_examples():
    x = np.array([0.0, 1.0]).reshape(2, 1, 1)
    g = spatial_gradient(x)
    assert g.gx.ravel().tolist() == [1.0, 0.0]
    assert divergence_adjoint(GradientField(np.array([1.0, 0.0]).reshape(2, 1, 1),
                                            np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
                              ).ravel().tolist() == [-1.0, 1.0]
    assert tv(x) == 1.0
    assert not spatial_gradient(np.full((3, 3, 3), 2.0)).magnitude_sq().any()


def test_gradient_matches_loop_oracle(rng):
    x = rng.standard_normal((5, 4, 3))
    g = spatial_gradient(x)
    oracle = loop_gradient(x)
    assert np.array_equal(np.stack(g), oracle)
    assert tv(x) == pytest.approx(np.sqrt((oracle ** 2).sum(0)).sum(), rel=1e-12)


def test_divergence_is_adjoint(rng):
    for _ in range(5):
        x = rng.standard_normal((5, 4, 3))
        g = GradientField(*rng.standard_normal((3, 5, 4, 3)))
        lhs = spatial_gradient(x).dot(g)
        rhs = float(np.vdot(x, divergence_adjoint(g)))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_tv_beta_constant_volume():
    assert tv_beta(np.full((10, 10, 10), 3.0), CFG) == pytest.approx(1.0, rel=1e-12)
    assert tv(np.full((10, 10, 10), 3.0)) == 0.0


def test_tv_beta_small_beta_limit():
    x = np.array([0.0, 1.0]).reshape(2, 1, 1)
    assert tv_beta(x, RegularizerConfig(beta=1e-12)) == pytest.approx(1.0, abs=1e-11)


@settings(max_examples=60, deadline=None)
@given(small, st.floats(1e-6, 1.0))
def test_tv_bounds(x, beta):
    cfg = RegularizerConfig(beta=beta)
    t, tb = tv(x), tv_beta(x, cfg)
    assert t <= tb * (1 + 1e-12)
    assert tb <= (t + x.size * beta) * (1 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(small, st.floats(-1e3, 1e3))
def test_tv_translation_invariant(x, c):
    # dyadic values and shifts keep every difference exact
    c = float(np.float64(2.0) ** int(np.clip(np.round(np.log2(abs(c) + 1)), 0, 3)))
    x = np.round(x * 8) / 8
    assert tv(x + c) == tv(x)


def test_grad_tv_beta_finite_differences(rng):
    h = 1e-6
    for _ in range(10):
        x = rng.random((4, 4, 3))
        d = rng.standard_normal(x.shape)
        fd = (tv_beta(x + h * d, CFG) - tv_beta(x - h * d, CFG)) / (2 * h)
        an = float(np.vdot(grad_tv_beta(x, CFG), d))
        assert abs(fd - an) <= 1e-5 * abs(an)


def test_grad_tv_beta_constant_is_zero():
    assert not grad_tv_beta(np.full((4, 4, 3), 0.7), CFG).any()


def test_grad_tv_beta_large_scale_limit(rng):
    x = rng.random((4, 4, 3))
    g = spatial_gradient(x)
    mag = np.sqrt(g.magnitude_sq())
    sub = divergence_adjoint(g.scaled(np.where(mag > 0, 1.0 / np.where(mag > 0, mag, 1), 0.0)))
    err = [np.abs(grad_tv_beta(c * x, CFG) - sub).max() for c in (1.0, 10.0, 1e3)]
    assert err[0] > err[1] > err[2]
    assert err[2] < 1e-4


def test_diffusion_identity_and_symmetry(rng):
    x = rng.random((5, 4, 3))
    assert np.abs(apply_diffusion(x, x, CFG) - grad_tv_beta(x, CFG)).max() <= 1e-12
    u, v = rng.standard_normal((2, 5, 4, 3))
    a = float(np.vdot(apply_diffusion(x, u, CFG), v))
    b = float(np.vdot(u, apply_diffusion(x, v, CFG)))
    assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)
    assert not np.abs(apply_diffusion(x, np.full(x.shape, 2.0), CFG)).max() > 1e-12
    # linear in the second argument
    lhs = apply_diffusion(x, 3.0 * u + v, CFG)
    rhs = 3.0 * apply_diffusion(x, u, CFG) + apply_diffusion(x, v, CFG)
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(lhs).max()
    assert float(np.vdot(u, apply_diffusion(x, u, CFG))) >= 0


def _dense_k_norm(A, shape):
    n = A.shape[1]
    rows = [A]
    for axis in range(3):
        D = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            D[:, j] = np.stack(spatial_gradient(e.reshape(shape)))[axis].ravel()
        rows.append(D)
    K = np.vstack(rows)
    return float(np.sqrt(np.linalg.eigvalsh(K.T @ K).max()))


def test_power_method_against_dense(tiny_dense):
    true = _dense_k_norm(tiny_dense.matrix, tiny_dense.vol_shape)
    g2 = estimate_operator_norm(tiny_dense, 2)
    g50 = estimate_operator_norm(tiny_dense, 50)
    assert abs(g2 - true) <= 0.25 * true
    assert abs(g50 - true) <= 1e-3 * true


def test_power_method_identity():
    # K = [I; grad] on a 1-voxel grid: the gradient vanishes, K = I
    op = DenseOperator(np.eye(1), (1, 1, 1), (1, 1, 1))
    assert estimate_operator_norm(op, 2) == pytest.approx(1.0, abs=1e-6)


def test_power_method_restarts_from_null_space():
    # M = 0 and a 1-D gradient: K^T K is the path-graph Laplacian
    op = DenseOperator(np.zeros((1, 4)), (4, 1, 1), (1, 1, 1))
    # path-graph Laplacian on 4 nodes: lambda_max = 2 + 2 cos(pi / 4)
    assert estimate_operator_norm(op, 200) == pytest.approx(np.sqrt(2 + np.sqrt(2)), rel=1e-6)
    with pytest.raises(ValueError):
        estimate_operator_norm(op, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        RegularizerConfig(beta=0.0)
    with pytest.raises(ValueError):
        RegularizerConfig(weights=(1.0, -1.0, 1.0))
