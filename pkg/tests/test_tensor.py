import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lipfield.tensor import (DimensionError, make_rng, matmul, matrix_norm, matvec,
                             softplus, softplus_inv, spectral_norm_and_grad)


@pytest.mark.parametrize("kind", ["inf", "one", "spectral"])
def test_identity_has_unit_norm(kind):
    assert matrix_norm(np.eye(2), kind) == pytest.approx(1.0, abs=1e-15)


def test_row_and_column_sums():
    m = np.array([[1.0, -2.0], [3.0, 4.0]])
    assert matrix_norm(m, "inf") == 7.0
    assert matrix_norm(m, "one") == 6.0


def test_spectral_of_diagonal():
    assert matrix_norm(np.array([[3.0, 0.0], [0.0, -5.0]]), "spectral") == pytest.approx(5.0, rel=1e-12)


def test_spectral_matches_svd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = rng.standard_normal((rng.integers(1, 30), rng.integers(1, 30)))
        assert matrix_norm(m, "spectral") == pytest.approx(np.linalg.svd(m, compute_uv=False)[0], rel=1e-6)


def test_spectral_grad_is_finite_difference_consistent():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((5, 4))
    s, g = spectral_norm_and_grad(m)
    e = np.zeros_like(m)
    e[2, 1] = 1e-6
    fd = (matrix_norm(m + e, "spectral") - matrix_norm(m - e, "spectral")) / 2e-6
    assert g[2, 1] == pytest.approx(fd, rel=1e-5)


def test_empty_matrix_rejected():
    with pytest.raises(DimensionError):
        matrix_norm(np.zeros((0, 3)))


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3)),
       st.floats(-10, 10))
@settings(max_examples=200, deadline=None)
def test_norm_properties(m, alpha):
    assert matrix_norm(m, "inf") == pytest.approx(matrix_norm(m.T, "one"), rel=1e-12, abs=0)
    for kind in ("inf", "one", "spectral"):
        a = matrix_norm(alpha * m, kind)
        b = abs(alpha) * matrix_norm(m, kind)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-300)


def test_matmul_and_matvec():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matvec(a, np.ones(2)), [3.0, 7.0])
    v = np.array([0.3, -2.0])
    np.testing.assert_array_equal(matvec(np.eye(2), v), v)
    np.testing.assert_array_equal(matvec(a, np.zeros(2)), np.zeros(2))
    np.testing.assert_array_equal(matmul(a, np.eye(2)), a)
    with pytest.raises(DimensionError):
        matmul(a, np.ones((3, 1)))
    with pytest.raises(DimensionError):
        matvec(a, np.ones(3))


def test_rng_streams_are_reproducible():
    a = make_rng(42).standard_normal(1000)
    b = make_rng(42).standard_normal(1000)
    assert a.tobytes() == b.tobytes()
    assert make_rng(43).standard_normal(3).tobytes() != a[:3].tobytes()


def test_softplus_round_trip():
    y = np.array([1e-6, 0.3, 1.0, 7.5, 40.0, 900.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)
