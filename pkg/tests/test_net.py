import numpy as np
import pytest

from lipfield.net import (Activation, ContractError, MlpParams, apply_activation, backward,
                          forward, init_params, predict)
from lipfield.tensor import DimensionError, logistic, matrix_norm, softplus
from lipfield.evaluation import grad_check


def linear_net(w, b, spatial_dim=1, act="identity"):
    return MlpParams([np.atleast_2d(np.asarray(w, float))], [np.atleast_1d(np.asarray(b, float))],
                     Activation(act), input_scale=1.0, spatial_dim=spatial_dim)


def test_init_sets_bounds_to_initial_norms():
    p = init_params([3, 64, 1], "tanh", True, seed=7)
    for w, c in zip(p.weights, softplus(p.rho)):
        assert c == pytest.approx(matrix_norm(w, "inf"), rel=1e-12)
    assert all(np.all(b == 0) for b in p.biases)


def test_init_is_deterministic():
    a = init_params([3, 16, 16, 1], "relu", True, seed=11)
    b = init_params([3, 16, 16, 1], "relu", True, seed=11)
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()


def test_init_rejects_zero_width():
    with pytest.raises(DimensionError):
        init_params([2, 0, 1], "relu")


def test_zero_network_outputs_zero():
    p = init_params([3, 8, 8, 1], "relu", False, seed=1)
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    y, _ = forward(p, np.random.default_rng(0).random((5, 2)), np.ones((5, 1)))
    np.testing.assert_array_equal(y, 0.0)


def test_single_affine_layer():
    p = linear_net([[2.0]], [1.0])
    y, _ = forward(p, np.array([3.0]), None)
    np.testing.assert_array_equal(y, [7.0])


def test_huge_bounds_match_vanilla():
    rng = np.random.default_rng(5)
    for seed in range(5):
        van = init_params([3, 12, 12, 1], "tanh", False, seed=seed)
        lip = init_params([3, 12, 12, 1], "tanh", True, seed=seed)
        lip.rho[:] = 50.0
        x, t = rng.random((20, 2)), rng.random((20, 1))
        np.testing.assert_allclose(forward(lip, x, t)[0], forward(van, x, t)[0], rtol=0, atol=1e-12)


def test_forward_is_bit_deterministic():
    p = init_params([3, 16, 16, 1], "fullsort", True, seed=2)
    x = np.random.default_rng(1).random((50, 2))
    a = forward(p, x, np.full((50, 1), 0.3))[0]
    b = forward(p, x, np.full((50, 1), 0.3))[0]
    assert a.tobytes() == b.tobytes()
    assert predict(p, x, [0.3]).tobytes() == a.tobytes()


def test_dimension_mismatch():
    p = init_params([3, 4, 1], "relu")
    with pytest.raises(DimensionError):
        forward(p, np.zeros((2, 3)), np.zeros((2, 1)))


def test_linear_gradient_is_input():
    p = linear_net([[0.5, -1.5]], [0.0], spatial_dim=2)
    x = np.array([0.25, 2.0])
    _, c = forward(p, x, None)
    g = backward(p, c, np.array([1.0]))
    np.testing.assert_array_equal(g.d_weights[0], [x])


def test_stale_cache_rejected():
    p = init_params([3, 4, 1], "relu")
    q = p.copy()
    _, c = forward(p, np.zeros(2), np.zeros(1))
    with pytest.raises(ContractError):
        backward(q, c, np.ones(1))


def test_clipped_row_rho_gradient_by_hand():
    # one layer, one row [2, 2] with bound 2: rowsum 4 = 2 * bound, so the row is clipped
    c = 2.0
    rho = np.log(np.expm1(c))
    p = MlpParams([np.array([[2.0, 2.0]])], [np.zeros(1)], Activation("identity"),
                  rho=np.array([rho]), input_scale=1.0, spatial_dim=2)
    x = np.array([0.3, -0.7])
    y, cache = forward(p, x, None)
    assert cache.clipped[0][0]
    g = backward(p, cache, np.ones(1))
    w = p.weights[0][0]
    expected = logistic(rho) / w.__abs__().sum() * (w @ x)
    assert g.d_rho[0] == pytest.approx(expected, rel=1e-14)


def test_unclipped_rows_give_no_rho_gradient():
    p = init_params([3, 8, 1], "tanh", True, seed=3)
    p.rho[:] += 1.0
    _, c = forward(p, np.random.default_rng(0).random((4, 2)), np.zeros((4, 1)))
    g = backward(p, c, np.ones((4, 1)))
    np.testing.assert_array_equal(g.d_rho, 0.0)


def test_activation_examples():
    y, vjp = apply_activation("relu", np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])
    y, vjp = apply_activation("fullsort", np.array([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(vjp(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0])
    y, vjp = apply_activation("tanh", np.array([0.0]))
    assert y[0] == 0.0 and vjp(np.ones(1))[0] == 1.0


def test_fullsort_ties_are_stable():
    y, vjp = apply_activation("fullsort", np.array([1.0, 1.0, 0.0]))
    np.testing.assert_array_equal(vjp(np.array([10.0, 20.0, 30.0])), [20.0, 30.0, 10.0])


def test_leaky_slope_must_be_one_lipschitz():
    with pytest.raises(ValueError):
        Activation("leaky_relu", 1.5)


@pytest.mark.parametrize("act", ["relu", "leaky_relu", "tanh", "sigmoid", "fullsort", "identity"])
@pytest.mark.parametrize("mode", ["vanilla", "lipschitz", "kscale"])
def test_gradients_match_finite_differences(act, mode):
    p = init_params([3, 9, 7, 1], act, mode == "lipschitz", seed=4, input_scale=10.0,
                    kscale=mode == "kscale")
    if p.rho is not None:
        p.rho[:] -= 0.7  # force clipping
    r = grad_check(p, seed=2)
    assert r.max_rel_error < 1e-4, r.worst


def test_sigmoid_output_gradients():
    p = init_params([3, 8, 1], "tanh", True, seed=9, output_activation="sigmoid", input_scale=10.0)
    assert grad_check(p, seed=0).max_rel_error < 1e-4


def test_latent_bound_holds_without_training():
    rng = np.random.default_rng(8)
    p = init_params([4, 16, 16, 1], "relu", True, seed=8)
    p.rho[:] -= 1.0
    bound = np.prod(softplus(p.rho))
    x = rng.random((1, 2))
    for _ in range(200):
        t0, t1 = rng.uniform(-0.5, 1.5, 2), rng.uniform(-0.5, 1.5, 2)
        dy = abs(forward(p, x, t0)[0] - forward(p, x, t1)[0]).max()
        assert dy <= bound * np.abs(t0 - t1).max() * (1 + 1e-12)
