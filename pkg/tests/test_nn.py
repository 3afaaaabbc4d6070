import math

import numpy as np
import pytest
from conftest import central_difference, relative_error
from hypothesis import given
from hypothesis import strategies as st

from cmonge import nn
from cmonge.exceptions import NumericalError


def test_gelu_examples():
    assert nn.gelu(0.0) == 0.0
    assert nn.gelu(10.0) == pytest.approx(10.0, rel=1e-12)
    # x * Phi(x) with Phi written through erf
    for x in (-1.3, 0.2, 2.5):
        assert nn.gelu(x) == pytest.approx(x * 0.5 * (1 + math.erf(x / math.sqrt(2))), rel=1e-14)


@pytest.mark.parametrize("x", [-2.0, -0.5, 0.3, 4.0])
def test_gelu_grad_matches_finite_differences(x):
    h = 1e-5
    fd = (nn.gelu(x + h) - nn.gelu(x - h)) / (2 * h)
    assert abs(nn.gelu_grad(x) - fd) / abs(fd) < 1e-6


def _naive_forward(params, X):
    out = []
    for row in X:
        a = list(row)
        for k, (W, b) in enumerate(zip(params.weights, params.biases)):
            z = []
            for i in range(W.shape[0]):
                s = b[i]
                for j in range(W.shape[1]):
                    s += W[i, j] * a[j]
                z.append(s)
            last = k == params.n_layers - 1
            a = z if last else [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in z]
        out.append(a)
    return np.array(out)


def test_forward_zero_network():
    p = nn.MlpParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    out, tape = nn.mlp_forward(p, np.ones((5, 3)))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))
    assert tape.depth == 2


def test_forward_identity_layer():
    p = nn.MlpParams([np.eye(3)], [np.zeros(3)])
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(nn.mlp_forward(p, X)[0], X)


def test_forward_matches_scalar_loops():
    rng = np.random.default_rng(1)
    p = nn.init_params([3, 5, 2], seed=4)
    p.biases = [rng.normal(size=5), rng.normal(size=2)]
    X = rng.normal(size=(6, 3))
    np.testing.assert_allclose(nn.mlp_forward(p, X)[0], _naive_forward(p, X), rtol=1e-13, atol=1e-14)


def test_forward_rejects_width_mismatch():
    with pytest.raises(ValueError):
        nn.mlp_forward(nn.init_params([3, 2], 0), np.zeros((1, 4)))


def test_backward_scalar_case():
    p = nn.MlpParams([np.array([[2.0]])], [np.array([0.0])])
    _, tape = nn.mlp_forward(p, np.array([[3.0]]))
    grads, gx = nn.mlp_backward(p, tape, np.array([[1.0]]))
    assert grads.weights[0][0, 0] == 3.0
    assert grads.biases[0][0] == 1.0
    assert gx[0, 0] == 2.0


def test_backward_linear_layer_sums_over_batch():
    p = nn.MlpParams([np.ones((2, 3))], [np.zeros(2)])
    X = np.arange(12.0).reshape(4, 3)
    _, tape = nn.mlp_forward(p, X)
    grads, _ = nn.mlp_backward(p, tape, np.ones((4, 2)))
    np.testing.assert_array_equal(grads.weights[0], np.tile(X.sum(axis=0), (2, 1)))


def test_backward_zero_grad_output():
    p = nn.init_params([3, 4, 4, 2], seed=2)
    _, tape = nn.mlp_forward(p, np.ones((3, 3)))
    grads, gx = nn.mlp_backward(p, tape, np.zeros((3, 2)))
    assert all(not np.any(a) for a in grads.arrays())
    assert not np.any(gx)


def test_backward_rejects_mismatched_tape():
    p = nn.init_params([3, 4, 2], seed=0)
    _, tape = nn.mlp_forward(nn.init_params([3, 2], seed=0), np.ones((1, 3)))
    with pytest.raises(ValueError):
        nn.mlp_backward(p, tape, np.ones((1, 2)))


def _check_backward(sizes, seed, batch=4):
    rng = np.random.default_rng(seed)
    p = nn.init_params(sizes, seed=seed)
    p.biases = [0.1 * rng.normal(size=b.shape) for b in p.biases]
    X = rng.normal(size=(batch, sizes[0]))
    G = rng.normal(size=(batch, sizes[-1]))
    _, tape = nn.mlp_forward(p, X)
    grads, gx = nn.mlp_backward(p, tape, G)

    for k, arr in enumerate(p.arrays()):

        def f(a, k=k):
            arrays = p.arrays()
            arrays[k] = a
            return float(np.sum(G * nn.mlp_forward(nn.MlpParams.from_arrays(arrays), X)[0]))

        assert relative_error(grads.arrays()[k], central_difference(f, arr.copy(), h=1e-5)) < 1e-4

    def fx(x):
        return float(np.sum(G * nn.mlp_forward(p, x)[0]))

    assert relative_error(gx, central_difference(fx, X, h=1e-5)) < 1e-4


def test_backward_three_layer_finite_differences():
    _check_backward([4, 6, 5, 3], seed=0)


@given(
    widths=st.lists(st.integers(1, 32), min_size=2, max_size=5),
    seed=st.integers(0, 2**16),
)
def test_backward_property(widths, seed):
    _check_backward(widths, seed, batch=3)


def test_adamw_zero_gradient_is_pure_decay():
    p = [np.array([1.0, -2.0, 3.0])]
    state = nn.AdamWState(lr=0.1, weight_decay=0.01)
    new, state = nn.adamw_step(p, [np.zeros(3)], state)
    np.testing.assert_array_equal(new[0], p[0] * (1 - 0.1 * 0.01))
    assert state.step == 1


def test_adamw_decay_trajectory_depends_on_product():
    p = [np.array([2.0])]
    a, b = nn.AdamWState(lr=0.1, weight_decay=0.02), nn.AdamWState(lr=0.02, weight_decay=0.1)
    pa, pb = p, p
    for _ in range(20):
        pa, a = nn.adamw_step(pa, [np.zeros(1)], a)
        pb, b = nn.adamw_step(pb, [np.zeros(1)], b)
    assert pa[0][0] == pytest.approx(2.0 * (1 - 0.002) ** 20, rel=1e-14)
    assert pa[0][0] == pytest.approx(pb[0][0], rel=1e-14)


def test_adamw_first_step_scalar():
    # bias-corrected m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    new, _ = nn.adamw_step([np.array([0.0])], [np.array([1.0])], nn.AdamWState(lr=0.1, weight_decay=0.0))
    assert new[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-14)
    new, _ = nn.adamw_step([np.array([0.0])], [np.array([1.0])], nn.AdamWState(lr=0.1))
    assert new[0][0] == pytest.approx(-0.1, rel=1e-6)


def test_adamw_does_not_mutate_inputs():
    p = [np.ones(2)]
    s = nn.AdamWState()
    nn.adamw_step(p, [np.ones(2)], s)
    np.testing.assert_array_equal(p[0], np.ones(2))
    assert s.step == 0 and s.m is None


def test_adamw_is_deterministic():
    rng = np.random.default_rng(0)
    grads = [[rng.normal(size=(3, 2))] for _ in range(5)]

    def run():
        p, s = [np.ones((3, 2))], nn.AdamWState(lr=1e-2)
        for g in grads:
            p, s = nn.adamw_step(p, g, s)
        return p[0]

    assert run().tobytes() == run().tobytes()


def test_adamw_rejects_bad_gradients():
    with pytest.raises(NumericalError):
        nn.adamw_step([np.ones(2)], [np.array([np.nan, 0.0])], nn.AdamWState())
    with pytest.raises(ValueError):
        nn.adamw_step([np.ones(2)], [np.ones(3)], nn.AdamWState())


def test_init_is_seeded():
    a, b = nn.init_params([5, 7, 2], 3), nn.init_params([5, 7, 2], 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    c = nn.init_params([5, 7, 2], 4)
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert all(not np.any(bias) for bias in a.biases)


def test_init_glorot_variance():
    W = nn.init_params([64, 64], 0).weights[0]
    assert abs(W.var() - 2 / 128) <= 0.2 * 2 / 128


def test_init_rejects_empty_sizes():
    with pytest.raises(ValueError):
        nn.init_params([], 0)
    with pytest.raises(ValueError):
        nn.init_params([3], 0)


def test_params_reject_broken_chain():
    with pytest.raises(ValueError):
        nn.MlpParams([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])
