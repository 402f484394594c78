import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parslab import nn_core
from parslab.nn_core import ACTIVATIONS, MlpParams, MlpSpec, ShapeError

from .helpers import fd_gradient_check


def small_params(spec, seed=0):
    return nn_core.mlp_init(spec, seed)


# ---------------------------------------------------------------------------
# init


def test_init_shapes_follow_spec():
    p = small_params(MlpSpec(5, 1, (256, 256)))
    assert p.weights[0].shape == (256, 5)
    assert p.weights[1].shape == (256, 256)
    assert p.weights[2].shape == (1, 256)
    assert p.ln_scale == [] and p.ln_shift == []


def test_init_is_deterministic_per_seed():
    spec = MlpSpec(3, 2, (8, 8), use_ln=True)
    assert small_params(spec, 0).equals(small_params(spec, 0))
    assert not small_params(spec, 0).equals(small_params(spec, 1))


def test_init_ln_parameters_start_at_identity():
    p = small_params(MlpSpec(3, 1, (4, 6), use_ln=True))
    for eta, beta in zip(p.ln_scale, p.ln_shift):
        np.testing.assert_array_equal(eta, 1.0)
        np.testing.assert_array_equal(beta, 0.0)


def test_init_uniform_fan_in_bound():
    p = small_params(MlpSpec(16, 1, (32,)), 3)
    assert np.all(np.abs(p.weights[0]) <= 1 / np.sqrt(16))
    assert np.all(np.abs(p.weights[1]) <= 1 / np.sqrt(32))


@pytest.mark.parametrize(
    "kwargs",
    [dict(input_dim=0, output_dim=1), dict(input_dim=1, output_dim=1, hidden_dims=()), dict(input_dim=1, output_dim=1, activation="tanhh")],
)
def test_spec_rejects_bad_fields(kwargs):
    with pytest.raises(ValueError):
        MlpSpec(**kwargs)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_vector_collapses_to_shift():
    np.testing.assert_array_equal(nn_core.layer_norm(np.ones(3), 1.0, 0.0), np.zeros(3))


def test_layer_norm_standardized_input_is_fixed_point():
    out = nn_core.layer_norm(np.array([-1.0, 1.0]), 1.0, 0.0, eps=0.0)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-15)


def test_layer_norm_elementwise_formula():
    h = np.array([0.0, 2.0, 4.0])
    mean, var = 2.0, 8.0 / 3.0
    expected = (h - mean) / np.sqrt(var + 1e-5) + 1.0
    np.testing.assert_allclose(nn_core.layer_norm(h, 1.0, 1.0), expected, rtol=0, atol=1e-14)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=32))
def test_layer_norm_standardizes(values):
    h = np.array(values)
    if h.var() < 1e-6:
        return
    out = nn_core.layer_norm(h, 1.0, 0.0, eps=0.0)
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# forward


def test_zero_network_outputs_zero():
    p = small_params(MlpSpec(3, 2, (5,)))
    p = p.zeros_like()
    out, _ = nn_core.mlp_forward(p, np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(out, 0.0)


def test_single_relu_unit_clamps():
    spec = MlpSpec(1, 1, (1,))
    p = MlpParams(spec, [np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], [], [])
    out, _ = nn_core.mlp_forward(p, np.array([-3.0]))
    assert out[0] == 0.0


def test_hand_set_two_unit_net():
    spec = MlpSpec(2, 1, (2,), activation="sigmoid")
    W1 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b1 = np.array([0.1, -0.3])
    W2 = np.array([[1.5, -0.7]])
    b2 = np.array([0.2])
    p = MlpParams(spec, [W1, W2], [b1, b2], [], [])
    x = np.array([0.3, -0.8])
    # unit-by-unit evaluation
    u0 = 0.5 * 0.3 + -1.0 * -0.8 + 0.1
    u1 = 2.0 * 0.3 + 0.25 * -0.8 - 0.3
    h0 = 1 / (1 + np.exp(-u0))
    h1 = 1 / (1 + np.exp(-u1))
    expected = 1.5 * h0 - 0.7 * h1 + 0.2
    out, _ = nn_core.mlp_forward(p, x)
    assert abs(out[0] - expected) < 1e-12


def test_forward_rejects_wrong_width():
    p = small_params(MlpSpec(3, 1, (4,)))
    with pytest.raises(ShapeError):
        nn_core.mlp_forward(p, np.zeros((2, 4)))


def test_output_layer_is_unbounded():
    spec = MlpSpec(1, 1, (8,), use_ln=True)
    p = small_params(spec).map(lambda a: a * 50.0)
    out, _ = nn_core.mlp_forward(p, np.array([[1.0], [-1.0]]))
    assert np.max(np.abs(out)) > 10.0


# ---------------------------------------------------------------------------
# backward


def test_zero_output_grads_give_zero_gradient():
    p = small_params(MlpSpec(3, 1, (4, 4), use_ln=True))
    x = np.random.default_rng(1).normal(size=(5, 3))
    _, tr = nn_core.mlp_forward(p, x, want_trace=True)
    g, gx = nn_core.mlp_backward(p, tr, np.zeros((5, 1)))
    assert np.all(g.flatten() == 0.0)
    assert np.all(gx == 0.0)


def test_linear_net_matches_least_squares_gradient():
    rng = np.random.default_rng(2)
    spec = MlpSpec(3, 1, (4,), activation="none")
    p = small_params(spec, 2)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    # Collapsed model: f(x) = x @ w + c with w = W1^T W2^T, c = W2 b1 + b2
    W1, W2 = p.weights
    b1, b2 = p.biases
    pred = x @ (W2 @ W1).ravel() + (W2 @ b1 + b2)[0]
    resid = pred - y
    out, tr = nn_core.mlp_forward(p, x, want_trace=True)
    np.testing.assert_allclose(out[:, 0], pred, atol=1e-12)
    g, _ = nn_core.mlp_backward(p, tr, (2 * resid)[:, None])
    # d/dW2 of mean (f - y)^2 = mean 2 r (W1 x + b1)^T
    h = x @ W1.T + b1
    np.testing.assert_allclose(g.weights[1], (2 * resid[:, None] * h).mean(axis=0)[None, :], atol=1e-12)
    np.testing.assert_allclose(g.biases[1], [np.mean(2 * resid)], atol=1e-12)
    np.testing.assert_allclose(g.weights[0], np.outer(W2.ravel(), (2 * resid[:, None] * x).mean(axis=0)), atol=1e-12)


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("use_ln", [False, True])
def test_gradient_matches_finite_differences(activation, use_ln):
    spec = MlpSpec(3, 2, (5, 4), activation, use_ln)
    err = fd_gradient_check(spec, seed=11)
    assert err < 1e-4


def test_input_gradients_match_finite_differences():
    spec = MlpSpec(3, 1, (6, 5), "gelu", True)
    p = small_params(spec, 4)
    x = np.random.default_rng(4).normal(size=(3, 3))
    _, tr = nn_core.mlp_forward(p, x, want_trace=True)
    _, gx = nn_core.mlp_backward(p, tr, np.ones((3, 1)))
    h = 1e-6
    for i in range(3):
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (nn_core.mlp_forward(p, xp)[0][i, 0] - nn_core.mlp_forward(p, xm)[0][i, 0]) / (2 * h)
            assert abs(fd - gx[i, j]) < 1e-6 * max(1.0, abs(fd))


def test_per_sample_grads_sum_to_batch_gradient():
    spec = MlpSpec(2, 1, (6, 6), "silu", True)
    p = small_params(spec, 5)
    x = np.random.default_rng(5).normal(size=(7, 2))
    per = nn_core.per_sample_grads(p, x)
    batch = nn_core.mlp_grad(p, x, np.ones((7, 1)))
    np.testing.assert_allclose(per.mean(axis=0), batch.flatten(), atol=1e-12)


def test_backward_rejects_mismatched_grads():
    p = small_params(MlpSpec(2, 1, (3,)))
    _, tr = nn_core.mlp_forward(p, np.zeros((4, 2)), want_trace=True)
    with pytest.raises(ShapeError):
        nn_core.mlp_backward(p, tr, np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# Adam and soft updates


def test_adam_zero_gradient_leaves_params():
    p = small_params(MlpSpec(2, 1, (3,)))
    new, _ = nn_core.adam_step(p, p.zeros_like(), nn_core.adam_init(p))
    assert new.equals(p)


def test_adam_first_step_hand_computation():
    spec = MlpSpec(1, 1, (1,), activation="none")
    p = small_params(spec)
    g = p.map(lambda a: np.ones_like(a))
    state = nn_core.adam_init(p, lr=1e-3)
    new, state2 = nn_core.adam_step(p, g, state)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    step = 1e-3 / (1.0 + 1e-8)
    np.testing.assert_allclose(p.flatten() - new.flatten(), step, rtol=0, atol=1e-18)
    assert state2.t == 1


def test_adam_is_pure():
    p = small_params(MlpSpec(2, 1, (3,)))
    g = p.map(lambda a: np.full_like(a, 0.3))
    s = nn_core.adam_init(p)
    a1, s1 = nn_core.adam_step(p, g, s)
    a2, s2 = nn_core.adam_step(p, g, s)
    assert a1.equals(a2) and s1.t == s2.t == 1
    assert s.t == 0


def test_soft_update_edges_and_midpoint():
    spec = MlpSpec(2, 1, (3,))
    online = small_params(spec).map(lambda a: np.full_like(a, 2.0))
    target = online.zeros_like()
    assert nn_core.soft_update(target, online, 0.0).equals(target)
    assert nn_core.soft_update(target, online, 1.0).equals(online)
    np.testing.assert_array_equal(nn_core.soft_update(target, online, 0.5).flatten(), 1.0)
    with pytest.raises(ValueError):
        nn_core.soft_update(target, online, 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.booleans())
def test_updates_preserve_shapes(seed, tau, use_ln):
    p = small_params(MlpSpec(3, 2, (4, 5), use_ln=use_ln), seed)
    q = small_params(MlpSpec(3, 2, (4, 5), use_ln=use_ln), seed + 1)
    shapes = [a.shape for a in p.arrays()]
    new, _ = nn_core.adam_step(p, q, nn_core.adam_init(p))
    assert [a.shape for a in new.arrays()] == shapes
    assert [a.shape for a in nn_core.soft_update(p, q, tau).arrays()] == shapes


def test_frozen_ln_affine_grads_are_zeroed():
    p = small_params(MlpSpec(2, 1, (3,), use_ln=True))
    g = nn_core.without_ln_affine_grads(p.map(np.ones_like))
    assert all(np.all(a == 0) for a in g.ln_scale + g.ln_shift)
    assert all(np.all(a == 1) for a in g.weights)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_exact(tmp_path):
    nets = {
        "a": small_params(MlpSpec(3, 1, (4, 4), "gelu", True), 0),
        "b": small_params(MlpSpec(2, 2, (5,), "sigmoid"), 1),
    }
    path = tmp_path / "ck.txt"
    nn_core.save_checkpoint(path, nets)
    back = nn_core.load_checkpoint(path)
    assert set(back) == {"a", "b"}
    for k in nets:
        assert back[k].spec == nets[k].spec
        assert back[k].equals(nets[k])


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn_core.loads_checkpoint("not a checkpoint\n")
