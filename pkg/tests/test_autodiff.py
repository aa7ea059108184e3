"""Tests for the reverse-mode tape: forward identities, gradient oracles,
stop-gradient semantics, optimizer behaviour and the finite-difference checker."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unimvt import autodiff as ad
from unimvt.errors import ConfigError, NumericError, UsageError


def make_layer(name, W, b, activation="linear"):
    return ad.Layer(ad.ParamTensor(f"{name}.W", W), ad.ParamTensor(f"{name}.b", b), activation)


# ---------------------------------------------------------------------------
# mlp_forward
# ---------------------------------------------------------------------------

def test_mlp_identity_layer():
    layer = make_layer("l0", np.eye(2), np.zeros(2))
    tape = ad.Tape()
    out = ad.mlp_forward([layer], np.array([3.0, -1.0]), tape)
    np.testing.assert_array_equal(out.value, [[3.0, -1.0]])


def test_mlp_sigmoid_at_zero():
    layer = make_layer("l0", np.array([[1.0], [1.0]]), np.zeros(1), "sigmoid")
    tape = ad.Tape()
    out = ad.mlp_forward([layer], np.array([0.0, 0.0]), tape)
    assert out.value[0, 0] == 0.5


def test_mlp_matches_straight_line_matrix_eval():
    rng = np.random.default_rng(7)
    W1, b1 = rng.standard_normal((4, 5)), rng.standard_normal(5)
    W2, b2 = rng.standard_normal((5, 3)), rng.standard_normal(3)
    layers = [make_layer("l0", W1, b1, "relu"), make_layer("l1", W2, b2)]
    x = rng.standard_normal((6, 4))

    tape = ad.Tape()
    out = ad.mlp_forward(layers, x, tape)

    # oracle: plain matrix arithmetic, no tape involved
    h = np.maximum(x @ W1 + b1, 0.0)
    expected = h @ W2 + b2
    np.testing.assert_allclose(out.value, expected, rtol=0, atol=1e-12)


def test_mlp_dimension_mismatch():
    layer = make_layer("l0", np.eye(3), np.zeros(3))
    with pytest.raises(ConfigError):
        ad.mlp_forward([layer], np.ones((1, 2)), ad.Tape())


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_mlp_nonfinite_activation_names_layer():
    layer = make_layer("l0", np.array([[1e308], [1e308]]), np.array([1e308]))
    with pytest.raises(NumericError, match="layer 0"):
        ad.mlp_forward([layer], np.array([[1e9, 1e9]]), ad.Tape())


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_square():
    w = ad.ParamTensor("w", np.array([[3.0]]))
    tape = ad.Tape()
    loss = ad.sum_all(ad.square(tape.param(w)))
    ad.backward(tape)
    assert w.grad[0, 0] == 6.0


def test_backward_stop_gradient_kills_one_path():
    w = ad.ParamTensor("w", np.array([[3.0]]))
    tape = ad.Tape()
    wn = tape.param(w)
    loss = ad.sum_all(ad.mul(ad.stop_gradient(wn), wn))
    ad.backward(tape)
    assert w.grad[0, 0] == 3.0  # not 6


def test_backward_before_forward_is_usage_error():
    with pytest.raises(UsageError):
        ad.backward(ad.Tape())


def test_backward_requires_scalar_tail():
    w = ad.ParamTensor("w", np.ones((2, 2)))
    tape = ad.Tape()
    ad.square(tape.param(w))
    with pytest.raises(UsageError):
        ad.backward(tape)


def test_backward_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    layers = [
        make_layer("l0", ad.glorot_uniform(rng, 3, 4), np.zeros(4), "relu"),
        make_layer("l1", ad.glorot_uniform(rng, 4, 1), np.zeros(1), "sigmoid"),
    ]
    x = rng.standard_normal((8, 3))
    y = rng.integers(0, 2, size=(8, 1)).astype(float)
    params = ad.mlp_params(layers)

    def loss_fn():
        tape = ad.Tape()
        p = ad.mlp_forward(layers, x, tape)
        return ad.sum_all(ad.binary_cross_entropy(y, p))

    assert ad.finite_diff_check(loss_fn, params, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# stop_gradient
# ---------------------------------------------------------------------------

def test_stop_gradient_forward_identity():
    tape = ad.Tape()
    x = tape.constant(np.array([[1.5, -2.0]]))
    out = ad.stop_gradient(x)
    np.testing.assert_array_equal(out.value, [[1.5, -2.0]])


def test_stop_gradient_zero_grad():
    x = ad.ParamTensor("x", np.array([[1.0, 2.0, 3.0]]))
    tape = ad.Tape()
    ad.backward_node = ad.sum_all(ad.stop_gradient(tape.param(x)))
    ad.backward(tape)
    np.testing.assert_array_equal(x.grad, np.zeros((1, 3)))


def test_stop_gradient_additive_path_stays_open():
    x = ad.ParamTensor("x", np.array([[1.0, 2.0, 3.0]]))
    tape = ad.Tape()
    xn = tape.param(x)
    ad.sum_all(ad.add(xn, ad.stop_gradient(xn)))
    ad.backward(tape)
    np.testing.assert_array_equal(x.grad, np.ones((1, 3)))


# ---------------------------------------------------------------------------
# elementwise primitives and softmax
# ---------------------------------------------------------------------------

@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_positive_and_normalized(logits):
    tape = ad.Tape()
    s = ad.softmax(tape.constant(np.array([logits])))
    assert np.all(s.value > 0)
    assert abs(s.value.sum() - 1.0) < 1e-12


@given(st.floats(-30, 30))
def test_sigmoid_strictly_inside_unit_interval(z):
    tape = ad.Tape()
    s = ad.sigmoid(tape.constant(np.array([[z]])))
    assert 0.0 < s.value[0, 0] < 1.0


def test_primitive_gradients_against_finite_differences():
    rng = np.random.default_rng(3)
    w = ad.ParamTensor("w", rng.uniform(0.1, 2.0, size=(3, 4)))
    mask = rng.uniform(0.5, 1.5, size=(3, 4))

    def loss_fn():
        tape = ad.Tape()
        wn = tape.param(w)
        parts = [
            ad.sum_all(ad.mul(mask, ad.sigmoid(wn))),
            ad.sum_all(ad.softmax(wn)),
            ad.sum_all(ad.log(ad.clamp(wn, 1e-6, 10.0))),
            ad.sum_all(ad.absolute(ad.sub(wn, 1.0))),
            ad.sum_all(ad.square(ad.logit(ad.sigmoid(wn)))),
            ad.sum_all(ad.mul(ad.column(wn, 1), ad.column(wn, 2))),
            ad.sum_all(ad.matmul(ad.transpose(wn), wn)),
            ad.sum_all(ad.concat([ad.relu(wn), ad.scale(wn, 0.5)], axis=1)),
        ]
        total = parts[0]
        for p in parts[1:]:
            total = ad.add(total, p)
        return total

    assert ad.finite_diff_check(loss_fn, [w], eps=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_optimizer_zero_gradient_leaves_params_unchanged():
    p = ad.ParamTensor("p", np.array([[1.0, -2.0]]))
    state = ad.OptimizerState.for_params([p])
    before = p.values.copy()
    ad.optimizer_step([p], state)
    np.testing.assert_array_equal(p.values, before)


def test_optimizer_constant_gradient_descends_monotonically():
    p = ad.ParamTensor("p", np.array([[5.0]]))
    state = ad.OptimizerState.for_params([p], lr=0.01)
    values = [p.values[0, 0]]
    for _ in range(50):
        p.grad[:] = 2.0
        ad.optimizer_step([p], state)
        values.append(p.values[0, 0])
    assert all(b < a for a, b in zip(values, values[1:]))


def test_optimizer_converges_on_quadratic_bowl():
    w = ad.ParamTensor("w", np.array([[0.0]]))
    state = ad.OptimizerState.for_params([w], lr=0.05)
    for _ in range(500):
        tape = ad.Tape()
        ad.sum_all(ad.square(ad.sub(tape.param(w), 2.0)))
        ad.backward(tape)
        ad.optimizer_step([w], state)
    assert abs(w.values[0, 0] - 2.0) < 0.01


def test_optimizer_nonfinite_gradient_names_parameter():
    p = ad.ParamTensor("tower.l0.W", np.ones((1, 1)))
    p.grad[:] = np.nan
    with pytest.raises(NumericError, match="tower.l0.W"):
        ad.optimizer_step([p], ad.OptimizerState.for_params([p]))


def test_optimizer_step_zeroes_gradients():
    p = ad.ParamTensor("p", np.ones((2, 2)))
    p.grad[:] = 1.0
    ad.optimizer_step([p], ad.OptimizerState.for_params([p]))
    np.testing.assert_array_equal(p.grad, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# finite_diff_check
# ---------------------------------------------------------------------------

def test_finite_diff_exact_for_linear_loss():
    w = ad.ParamTensor("w", np.arange(6.0).reshape(2, 3))

    def loss_fn():
        tape = ad.Tape()
        return ad.sum_all(tape.param(w))

    assert ad.finite_diff_check(loss_fn, [w], eps=1e-5) < 1e-8


def test_finite_diff_detects_corrupted_gradient():
    w = ad.ParamTensor("w", np.array([[3.0]]))

    def loss_fn():
        tape = ad.Tape()
        wn = tape.param(w)
        # deliberately wrong vjp: doubles the true gradient of w**2
        return tape.record(wn.value**2, (wn,), lambda g: (4.0 * g * wn.value,))

    err = ad.finite_diff_check(lambda: ad.sum_all(loss_fn()), [w], eps=1e-5)
    assert err > 0.3


def test_finite_diff_rejects_nonpositive_eps():
    w = ad.ParamTensor("w", np.ones((1, 1)))
    with pytest.raises(ConfigError):
        ad.finite_diff_check(lambda: None, [w], eps=0.0)


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_seeded_init_and_steps_are_bit_reproducible():
    def run():
        rng = np.random.default_rng(42)
        layers = [
            make_layer("l0", ad.glorot_uniform(rng, 3, 4), np.zeros(4), "relu"),
            make_layer("l1", ad.glorot_uniform(rng, 4, 1), np.zeros(1), "sigmoid"),
        ]
        params = ad.mlp_params(layers)
        state = ad.OptimizerState.for_params(params, lr=1e-3)
        x = rng.standard_normal((16, 3))
        y = rng.integers(0, 2, size=(16, 1)).astype(float)
        for _ in range(5):
            tape = ad.Tape()
            p = ad.mlp_forward(layers, x, tape)
            ad.sum_all(ad.binary_cross_entropy(y, p))
            ad.backward(tape)
            ad.optimizer_step(params, state)
        return np.concatenate([p.values.reshape(-1) for p in params])

    a, b = run(), run()
    assert np.array_equal(a, b)
