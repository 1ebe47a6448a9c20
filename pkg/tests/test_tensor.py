import numpy as np
import pytest

from group_transformer.core import tensor as T
from group_transformer.core.errors import DimensionError, GradientError, ValidationFailure
from group_transformer.core.tensor import BatchNormState, Tape, Tensor, no_grad, parameter


def test_linear_identity_and_zero_weight():
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(T.linear(x, np.eye(2), np.zeros(2)).data, [[1.0, 2.0]])
    np.testing.assert_array_equal(T.linear(x, np.zeros((2, 2)), np.array([3.0, 4.0])).data, [[3.0, 4.0]])


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as excinfo:
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.zeros(5)))
    assert "(2, 3)" in str(excinfo.value)
    assert "(4, 5)" in str(excinfo.value)


def test_conv1d_same_preserves_length():
    rng = np.random.default_rng(0)
    out = T.conv1d_same(rng.standard_normal((2, 5, 16)), rng.standard_normal((64, 5, 3)), np.zeros(64))
    assert out.shape == (2, 64, 16)


def test_conv1d_same_zero_input_gives_zero_output():
    out = T.conv1d_same(np.zeros((1, 3, 4)), np.ones((2, 3, 3)), np.zeros(2))
    np.testing.assert_array_equal(out.data, np.zeros((1, 2, 4)))


def test_conv1d_same_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5))
    K = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    expected = np.zeros((1, 3, 5))
    for o in range(3):
        for t in range(5):
            expected[0, o, t] = np.sum(K[o] * padded[0, :, t : t + 3]) + b[o]
    np.testing.assert_allclose(T.conv1d_same(x, K, b).data, expected, atol=1e-12)


def test_conv1d_same_rejects_channel_mismatch_and_kernel_size():
    with pytest.raises(DimensionError):
        T.conv1d_same(np.zeros((1, 4, 3)), np.zeros((2, 3, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        T.conv1d_same(np.zeros((1, 3, 3)), np.zeros((2, 3, 5)), np.zeros(2))


def test_batchnorm_constant_channel_outputs_beta():
    x = np.full((2, 2, 3), 5.0)
    beta = np.array([0.5, -1.0])
    out = T.batchnorm1d(x, np.ones(2), beta, "train", BatchNormState(2))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None], x.shape))


def test_batchnorm_train_normalizes_per_channel():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 5)) * 3.0 + 2.0
    out = T.batchnorm1d(x, np.ones(3), np.zeros(3), "train", BatchNormState(3)).data
    assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-8)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-4)


def test_batchnorm_running_statistics_follow_momentum():
    x = np.arange(8, dtype=float).reshape(2, 1, 4)
    state = BatchNormState(1)
    T.batchnorm1d(x, np.ones(1), np.zeros(1), "train", state)
    np.testing.assert_allclose(state.running_mean, [0.1 * 3.5])
    np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * x.var(ddof=1)])


def test_batchnorm_eval_before_training_raises():
    with pytest.raises(ValidationFailure):
        T.batchnorm1d(np.ones((1, 2, 3)), np.ones(2), np.zeros(2), "eval", BatchNormState(2))


def test_batchnorm_train_needs_two_values_per_channel():
    with pytest.raises(DimensionError):
        T.batchnorm1d(np.ones((1, 2, 1)), np.ones(2), np.zeros(2), "train", BatchNormState(2))


def test_relu_and_sigmoid_values_and_gradients():
    np.testing.assert_array_equal(T.pointwise(np.array([-1.0, 0.0, 2.0]), "relu").data, [0.0, 0.0, 2.0])
    x = parameter([0.0, 0.0])
    out = T.pointwise(x, "relu")
    T.sum(out).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    z = parameter([0.0])
    s = T.pointwise(z, "sigmoid")
    assert s.item() == 0.5
    T.sum(s).backward()
    assert z.grad[0] == pytest.approx(0.25)


def test_pointwise_rejects_unknown_function():
    with pytest.raises(ValidationFailure):
        T.pointwise(np.zeros(2), "tanh")


def test_softmax_symmetry_and_stability():
    np.testing.assert_allclose(T.softmax_lastdim(np.array([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax_lastdim(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] < 1e-300 or out[1] == 0.0


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = T.softmax_lastdim(rng.standard_normal((5, 7, 9)) * 50).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_backward_sum_and_square():
    x = parameter([1.0, 2.0, 3.0])
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    y = parameter([1.0, 2.0])
    T.sum(y * y).backward()
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_across_calls():
    x = parameter([1.0, 2.0])
    T.sum(x * 3.0).backward()
    T.sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar_loss():
    x = parameter([1.0, 2.0])
    with pytest.raises(GradientError):
        (x * 2.0).backward()


def test_backward_rejects_untaped_loss():
    with pytest.raises(GradientError):
        T.sum(Tensor([1.0, 2.0])).backward()


def test_shared_subexpression_is_visited_once():
    x = parameter([2.0])
    y = x * x
    loss = T.sum(y + y)
    tape = Tape(loss)
    assert len(tape) == len({id(node) for node in tape.nodes})
    loss.backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf
    assert T.is_grad_enabled()


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 6))
    K = rng.standard_normal((5, 4, 3))
    first = T.softmax_lastdim(T.conv1d_same(x, K, np.zeros(5))).data
    second = T.softmax_lastdim(T.conv1d_same(x, K, np.zeros(5))).data
    assert np.array_equal(first, second)


def test_cosine_similarity_guards_zero_rows():
    F = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    sim = T.cosine_similarity(F).data
    assert sim[0, 0] == pytest.approx(1.0)
    assert sim[0, 2] == pytest.approx(1 / np.sqrt(2))
    np.testing.assert_array_equal(sim[1], np.zeros(3))
    np.testing.assert_array_equal(sim[:, 1], np.zeros(3))


def test_concat_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        T.concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)


def test_take_accumulates_repeated_indices():
    x = parameter([[1.0], [2.0]])
    T.sum(T.take(x, [0, 0, 1], axis=0)).backward()
    np.testing.assert_array_equal(x.grad, [[2.0], [1.0]])
