import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from donut.diffmath import ClampWarning, Tape, as_matrix, backward, finite_diff_check, forward
from donut.exceptions import DimensionError, NumericError, TapeStateError


def mlp_tape(rng, n=6, d=3, h=4):
    """Small ELU/sigmoid network ending in a BCE plus squared-error loss."""
    tape = Tape()
    x = tape.input("x", d)
    t = tape.input("t", 1)
    W1 = tape.parameter("W1", rng.uniform(-1, 1, (d, h)))
    b1 = tape.parameter("b1", rng.uniform(-1, 1, (1, h)))
    W2 = tape.parameter("W2", rng.uniform(-1, 1, (h, 1)))
    b2 = tape.parameter("b2", rng.uniform(-1, 1, (1, 1)))
    hidden = tape.elu(tape.add_bias(tape.matmul(x, W1), b1))
    logit = tape.add_bias(tape.matmul(hidden, W2), b2)
    p = tape.sigmoid(logit)
    loss = tape.add(tape.bce(p, t), tape.mul(tape.const(0.3), tape.squared_error(logit, t)))
    tape.set_output(loss)
    feed = {"x": rng.uniform(-1, 1, (n, d)), "t": (rng.uniform(size=(n, 1)) < 0.5).astype(float)}
    return tape, feed


class TestForward:
    def test_identity_graph(self):
        tape = Tape()
        x = tape.input("x", 2)
        tape.set_output(x)
        m = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_array_equal(forward(tape, {"x": m}), m)

    def test_matmul_by_hand(self):
        tape = Tape()
        a = tape.input("a", 2)
        b = tape.parameter("b", np.array([[1.0], [1.0]]))
        tape.set_output(tape.matmul(a, b))
        np.testing.assert_array_equal(tape.forward([[[1, 2], [3, 4]]]), [[3.0], [7.0]])

    def test_sigmoid_at_zero(self):
        tape = Tape()
        tape.set_output(tape.sigmoid(tape.input("z", 1)))
        assert tape.forward({"z": 0.0})[0, 0] == 0.5

    @pytest.mark.parametrize("z, expected", [(2.0, 2.0), (0.0, 0.0), (-1.0, np.expm1(-1.0))])
    def test_elu_values(self, z, expected):
        tape = Tape()
        tape.set_output(tape.elu(tape.input("z", 1)))
        assert tape.forward({"z": z})[0, 0] == pytest.approx(expected, rel=1e-15)

    def test_scalar_broadcast(self):
        tape = Tape()
        x = tape.input("x", 1)
        tape.set_output(tape.div(tape.sub(x, tape.const(1.0)), tape.const(2.0)))
        np.testing.assert_allclose(tape.forward({"x": [1.0, 3.0, 5.0]}).ravel(), [0, 1, 2])

    def test_input_column_mismatch(self):
        tape = Tape()
        tape.set_output(tape.mean(tape.input("x", 3)))
        with pytest.raises(DimensionError, match="3"):
            tape.forward({"x": np.ones((2, 2))})

    def test_matmul_shape_mismatch(self):
        tape = Tape()
        x = tape.input("x", 2)
        w = tape.parameter("w", np.ones((3, 1)))
        with pytest.raises(DimensionError):
            tape.set_output(tape.matmul(x, w))
            tape.forward({"x": np.ones((1, 2))})

    def test_elementwise_shape_mismatch(self):
        tape = Tape()
        a = tape.input("a", 2)
        b = tape.input("b", 3)
        tape.set_output(tape.add(a, b))
        with pytest.raises(DimensionError):
            tape.forward({"a": np.ones((1, 2)), "b": np.ones((1, 3))})

    def test_non_finite_intermediate(self):
        tape = Tape()
        x = tape.input("x", 1)
        tape.set_output(tape.div(tape.const(1.0), x))
        with pytest.raises(NumericError):
            tape.forward({"x": 0.0})

    def test_missing_input(self):
        tape = Tape()
        a = tape.input("a", 1)
        b = tape.input("b", 1)
        tape.set_output(tape.add(a, b))
        with pytest.raises(DimensionError, match="b"):
            tape.forward({"a": 1.0})

    def test_parameters_bound_by_reference(self):
        tape = Tape()
        w = np.array([[2.0]])
        tape.set_output(tape.parameter("w", w))
        assert tape.forward()[0, 0] == 2.0
        w[0, 0] = 5.0
        assert tape.forward()[0, 0] == 5.0

    def test_bce_clamp_warns(self):
        tape = Tape()
        p = tape.input("p", 1)
        t = tape.input("t", 1)
        tape.set_output(tape.bce(p, t))
        with pytest.warns(ClampWarning):
            v = tape.forward({"p": [[1.0]], "t": [[0.0]]})
        assert v[0, 0] == pytest.approx(-np.log(1e-12), rel=1e-6)

    def test_deterministic(self, rng):
        tape, feed = mlp_tape(rng)
        a = tape.forward(feed).copy()
        b = tape.forward(feed).copy()
        assert a.tobytes() == b.tobytes()

    def test_as_matrix_shapes(self):
        assert as_matrix(3.0).shape == (1, 1)
        assert as_matrix([1, 2]).shape == (2, 1)
        with pytest.raises(DimensionError):
            as_matrix(np.zeros((2, 2, 2)))


class TestBackward:
    def test_linear_derivative(self):
        tape = Tape()
        x = tape.input("x", 1)
        w = tape.parameter("w", np.array([[3.0]]))
        tape.set_output(tape.matmul(x, w))
        tape.forward({"x": 2.0})
        assert backward(tape)["w"][0, 0] == 2.0

    def test_sum_of_squares(self):
        tape = Tape()
        x = tape.parameter("x", np.array([[1.0], [2.0], [3.0]]))
        # sum(x^2) = 3 * mean((x - 0)^2)
        total = tape.mul(tape.const(3.0), tape.squared_error(x, tape.const(np.zeros((3, 1)))))
        tape.set_output(total)
        tape.forward()
        np.testing.assert_allclose(tape.backward()["x"].ravel(), [2.0, 4.0, 6.0], rtol=1e-15)

    def test_before_forward_is_state_error(self):
        tape = Tape()
        tape.set_output(tape.parameter("w", np.ones((1, 1))))
        with pytest.raises(TapeStateError):
            tape.backward()

    def test_graph_change_invalidates_forward(self):
        tape = Tape()
        w = tape.parameter("w", np.ones((1, 1)))
        tape.set_output(w)
        tape.forward()
        tape.set_output(tape.mul(w, w))
        with pytest.raises(TapeStateError):
            tape.backward()

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        tape.set_output(tape.parameter("w", np.ones((2, 1))))
        tape.forward()
        with pytest.raises(DimensionError):
            tape.backward()

    def test_every_parameter_gets_matching_adjoint(self, rng):
        tape = Tape()
        used = tape.parameter("used", rng.normal(size=(2, 2)))
        tape.parameter("unused", rng.normal(size=(3, 1)))
        tape.set_output(tape.mean(used))
        tape.forward()
        grads = tape.backward()
        assert grads["used"].shape == (2, 2)
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1)))

    def test_stop_gradient(self):
        tape = Tape()
        w = tape.parameter("w", np.array([[2.0]]))
        tape.set_output(tape.mul(tape.stop_gradient(w), w))
        tape.forward()
        assert tape.backward()["w"][0, 0] == 2.0

    def test_linearity(self, rng):
        def grads(a, b):
            tape = Tape()
            x = tape.input("x", 3)
            W = tape.parameter("W", W0)
            h = tape.elu(tape.matmul(x, W))
            f = tape.mean(h)
            g = tape.squared_error(tape.sigmoid(h), tape.const(np.full((5, 2), 0.3)))
            tape.set_output(tape.add(tape.mul(tape.const(a), f), tape.mul(tape.const(b), g)))
            tape.forward({"x": X})
            return tape.backward()["W"]

        W0 = rng.normal(size=(3, 2))
        X = rng.normal(size=(5, 3))
        combined = grads(2.0, -0.5)
        np.testing.assert_allclose(combined, 2.0 * grads(1.0, 0.0) - 0.5 * grads(0.0, 1.0), rtol=1e-12, atol=1e-15)


class TestFiniteDiffCheck:
    def test_quadratic_bowl(self):
        tape = Tape()
        w = tape.parameter("w", np.array([[1.0]]))
        tape.set_output(tape.mul(w, w))
        report = finite_diff_check(tape, step=1e-5)
        assert report.max_rel_error["w"] < 1e-6
        assert report.ok

    def test_constant_function(self):
        tape = Tape()
        w = tape.parameter("w", np.array([[0.7]]))
        tape.set_output(tape.add(tape.mul(w, tape.const(0.0)), tape.const(4.0)))
        tape.forward()
        assert tape.backward()["w"][0, 0] == 0.0
        report = finite_diff_check(tape)
        assert report.max_rel_error["w"] == 0.0

    def test_cross_entropy_head(self, rng):
        tape, feed = mlp_tape(rng)
        report = finite_diff_check(tape, step=1e-5, tolerance=1e-4, inputs=feed)
        assert report.ok, report.max_rel_error

    def test_flags_wrong_gradient(self):
        # stop_gradient hides the true derivative, so the check must object
        tape = Tape()
        w = tape.parameter("w", np.array([[1.5]]))
        tape.set_output(tape.mul(tape.stop_gradient(w), w))
        report = finite_diff_check(tape)
        assert report.flagged == ["w"]

    def test_restores_parameters(self, rng):
        tape, feed = mlp_tape(rng)
        before = {k: v.copy() for k, v in tape.params.items()}
        finite_diff_check(tape, inputs=feed)
        for k, v in tape.params.items():
            assert v.tobytes() == before[k].tobytes()

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), h=st.integers(1, 5))
    def test_random_graphs(self, seed, n, h):
        tape, feed = mlp_tape(np.random.default_rng(seed), n=n, h=h)
        report = finite_diff_check(tape, inputs=feed)
        assert report.ok, report.max_rel_error
