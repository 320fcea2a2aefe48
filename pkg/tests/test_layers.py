"""
Unit tests for the feedforward, layer norm and gated cell building blocks.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.layers import (
    Activation,
    FFNWeights,
    LayerNormParams,
    RNNWeights,
    ffn_forward,
    recurrent_cell_forward,
)
from core.tensor import DimensionError, Tensor, dot, grad_check


class TestFFN:
    """Test feedforward weight containers and forward passes."""

    @pytest.fixture
    def rng(self):
        return np.random.default_rng(0)

    def test_init_shapes(self, rng):
        """Test widths and parameter names of an initialised stack."""
        ffn = FFNWeights.init([6, 4, 3], rng)
        assert ffn.input_width == 6
        assert ffn.output_width == 3
        assert [w.shape for w in ffn.weights] == [(4, 6), (3, 4)]
        assert sorted(ffn.parameters("head")) == ["head.b0", "head.b1", "head.w0", "head.w1"]

    def test_init_is_deterministic(self):
        """Test the same seed yields identical weights."""
        a = FFNWeights.init([3, 3], np.random.default_rng(7))
        b = FFNWeights.init([3, 3], np.random.default_rng(7))
        assert_array_equal(a.weights[0].data, b.weights[0].data)

    def test_identity_computes_input(self):
        """Test the identity stack passes vectors through."""
        x = Tensor([1.0, -2.0, 3.0])
        assert_array_equal(ffn_forward(FFNWeights.identity(3), x).data, x.data)

    def test_no_activation_after_last_layer(self):
        """Test the final layer stays affine (outputs can exceed tanh range)."""
        ffn = FFNWeights.zeros([2, 2], Activation.TANH)
        ffn.biases[0].assign(np.array([5.0, -5.0]))
        assert_array_equal(ffn_forward(ffn, Tensor([0.0, 0.0])).data, [5.0, -5.0])

    def test_relu_between_layers(self):
        """Test relu clips the hidden layer."""
        ffn = FFNWeights(
            [Tensor(np.eye(2)), Tensor(np.eye(2))],
            [Tensor(np.zeros(2)), Tensor(np.zeros(2))],
            Activation.RELU,
        )
        assert_array_equal(ffn_forward(ffn, Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_width_mismatch(self, rng):
        """Test a wrong input width raises DimensionError."""
        with pytest.raises(DimensionError):
            ffn_forward(FFNWeights.init([4, 2], rng), Tensor([1.0, 2.0]))

    def test_inconsistent_layers_rejected(self):
        """Test chained widths and bias shapes are validated."""
        with pytest.raises(DimensionError):
            FFNWeights([Tensor(np.ones((3, 2))), Tensor(np.ones((2, 4)))], [Tensor(np.ones(3)), Tensor(np.ones(2))])
        with pytest.raises(DimensionError):
            FFNWeights([Tensor(np.ones((3, 2)))], [Tensor(np.ones(2))])
        with pytest.raises(DimensionError):
            FFNWeights.init([4], np.random.default_rng(0))

    @pytest.mark.parametrize("activation", [Activation.TANH, Activation.RELU])
    def test_gradient(self, rng, activation):
        """Test the FFN passes a finite-difference check."""
        ffn = FFNWeights.init([5, 5, 5], rng, activation)
        w = Tensor(rng.normal(size=5))
        report = grad_check(lambda x: dot(ffn_forward(ffn, x), w), Tensor(rng.normal(size=5)))
        assert report.passed, report.max_rel_error


class TestLayerNormParams:
    """Test the learned layer norm wrapper."""

    def test_init_is_plain_normalisation(self):
        """Test unit gain and zero shift give a standardised vector."""
        ln = LayerNormParams.init(4)
        y = ln.apply(Tensor([1.0, 2.0, 3.0, 4.0])).data
        assert abs(y.mean()) < 1e-12
        assert ln.width == 4
        assert set(ln.parameters("ln")) == {"ln.gain", "ln.shift"}

    def test_gain_and_shift_applied(self):
        """Test gain scales and shift offsets the normalised vector."""
        ln = LayerNormParams(Tensor([2.0, 2.0]), Tensor([1.0, 1.0]))
        y = ln.apply(Tensor([0.0, 2.0])).data
        assert_allclose(y, [1.0 - 2.0 / np.sqrt(1 + 1e-5), 1.0 + 2.0 / np.sqrt(1 + 1e-5)])


class TestGatedCell:
    """Test the LSTM-style recurrent cell."""

    @pytest.fixture
    def cell(self):
        return RNNWeights.init(3, 4, np.random.default_rng(1))

    def test_shapes_and_forget_bias(self, cell):
        """Test weight shapes and the forget-gate bias initialisation."""
        assert cell.w_x.shape == (16, 3)
        assert cell.w_h.shape == (16, 4)
        assert_array_equal(cell.b.data[4:8], np.ones(4))
        assert_array_equal(cell.b.data[:4], np.zeros(4))
        assert cell.hidden == 4 and cell.input_width == 3

    def test_zero_weights_halve_the_cell(self):
        """Test zero weights: gates are 0.5, candidate 0, so c' = 0.5 c."""
        cell = RNNWeights.zeros(2, 2)
        state = (Tensor([0.0, 0.0]), Tensor([1.0, -2.0]))
        h, c = recurrent_cell_forward(cell, Tensor([3.0, 4.0]), state)
        assert_allclose(c.data, [0.5, -1.0])
        assert_allclose(h.data, 0.5 * np.tanh([0.5, -1.0]))

    def test_default_state_is_zero(self, cell):
        """Test omitting the state equals passing zeros."""
        x = Tensor([0.1, 0.2, 0.3])
        a = recurrent_cell_forward(cell, x)
        b = recurrent_cell_forward(cell, x, cell.zero_state())
        assert_array_equal(a[0].data, b[0].data)

    def test_bad_widths(self, cell):
        """Test input and state widths are checked."""
        with pytest.raises(DimensionError):
            recurrent_cell_forward(cell, Tensor([1.0, 2.0]))
        with pytest.raises(DimensionError):
            recurrent_cell_forward(cell, Tensor([1.0, 2.0, 3.0]), (Tensor([0.0]), Tensor([0.0])))
        with pytest.raises(DimensionError):
            RNNWeights(Tensor(np.ones((8, 3))), Tensor(np.ones((8, 3))), Tensor(np.ones(8)))

    def test_gradient_through_two_steps(self, cell):
        """Test gradients through a two-step unroll."""
        rng = np.random.default_rng(2)
        w = Tensor(rng.normal(size=4))
        second = Tensor(rng.normal(size=3))

        def f(x):
            state = recurrent_cell_forward(cell, x)
            h, _ = recurrent_cell_forward(cell, second, state)
            return dot(h, w)

        assert grad_check(f, Tensor(rng.normal(size=3))).passed
