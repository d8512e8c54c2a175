"""
Tests for the Neural Network Module
Initialization, forward/backward passes, SGD and model files
"""

import pytest
import os
import sys

import numpy as np

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from wild_ood.exceptions import (ConfigurationError, DataParseError,
                                 NumericError, ShapeError)
from wild_ood.losses import cross_entropy, energy_score, ood_loss_in
from wild_ood.nnet import (ENERGY_SLOPE_PATH, HEAD_OUTPUT_WEIGHT, Gradients,
                           MlpModel, OptimizerState, backward,
                           finite_diff_check, forward, load_model,
                           mlp_init, model_from_dict, model_to_dict,
                           save_model, sgd_step)


def ce_loss_fn(x, y):
    """Mean cross-entropy loss function for finite_diff_check"""
    def loss_fn(model):
        logits, trace = forward(model, x)
        ce = cross_entropy(logits, y)
        return float(np.mean(ce.value)), backward(model, trace, ce.grad_logits / len(x))
    return loss_fn


def identity_model():
    """Single linear layer with identity weights"""
    params = {
        "layers.0.weight": np.eye(2),
        "layers.0.bias": np.zeros(2),
        ENERGY_SLOPE_PATH: np.array([-1.0]),
    }
    return MlpModel([2, 2], "relu", params)


class TestMlpInit:
    """Test network construction"""

    def test_shapes(self):
        """Test weight and bias shapes for [2, 8, 2]"""
        model = mlp_init([2, 8, 2], "relu", seed=7)
        assert model.weight(0).shape == (8, 2)
        assert model.bias(0).shape == (8,)
        assert model.weight(1).shape == (2, 8)
        assert model.bias(1).shape == (2,)
        assert model.n_classes == 2
        assert model.energy_slope_w == -1.0

    def test_deterministic(self):
        """Test that the same seed gives bit-identical parameters"""
        first = mlp_init([3, 5, 4], "tanh", seed=11)
        second = mlp_init([3, 5, 4], "tanh", seed=11)
        for path in first.parameter_paths():
            assert np.array_equal(first.params[path], second.params[path])

    def test_seed_changes_weights(self):
        """Test that different seeds give different weights"""
        first = mlp_init([2, 8, 2], seed=1)
        second = mlp_init([2, 8, 2], seed=2)
        assert not np.array_equal(first.weight(0), second.weight(0))

    def test_invalid_dims(self):
        """Test rejection of too few or non-positive dimensions"""
        with pytest.raises(ConfigurationError):
            mlp_init([2])
        with pytest.raises(ConfigurationError):
            mlp_init([3, 0, 2])

    def test_invalid_activation(self):
        """Test rejection of unknown activations"""
        with pytest.raises(ConfigurationError):
            mlp_init([2, 2], "sigmoid")

    def test_head_parameters(self):
        """Test that the OOD head is attached with the right shapes"""
        model = mlp_init([2, 6, 3], "relu", seed=0, with_head=True, head_width=4)
        assert model.has_head
        assert model.params["head.hidden.weight"].shape == (4, 6)
        assert model.params[HEAD_OUTPUT_WEIGHT].shape == (4,)
        assert model.parameter_count() == 2 * 6 + 6 + 6 * 3 + 3 + 1 + 4 * 6 + 4 + 4 + 1

    def test_custom_energy_slope(self):
        """Test the initial energy slope argument"""
        assert mlp_init([2, 2], energy_slope_w=0.25).energy_slope_w == 0.25


class TestForward:
    """Test the forward pass"""

    def test_identity_layer(self):
        """Test that an identity layer returns its input"""
        logits, _ = forward(identity_model(), np.array([0.3, -1.2]))
        assert np.array_equal(logits, np.array([0.3, -1.2]))

    def test_zero_weights(self):
        """Test that all-zero parameters give zero logits"""
        model = mlp_init([3, 4, 2], seed=0)
        for value in model.params.values():
            value[...] = 0.0
        logits, _ = forward(model, np.ones((5, 3)))
        assert np.array_equal(logits, np.zeros((5, 2)))

    def test_matches_straight_line_evaluation(self):
        """Test forward against an explicit per-layer evaluation"""
        model = mlp_init([3, 5, 4, 2], "relu", seed=3)
        x = np.array([0.5, -1.0, 2.0])
        h = x
        for layer in range(model.n_layers):
            z = model.weight(layer) @ h + model.bias(layer)
            h = np.maximum(z, 0.0) if layer < model.n_layers - 1 else z
        logits, _ = forward(model, x)
        assert np.allclose(logits, h, rtol=1e-12, atol=1e-12)

    def test_batch_matches_single_rows(self):
        """Test that batched and per-row evaluation agree"""
        model = mlp_init([2, 6, 3], "tanh", seed=5)
        x = np.random.default_rng(0).normal(size=(4, 2))
        batch_logits, _ = forward(model, x)
        for i in range(4):
            row_logits, _ = forward(model, x[i])
            assert np.allclose(batch_logits[i], row_logits, rtol=1e-12, atol=1e-12)

    def test_pure(self):
        """Test that repeated calls give identical results"""
        model = mlp_init([2, 8, 2], seed=1)
        x = np.array([[1.0, 2.0], [-0.5, 0.1]])
        first, _ = forward(model, x)
        second, _ = forward(model, x)
        assert np.array_equal(first, second)

    def test_dimension_mismatch(self):
        """Test ShapeError on wrong input length"""
        model = mlp_init([2, 4, 2], seed=0)
        with pytest.raises(ShapeError):
            forward(model, np.ones(3))

    def test_head_score(self):
        """Test that the head score is recorded in the trace"""
        model = mlp_init([2, 4, 2], seed=0, with_head=True, head_width=3)
        _, trace = forward(model, np.ones((5, 2)))
        assert trace.head_score.shape == (5,)


class TestBackward:
    """Test reverse-mode gradients"""

    def test_zero_upstream_gradient(self):
        """Test that zero d_logits gives all-zero gradients"""
        model = mlp_init([2, 4, 2], seed=0)
        logits, trace = forward(model, np.ones((3, 2)))
        grads = backward(model, trace, np.zeros_like(logits))
        assert grads.max_abs() == 0.0

    def test_linear_layer(self):
        """Test the closed form for loss = c . logits on a linear model"""
        model = identity_model()
        x = np.array([0.7, -0.2])
        c = np.array([2.0, -3.0])
        _, trace = forward(model, x)
        grads = backward(model, trace, c)
        assert np.allclose(grads["layers.0.weight"], np.outer(c, x))
        assert np.allclose(grads["layers.0.bias"], c)
        assert grads[ENERGY_SLOPE_PATH][0] == 0.0

    def test_finite_differences_tanh(self):
        """Test cross-entropy gradients against central differences"""
        rng = np.random.default_rng(4)
        model = mlp_init([3, 6, 4], "tanh", seed=2)
        x = rng.normal(size=(10, 3))
        y = rng.integers(0, 4, size=10)
        report = finite_diff_check(model, ce_loss_fn(x, y), tolerance=1e-4, n_coords=100)
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(100))
    def test_finite_differences_random_points(self, seed):
        """Test cross-entropy gradients at seeded random networks and inputs"""
        rng = np.random.default_rng(seed)
        model = mlp_init([3, 5, 4, 3], "tanh", seed=seed)
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, size=5)
        report = finite_diff_check(model, ce_loss_fn(x, y), tolerance=1e-4, n_coords=100, seed=seed)
        assert report.passed, report.max_rel_error

    def test_finite_differences_relu(self):
        """Test gradients of a relu network away from kinks"""
        rng = np.random.default_rng(8)
        model = mlp_init([2, 8, 3], "relu", seed=9)
        x = rng.normal(size=(6, 2))
        y = rng.integers(0, 3, size=6)
        report = finite_diff_check(model, ce_loss_fn(x, y), tolerance=1e-4, n_coords=60)
        assert report.passed, report.max_rel_error

    def test_finite_differences_head(self):
        """Test head gradients against central differences"""
        rng = np.random.default_rng(1)
        model = mlp_init([2, 5, 2], "tanh", seed=3, with_head=True, head_width=4)
        x = rng.normal(size=(7, 2))

        def loss_fn(current):
            logits, trace = forward(current, x)
            g = trace.head_score
            value = float(np.mean(g ** 2) + np.mean(energy_score(logits)))
            d_logits = np.exp(logits - energy_score(logits)[:, None]) / len(x)
            return value, backward(current, trace, d_logits, 2.0 * g / len(x))

        report = finite_diff_check(model, loss_fn, tolerance=1e-4, n_coords=100)
        assert report.passed, report.max_rel_error

    def test_stale_trace(self):
        """Test ShapeError when the trace comes from a different model"""
        small = mlp_init([2, 4, 2], seed=0)
        large = mlp_init([2, 5, 2], seed=0)
        logits, trace = forward(small, np.ones(2))
        with pytest.raises(ShapeError):
            backward(large, trace, np.zeros_like(logits))

    def test_upstream_shape_mismatch(self):
        """Test ShapeError on wrongly shaped d_logits"""
        model = mlp_init([2, 4, 2], seed=0)
        _, trace = forward(model, np.ones((3, 2)))
        with pytest.raises(ShapeError):
            backward(model, trace, np.zeros((2, 2)))


class TestSgdStep:
    """Test the optimizer"""

    def test_plain_gradient_step(self):
        """Test that momentum 0 and no decay gives theta - lr * g"""
        model = mlp_init([2, 3, 2], seed=0)
        grads = Gradients({p: np.full_like(v, 0.5) for p, v in model.params.items()})
        state = OptimizerState.create(model, 0.1, momentum=0.0, weight_decay=0.0)
        updated = sgd_step(model, grads, state)
        for path in model.parameter_paths():
            assert np.allclose(updated.params[path], model.params[path] - 0.05)

    def test_zero_gradients(self):
        """Test that zero gradients leave parameters unchanged"""
        model = mlp_init([2, 3, 2], seed=0)
        state = OptimizerState.create(model, 0.1, momentum=0.9, weight_decay=0.0)
        updated = sgd_step(model, Gradients.zeros_like(model), state)
        for path in model.parameter_paths():
            assert np.array_equal(updated.params[path], model.params[path])

    def test_input_model_untouched(self):
        """Test that sgd_step returns a new model"""
        model = mlp_init([2, 3, 2], seed=0)
        before = model.weight(0).copy()
        grads = Gradients({p: np.ones_like(v) for p, v in model.params.items()})
        sgd_step(model, grads, OptimizerState.create(model, 0.1))
        assert np.array_equal(model.weight(0), before)

    def test_momentum_recurrence(self):
        """Test two heavy-ball steps against the hand recurrence"""
        model = mlp_init([2, 2], seed=0)
        g = Gradients({p: np.ones_like(v) for p, v in model.params.items()})
        state = OptimizerState.create(model, 0.1, momentum=0.9, weight_decay=0.0, nesterov=False)
        second = sgd_step(sgd_step(model, g, state), g, state)
        # v1 = g, v2 = 1.9 g
        assert np.allclose(second.weight(0), model.weight(0) - 0.1 * 2.9)

    def test_nesterov_recurrence(self):
        """Test two Nesterov steps against the hand recurrence"""
        model = mlp_init([2, 2], seed=0)
        g = Gradients({p: np.ones_like(v) for p, v in model.params.items()})
        state = OptimizerState.create(model, 0.1, momentum=0.9, weight_decay=0.0, nesterov=True)
        second = sgd_step(sgd_step(model, g, state), g, state)
        # steps 1.9 g then 2.71 g
        assert np.allclose(second.weight(0), model.weight(0) - 0.1 * (1.9 + 2.71))

    def test_weight_decay_only_on_weights(self):
        """Test that biases and the energy slope are not decayed"""
        model = mlp_init([2, 3, 2], seed=0)
        model.bias(0)[:] = 1.0
        state = OptimizerState.create(model, 1.0, momentum=0.0, weight_decay=0.1)
        updated = sgd_step(model, Gradients.zeros_like(model), state)
        assert np.allclose(updated.weight(0), 0.9 * model.weight(0))
        assert np.array_equal(updated.bias(0), model.bias(0))
        assert updated.energy_slope_w == model.energy_slope_w

    def test_non_finite_gradient(self):
        """Test NumericError naming the offending parameter"""
        model = mlp_init([2, 3, 2], seed=0)
        grads = Gradients.zeros_like(model)
        grads.arrays["layers.0.bias"][1] = np.nan
        with pytest.raises(NumericError, match="layers.0.bias"):
            sgd_step(model, grads, OptimizerState.create(model, 0.1))

    def test_incongruent_gradients(self):
        """Test ShapeError for gradients of another architecture"""
        model = mlp_init([2, 3, 2], seed=0)
        other = mlp_init([2, 4, 2], seed=0)
        with pytest.raises(ShapeError):
            sgd_step(model, Gradients.zeros_like(other), OptimizerState.create(model, 0.1))

    def test_invalid_hyperparameters(self):
        """Test rejection of out-of-range optimizer settings"""
        model = mlp_init([2, 2], seed=0)
        with pytest.raises(ConfigurationError):
            OptimizerState.create(model, 0.0)
        with pytest.raises(ConfigurationError):
            OptimizerState.create(model, 0.1, momentum=1.0)


class TestFiniteDiffCheck:
    """Test the gradient checker itself"""

    def test_constant_loss(self):
        """Test that a constant loss with zero gradient passes exactly"""
        model = mlp_init([2, 3, 2], seed=0)
        report = finite_diff_check(model, lambda m: (1.5, Gradients.zeros_like(m)))
        assert report.passed
        assert report.max_rel_error == 0.0

    def test_detects_wrong_gradient(self):
        """Test that a wrong analytic gradient fails the check"""
        x = np.array([[1.0, 2.0]])
        y = np.array([0])
        correct = ce_loss_fn(x, y)

        def wrong(model):
            value, grads = correct(model)
            return value, grads.scaled(2.0)

        report = finite_diff_check(mlp_init([2, 3, 2], "tanh", seed=0), wrong)
        assert not report.passed

    def test_energy_slope_gradient(self):
        """Test the gradient of the sigmoid energy loss including w"""
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 2))
        model = mlp_init([2, 5, 3], "tanh", seed=4)

        def loss_fn(current):
            logits, trace = forward(current, x)
            energy = energy_score(logits)
            loss = ood_loss_in(energy, current.energy_slope_w)
            softmax = np.exp(logits - energy[:, None])
            grads = backward(current, trace, (loss.grad_e / len(x))[:, None] * softmax)
            grads.arrays[ENERGY_SLOPE_PATH] = np.array([np.mean(loss.grad_w)])
            return float(np.mean(loss.value)), grads

        report = finite_diff_check(model, loss_fn, n_coords=200)
        assert report.passed, report.max_rel_error


class TestSerialization:
    """Test model files"""

    def test_save_and_load(self, tmp_path):
        """Test that a saved model loads with identical parameters"""
        model = mlp_init([2, 4, 3], "tanh", seed=1, with_head=True, head_width=5)
        path = save_model(model, str(tmp_path / "model.json"))
        loaded = load_model(path)
        assert loaded.layer_dims == model.layer_dims
        assert loaded.activation == "tanh"
        assert loaded.head_width == 5
        for name in model.parameter_paths():
            assert np.array_equal(loaded.params[name], model.params[name])

    def test_identical_bytes(self, tmp_path):
        """Test that saving the same model twice gives identical files"""
        model = mlp_init([2, 4, 2], seed=3)
        first = save_model(model, str(tmp_path / "a.json"))
        second = save_model(model, str(tmp_path / "b.json"))
        with open(first, 'rb') as f1, open(second, 'rb') as f2:
            assert f1.read() == f2.read()

    def test_unsupported_version(self):
        """Test rejection of unknown format versions"""
        payload = model_to_dict(mlp_init([2, 2], seed=0))
        payload["format_version"] = 99
        with pytest.raises(DataParseError):
            model_from_dict(payload)

    def test_invalid_json(self, tmp_path):
        """Test DataParseError on a corrupt model file"""
        path = tmp_path / "broken.json"
        path.write_text("{ not json")
        with pytest.raises(DataParseError):
            load_model(str(path))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
