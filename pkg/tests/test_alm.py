"""
Tests for the ALM Module
Penalty function, per-batch Lagrangian, multiplier and penalty updates,
the constrained training loops and the reference solver
"""

import math

import pytest
import os
import sys

import numpy as np
from scipy.special import softmax

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from wild_ood.alm import (EPOCH_LOG_COLUMNS, AlmSchedule, AlmState,
                          ConstrainedProblem, ConstraintSpec, EpochLog,
                          alm_reference_solve, batch_lagrangian,
                          calibrate_energy_slope,
                          dual_ascent_update, evaluate_constraints,
                          full_lagrangian, penalty_update, psi, psi_grad,
                          save_epoch_logs, woods_nn_head_train, woods_train)
from wild_ood.baselines import ce_only_train, warmup_tau
from wild_ood.data import (GaussianTaskSpec, LabeledDataset, MixtureSpec,
                           gen_gaussian_task, make_wild, split)
from wild_ood.evaluation import evaluate
from wild_ood.exceptions import ConfigurationError, NumericError, UsageError
from wild_ood.losses import energy_score
from wild_ood.nnet import (ENERGY_SLOPE_PATH, HEAD_OUTPUT_WEIGHT, MlpModel,
                           finite_diff_check, forward, mlp_init)
from wild_ood.training import TrainConfig


def small_task(seed=0, n_per_class=100, ood_count=100, m=100, pi=0.5):
    """Two Gaussian classes, a Gaussian OOD pool and a wild mixture"""
    spec = GaussianTaskSpec(
        class_means=[[-2.0, 0.0], [2.0, 0.0]],
        class_covs=[[1.0, 1.0], [1.0, 1.0]],
        class_counts=[n_per_class, n_per_class],
        ood_mean=[0.0, 5.0],
        ood_cov=[1.0, 1.0],
        ood_count=ood_count,
    )
    id_data, ood_pool = gen_gaussian_task(spec, seed=seed)
    wild = make_wild(id_data.features, ood_pool, MixtureSpec(pi, m, seed=seed + 1))
    return id_data, wild


def random_batches(seed=0, n_id=12, n_wild=10):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_id, 2))
    y = rng.integers(0, 2, size=n_id)
    wild = rng.normal(loc=1.0, size=(n_wild, 2))
    return (x, y), wild


class TestPsi:
    """Test the augmented-Lagrangian penalty"""

    def test_values(self):
        """Test hand-computed penalty values"""
        assert psi(0.0, 0.0, 1.0) == 0.0
        assert psi(1.0, 0.0, 2.0) == 1.0
        assert psi(-1.0, 0.5, 1.0) == -0.125
        assert psi(-1.0, 1.0, 1.0) == -1.0 + 0.5

    def test_gradients(self):
        """Test hand-computed partial derivatives"""
        assert psi_grad(1.0, 0.0, 2.0) == (2.0, 1.0)
        assert psi_grad(-1.0, 0.5, 1.0) == (0.0, -0.5)
        # On the branch boundary both branches agree
        assert psi_grad(-1.0, 1.0, 1.0) == (0.0, -1.0)

    def test_nonpositive_beta(self):
        """Test ConfigurationError for beta <= 0"""
        with pytest.raises(ConfigurationError):
            psi(1.0, 0.0, 0.0)
        with pytest.raises(ConfigurationError):
            psi_grad(1.0, 0.0, -1.0)

    def test_continuously_differentiable(self):
        """Test that value and gradient are continuous across the branch boundary"""
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.uniform(-5.0, 5.0)
            beta = rng.uniform(0.1, 10.0)
            u = -v / beta
            delta = 1e-10
            assert abs(psi(u, v, beta) - psi(u - delta, v, beta)) <= 1e-9
            inside = psi_grad(u, v, beta)
            outside = psi_grad(u - delta, v, beta)
            assert abs(inside[0] - outside[0]) <= 1e-9
            assert abs(inside[1] - outside[1]) <= 1e-9

    def test_convex_in_u(self):
        """Test midpoint convexity on random triples"""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a, b = rng.uniform(-5.0, 5.0, size=2)
            v = rng.uniform(-5.0, 5.0)
            beta = rng.uniform(0.1, 10.0)
            mid = psi(0.5 * (a + b), v, beta)
            assert mid <= 0.5 * (psi(a, v, beta) + psi(b, v, beta)) + 1e-12

    def test_minimum_over_multiplier_side(self):
        """Test psi >= -v^2 / (2 beta) everywhere"""
        for u in np.linspace(-3.0, 3.0, 61):
            assert psi(u, 1.5, 2.0) >= -1.5 ** 2 / 4.0 - 1e-12


class TestSettings:
    """Test constraint and state validation"""

    def test_constraint_spec_ranges(self):
        """Test rejection of alpha and tau outside their ranges"""
        with pytest.raises(ConfigurationError):
            ConstraintSpec(alpha=0.0)
        with pytest.raises(ConfigurationError):
            ConstraintSpec(alpha=1.5)
        with pytest.raises(ConfigurationError):
            ConstraintSpec(tau=-1.0)
        ConstraintSpec(alpha=1.0, tau=np.inf)

    def test_alm_state_ranges(self):
        """Test rejection of gamma <= 1 and nonpositive beta or mu2"""
        with pytest.raises(ConfigurationError):
            AlmState(gamma=1.0)
        with pytest.raises(ConfigurationError):
            AlmState(beta1=0.0)
        with pytest.raises(ConfigurationError):
            AlmState(mu2=0.0)

    def test_alm_state_defaults(self):
        """Test the initial multipliers and penalties"""
        state = AlmState()
        assert (state.lambda1, state.lambda2, state.beta1, state.beta2) == (0.0, 0.0, 1.0, 1.0)


class TestBatchLagrangian:
    """Test the per-batch surrogate Lagrangian"""

    def test_hand_computed_value(self):
        """Test the loss of a tiny linear model against a straight-line evaluation"""
        params = {
            "layers.0.weight": np.array([[1.0, 0.0], [0.0, -1.0]]),
            "layers.0.bias": np.array([0.5, 0.0]),
            ENERGY_SLOPE_PATH: np.array([-1.0]),
        }
        model = MlpModel([2, 2], "relu", params)
        id_x = np.array([[1.0, 2.0], [0.0, 1.0]])
        id_y = np.array([0, 1])
        wild_x = np.array([[2.0, 0.0], [-1.0, -1.0]])
        spec = ConstraintSpec(alpha=0.05, tau=0.1)
        state = AlmState(lambda1=0.4, lambda2=0.2, beta1=2.0, beta2=3.0)

        def energy(a, b):
            return math.log(math.exp(a) + math.exp(b))

        def sig(z):
            return 1.0 / (1.0 + math.exp(-z))

        def penalty(u, v, beta):
            if beta * u + v >= 0:
                return u * v + beta * u * u / 2.0
            return -v * v / (2.0 * beta)

        id_logits = [(1.5, -2.0), (0.5, -1.0)]
        wild_logits = [(2.5, 0.0), (-0.5, 1.0)]
        objective = sum(sig(-energy(*l)) for l in wild_logits) / 2.0
        ood = sum(sig(energy(*l)) for l in id_logits) / 2.0
        ce = (energy(*id_logits[0]) - 1.5 + energy(*id_logits[1]) - (-1.0)) / 2.0
        expected = objective + penalty(ood - 0.05, 0.4, 2.0) + penalty(ce - 0.1, 0.2, 3.0)

        loss, _ = batch_lagrangian(model, (id_x, id_y), wild_x, spec, state)
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_met_constraints_reduce_to_objective(self):
        """Test that zero multipliers and exactly met levels leave only the objective"""
        model = mlp_init([2, 6, 2], "tanh", seed=1)
        (x, y), wild = random_batches(seed=2)
        ood, cls, objective = evaluate_constraints(model, LabeledDataset(x, y, 2), wild)
        spec = ConstraintSpec(alpha=ood, tau=cls)
        loss, _ = batch_lagrangian(model, (x, y), wild, spec, AlmState())
        assert loss == pytest.approx(objective, abs=1e-12)

    def test_vacuous_constraints(self):
        """Test that alpha = 1 and tau = inf add nothing to the objective"""
        model = mlp_init([2, 6, 2], "tanh", seed=1)
        (x, y), wild = random_batches(seed=3)
        _, _, objective = evaluate_constraints(model, LabeledDataset(x, y, 2), wild)
        loss, _ = batch_lagrangian(model, (x, y), wild, ConstraintSpec(alpha=1.0, tau=np.inf),
                                   AlmState())
        assert loss == pytest.approx(objective, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        """Test gradients of every parameter including the energy slope"""
        model = mlp_init([2, 5, 2], "tanh", seed=4)
        id_batch, wild = random_batches(seed=5)
        spec = ConstraintSpec(alpha=0.05, tau=0.1)
        state = AlmState(lambda1=0.3, lambda2=0.2, beta1=2.0, beta2=3.0)
        report = finite_diff_check(
            model, lambda m: batch_lagrangian(m, id_batch, wild, spec, state), n_coords=100)
        assert report.n_checked == model.parameter_count()
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(100))
    def test_gradient_at_random_points(self, seed):
        """Test the full gradient at seeded random models, batches and multipliers"""
        rng = np.random.default_rng(seed)
        model = mlp_init([2, 4, 2], "tanh", seed=seed)
        model.energy_slope_w = rng.uniform(-1.5, 1.5)
        id_batch, wild = random_batches(seed=seed, n_id=6, n_wild=5)
        spec = ConstraintSpec(alpha=0.05, tau=0.5)
        state = AlmState(lambda1=rng.uniform(-1.0, 1.0), lambda2=rng.uniform(-1.0, 1.0),
                         beta1=rng.uniform(0.5, 3.0), beta2=rng.uniform(0.5, 3.0))
        logits, _ = forward(model, id_batch[0])
        u1 = float(np.mean(1.0 / (1.0 + np.exp(model.energy_slope_w * energy_score(logits))))) - spec.alpha
        u2 = float(np.mean(energy_score(logits) - logits[np.arange(len(logits)), id_batch[1]])) - spec.tau
        if min(abs(state.beta1 * u1 + state.lambda1), abs(state.beta2 * u2 + state.lambda2)) < 1e-3:
            pytest.skip("point next to a penalty branch switch")
        report = finite_diff_check(
            model, lambda m: batch_lagrangian(m, id_batch, wild, spec, state), n_coords=100)
        assert report.n_checked == model.parameter_count()
        assert report.passed, report.max_rel_error

    def test_head_gradient_matches_finite_differences(self):
        """Test hinge-head gradients away from the kinks"""
        model = mlp_init([2, 5, 2], "tanh", seed=6, with_head=True, head_width=4)
        model.params[HEAD_OUTPUT_WEIGHT] *= 0.1
        id_batch, wild = random_batches(seed=7)
        spec = ConstraintSpec(alpha=0.05, tau=0.1)
        state = AlmState(lambda1=0.5, lambda2=0.1, beta1=2.0, beta2=1.0)
        report = finite_diff_check(
            model, lambda m: batch_lagrangian(m, id_batch, wild, spec, state, use_head=True),
            n_coords=200)
        assert report.passed, report.max_rel_error

    def test_head_mode_leaves_slope_alone(self):
        """Test that the hinge-head loss has no energy slope gradient"""
        model = mlp_init([2, 5, 2], "tanh", seed=6, with_head=True, head_width=4)
        id_batch, wild = random_batches(seed=8)
        _, grads = batch_lagrangian(model, id_batch, wild, ConstraintSpec(), AlmState(),
                                    use_head=True)
        assert grads[ENERGY_SLOPE_PATH][0] == 0.0

    def test_empty_batch(self):
        """Test UsageError on an empty batch"""
        model = mlp_init([2, 4, 2], seed=0)
        (x, y), wild = random_batches()
        with pytest.raises(UsageError):
            batch_lagrangian(model, (x, y), np.zeros((0, 2)), ConstraintSpec(), AlmState())
        with pytest.raises(UsageError):
            batch_lagrangian(model, (x[:0], y[:0]), wild, ConstraintSpec(), AlmState())

    def test_head_missing(self):
        """Test ConfigurationError when hinge losses are requested without a head"""
        model = mlp_init([2, 4, 2], seed=0)
        id_batch, wild = random_batches()
        with pytest.raises(ConfigurationError):
            batch_lagrangian(model, id_batch, wild, ConstraintSpec(), AlmState(), use_head=True)

    def test_batch_mean_bounds_full_lagrangian(self):
        """Test that the mean batch loss is not below the full-data Lagrangian"""
        rng = np.random.default_rng(10)
        id_data = LabeledDataset(rng.normal(size=(200, 2)), rng.integers(0, 2, size=200), 2)
        wild = rng.normal(loc=0.5, size=(200, 2))
        spec = ConstraintSpec(alpha=0.05, tau=0.3)
        state = AlmState(lambda1=0.5, lambda2=0.5)
        for seed in range(5):
            model = mlp_init([2, 8, 2], "tanh", seed=seed)
            full = full_lagrangian(model, id_data, wild, spec, state)
            losses = []
            for _ in range(2000):
                id_idx = rng.integers(0, 200, size=16)
                wild_idx = rng.integers(0, 200, size=16)
                loss, _ = batch_lagrangian(model, id_data.subset(id_idx), wild[wild_idx],
                                           spec, state)
                losses.append(loss)
            losses = np.array(losses)
            standard_error = losses.std(ddof=1) / np.sqrt(len(losses))
            assert losses.mean() >= full - 3.0 * standard_error


class TestDualAndPenaltyUpdates:
    """Test epoch-end multiplier and penalty updates"""

    def test_dual_ascent_violated(self):
        """Test lambda growth by mu2 * u on the active branch"""
        spec = ConstraintSpec(alpha=0.05, tau=1.0)
        state = AlmState(lambda1=0.0, beta1=1.0, mu2=0.5)
        updated = dual_ascent_update(state, spec, 0.15, 1.0)
        assert updated.lambda1 == pytest.approx(0.05)
        assert updated.lambda2 == 0.0

    def test_dual_ascent_satisfied(self):
        """Test lambda decay by mu2 * lambda / beta on the inactive branch"""
        spec = ConstraintSpec(alpha=0.05, tau=1.0)
        state = AlmState(lambda1=1.0, beta1=1.0, mu2=0.5)
        updated = dual_ascent_update(state, spec, 0.05 - 5.0, 1.0)
        assert updated.lambda1 == pytest.approx(0.5)

    def test_dual_ascent_fixed_point(self):
        """Test that u = 0 and lambda = 0 is unchanged"""
        spec = ConstraintSpec(alpha=0.05, tau=1.0)
        updated = dual_ascent_update(AlmState(), spec, 0.05, 1.0)
        assert (updated.lambda1, updated.lambda2) == (0.0, 0.0)

    def test_penalty_boundary_not_strict(self):
        """Test that a constraint exactly at level + tol keeps beta"""
        spec = ConstraintSpec(alpha=0.05, tau=1.0, tol=0.05)
        updated = penalty_update(AlmState(), spec, spec.alpha + spec.tol, spec.tau + spec.tol)
        assert (updated.beta1, updated.beta2) == (1.0, 1.0)

    def test_penalty_growth(self):
        """Test beta1 *= gamma when the OOD constraint exceeds level + tol"""
        spec = ConstraintSpec(alpha=0.05, tau=1.0, tol=0.05)
        updated = penalty_update(AlmState(gamma=1.5), spec, 0.11, 0.5)
        assert updated.beta1 == 1.5
        assert updated.beta2 == 1.0

    def test_penalty_never_decreases(self):
        """Test monotone penalties over a random constraint sequence"""
        rng = np.random.default_rng(0)
        spec = ConstraintSpec(alpha=0.05, tau=0.5, tol=0.05)
        state = AlmState()
        for _ in range(100):
            ood, cls = rng.uniform(0.0, 0.3), rng.uniform(0.0, 1.0)
            updated = penalty_update(dual_ascent_update(state, spec, ood, cls), spec, ood, cls)
            assert updated.beta1 >= state.beta1
            assert updated.beta2 >= state.beta2
            state = updated


class TestWoodsTrain:
    """Test the constrained training loops"""

    def test_zero_epochs(self):
        """Test that zero epochs return the model unchanged with an empty log"""
        id_data, wild = small_task()
        model = mlp_init([2, 8, 2], seed=0)
        trained, logs = woods_train(model, id_data, wild, ConstraintSpec(), TrainConfig(epochs=0))
        assert logs == []
        for path in model.parameter_paths():
            assert np.array_equal(trained.params[path], model.params[path])

    def test_deterministic(self):
        """Test that identical inputs give identical models and logs"""
        id_data, wild = small_task()
        config = TrainConfig(epochs=3, batch_size=16, learning_rate=0.01, seed=5)
        runs = [woods_train(mlp_init([2, 8, 2], seed=2), id_data, wild, ConstraintSpec(), config)
                for _ in range(2)]
        (first, first_logs), (second, second_logs) = runs
        assert first_logs == second_logs
        for path in first.parameter_paths():
            assert np.array_equal(first.params[path], second.params[path])

    def test_log_rows(self):
        """Test one log row per epoch with updated multipliers"""
        id_data, wild = small_task()
        _, logs = woods_train(mlp_init([2, 8, 2], seed=0), id_data, wild,
                              ConstraintSpec(alpha=0.05, tau=0.01),
                              TrainConfig(epochs=4, batch_size=16, learning_rate=0.01))
        assert [log.epoch for log in logs] == [0, 1, 2, 3]
        for log in logs:
            assert isinstance(log, EpochLog)
            assert 0.0 <= log.ood_constraint <= 1.0
            assert log.cls_constraint >= 0.0
            assert log.beta1 >= 1.0 and log.beta2 >= 1.0

    def test_vacuous_constraints_keep_multipliers(self):
        """Test that alpha = 1 and tau = inf never move lambda or beta"""
        id_data, wild = small_task()
        _, logs = woods_train(mlp_init([2, 8, 2], seed=0), id_data, wild,
                              ConstraintSpec(alpha=1.0, tau=np.inf),
                              TrainConfig(epochs=3, batch_size=16, learning_rate=0.01))
        for log in logs:
            assert (log.lambda1, log.lambda2) == (0.0, 0.0)
            assert (log.beta1, log.beta2) == (1.0, 1.0)

    def test_input_model_untouched(self):
        """Test that training does not modify the starting model"""
        id_data, wild = small_task()
        model = mlp_init([2, 8, 2], seed=0)
        before = model.weight(0).copy()
        woods_train(model, id_data, wild, ConstraintSpec(),
                    TrainConfig(epochs=1, batch_size=16, learning_rate=0.01))
        assert np.array_equal(model.weight(0), before)

    def test_empty_wild_set(self):
        """Test UsageError for an empty wild set"""
        id_data, _ = small_task()
        with pytest.raises(UsageError):
            woods_train(mlp_init([2, 8, 2], seed=0), id_data, np.zeros((0, 2)),
                        ConstraintSpec(), TrainConfig(epochs=1))

    def test_head_variant_requires_head(self):
        """Test ConfigurationError for the hinge-head loop without a head"""
        id_data, wild = small_task()
        with pytest.raises(ConfigurationError):
            woods_nn_head_train(mlp_init([2, 8, 2], seed=0), id_data, wild,
                                ConstraintSpec(), TrainConfig(epochs=1))

    def test_head_variant_runs(self):
        """Test a short hinge-head run"""
        id_data, wild = small_task()
        model = mlp_init([2, 8, 2], seed=0, with_head=True, head_width=6)
        trained, logs = woods_nn_head_train(model, id_data, wild, ConstraintSpec(tau=1.0),
                                            TrainConfig(epochs=2, batch_size=16,
                                                        learning_rate=0.01))
        assert len(logs) == 2
        assert trained.has_head
        assert trained.energy_slope_w == model.energy_slope_w

    def test_save_epoch_logs(self, tmp_path):
        """Test the epoch log CSV layout"""
        logs = [EpochLog(0, 0.5, 0.2, 0.4, 0.1, 0.0, 1.5, 1.0),
                EpochLog(1, 0.3, 0.2, 0.35, 0.2, 0.0, 2.25, 1.0)]
        path = save_epoch_logs(logs, str(tmp_path / "epoch_log.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == ",".join(EPOCH_LOG_COLUMNS)
        assert len(lines) == 3


class TestCalibrateEnergySlope:
    """Test energy centering and slope orientation before constrained training"""

    @staticmethod
    def saturated_model():
        model = mlp_init([2, 8, 2], seed=0)
        model.bias(1)[:] += 40.0
        return model

    def test_saturated_constraint_recovers(self):
        """Test that a saturated ID constraint moves away from 1"""
        id_data, wild = small_task()
        model = self.saturated_model()
        before, _, _ = evaluate_constraints(model, id_data)
        assert before > 0.999
        after, _, _ = evaluate_constraints(calibrate_energy_slope(model, id_data, wild), id_data)
        assert 0.05 < after < 0.95

    def test_classifier_unchanged(self):
        """Test that softmax outputs and weights are kept"""
        id_data, wild = small_task()
        model = self.saturated_model()
        calibrated = calibrate_energy_slope(model, id_data, wild)
        before, _ = forward(model, id_data.features)
        after, _ = forward(calibrated, id_data.features)
        assert np.allclose(softmax(before, axis=1), softmax(after, axis=1), atol=1e-12)
        for layer in range(model.n_layers):
            assert np.array_equal(model.weight(layer), calibrated.weight(layer))

    def test_orientation_and_scale(self):
        """Test that ID gets the higher in-score and |w| follows the ID spread"""
        id_data, wild = small_task()
        calibrated = calibrate_energy_slope(self.saturated_model(), id_data, wild)
        id_energy = energy_score(forward(calibrated, id_data.features)[0])
        wild_energy = energy_score(forward(calibrated, wild.training_view())[0])
        w = calibrated.energy_slope_w
        assert np.median(w * id_energy) >= np.median(w * wild_energy)
        expected = 1.0 / max(1.0, float(np.median(np.abs(id_energy))))
        assert abs(w) == pytest.approx(expected, rel=1e-9)

    def test_input_model_untouched(self):
        """Test that calibration works on a copy"""
        id_data, wild = small_task()
        model = self.saturated_model()
        bias = model.bias(1).copy()
        calibrate_energy_slope(model, id_data, wild)
        assert model.energy_slope_w == -1.0
        assert np.array_equal(model.bias(1), bias)

    @pytest.mark.parametrize("calibrate", [True, False])
    def test_woods_train_start(self, calibrate):
        """Test that woods_train starts from the calibrated slope unless switched off"""
        id_data, wild = small_task()
        model = self.saturated_model()
        config = TrainConfig(epochs=1, batch_size=16, learning_rate=1e-12)
        trained, _ = woods_train(model, id_data, wild, ConstraintSpec(), config,
                                 calibrate_slope=calibrate)
        start = calibrate_energy_slope(model, id_data, wild) if calibrate else model
        assert trained.energy_slope_w == pytest.approx(start.energy_slope_w, abs=1e-6)


SEPARABLE_TASK = {
    "class_means": [[-4.0, 0.0], [4.0, 0.0]],
    "class_covs": [[1.0, 1.0], [1.0, 1.0]],
    "class_counts": [2000, 2000],
    "ood_mean": [0.0, 8.0],
    "ood_cov": [1.0, 1.0],
    "ood_count": 2000,
}

OVERLAP_TASK = {
    "class_means": [[-2.0, 0.0], [2.0, 0.0]],
    "class_covs": [[1.0, 1.0], [1.0, 1.0]],
    "class_counts": [2000, 2000],
    "ood_mean": [0.0, 3.0],
    "ood_cov": [1.5, 1.5],
    "ood_count": 2000,
}


def gaussian_run(task, seed, pi=0.5, method="woods"):
    """
    Warm-up then train on a Gaussian task

    Returns the trained model, its logs, the constraint levels, an ID test
    split and held-out OOD samples from a fresh draw of the OOD component.
    """
    task_spec = GaussianTaskSpec(**task)
    id_data, ood_pool = gen_gaussian_task(task_spec, seed=seed)
    id_train, id_wild, id_test = split(id_data, [0.5, 0.4, 0.1], seed=seed)
    wild = make_wild(id_wild.features, ood_pool, MixtureSpec(pi, 2000, seed=seed))
    ood_test = gen_gaussian_task(task_spec, seed=1000 + seed).ood_pool[:400]
    model = mlp_init([2, 64, 64, 2], "tanh", seed=seed)
    warm, _, tau = warmup_tau(model, id_train,
                              TrainConfig(epochs=20, learning_rate=0.01, seed=seed), 20)
    spec = ConstraintSpec(alpha=0.05, tau=tau, tol=0.05)
    config = TrainConfig(epochs=50, learning_rate=0.01, seed=seed)
    if method == "woods":
        trained, logs = woods_train(warm, id_train, wild, spec, config,
                                    AlmState(gamma=1.5, mu2=1.0))
    else:
        trained, logs = ce_only_train(warm, id_train, config)
    return trained, logs, spec, id_test, ood_test


@pytest.mark.slow
class TestConstraintSatisfaction:
    """Constrained training on a linearly separable task"""

    def test_constraints_met_at_end(self):
        """Test that the final constraints are within tolerance for most seeds"""
        met = 0
        for seed in range(10):
            _, logs, spec, _, _ = gaussian_run(SEPARABLE_TASK, seed)
            final = logs[-1]
            if final.ood_constraint <= spec.alpha + spec.tol and \
                    final.cls_constraint <= spec.tau + spec.tol:
                met += 1
        assert met >= 9

    def test_detection_on_held_out_ood(self):
        """Test FPR95 <= 0.05 and AUROC >= 0.99 on fresh OOD samples for most seeds"""
        passed = 0
        for seed in range(10):
            trained, _, _, id_test, ood_test = gaussian_run(SEPARABLE_TASK, seed)
            report = evaluate(trained, id_test, ood_test, "energy_sigmoid")
            if report.fpr_at_95tpr <= 0.05 and report.auroc >= 0.99:
                passed += 1
        assert passed >= 9


@pytest.mark.slow
class TestMixingRatio:
    """Constrained training on overlapping classes and outliers"""

    def test_more_outliers_do_not_hurt(self):
        """Test mean FPR95 at pi = 0.5 against pi = 0.05"""
        fpr = {}
        for pi in (0.05, 0.5):
            values = []
            for seed in range(5):
                trained, _, _, id_test, ood_test = gaussian_run(OVERLAP_TASK, seed, pi)
                values.append(evaluate(trained, id_test, ood_test, "energy_sigmoid").fpr_at_95tpr)
            fpr[pi] = np.mean(values)
        assert fpr[0.5] <= fpr[0.05] + 0.02

    def test_woods_against_ce_only(self):
        """Test WOODS FPR95 against CE-only energy scoring and the accuracy gap"""
        woods_fpr, ce_fpr, woods_acc, ce_acc = [], [], [], []
        for seed in range(5):
            trained, _, _, id_test, ood_test = gaussian_run(OVERLAP_TASK, seed, 0.1)
            report = evaluate(trained, id_test, ood_test, "energy_sigmoid")
            woods_fpr.append(report.fpr_at_95tpr)
            woods_acc.append(report.accuracy)
            baseline, _, _, id_test, ood_test = gaussian_run(OVERLAP_TASK, seed, 0.1, "ce_only")
            report = evaluate(baseline, id_test, ood_test, "energy")
            ce_fpr.append(report.fpr_at_95tpr)
            ce_acc.append(report.accuracy)
        assert np.mean(woods_fpr) <= np.mean(ce_fpr)
        assert abs(np.mean(woods_acc) - np.mean(ce_acc)) <= 0.02


class TestReferenceSolver:
    """Test the deterministic augmented-Lagrangian solver"""

    def test_active_constraint(self):
        """Test (x - 2)^2 subject to x <= 1"""
        solution = alm_reference_solve(ConstrainedProblem.projection([2.0], [[1.0]], [1.0]))
        assert abs(solution.x[0] - 1.0) <= 1e-3
        assert solution.multipliers[0] == pytest.approx(2.0, abs=1e-3)

    def test_inactive_constraint(self):
        """Test x^2 subject to x <= 1"""
        solution = alm_reference_solve(ConstrainedProblem.projection([0.0], [[1.0]], [1.0]))
        assert abs(solution.x[0]) <= 1e-3
        assert solution.multipliers[0] == 0.0

    def test_two_dimensional_projection(self):
        """Test projection of (3, 3) onto x1 + x2 <= 2"""
        solution = alm_reference_solve(ConstrainedProblem.projection([3.0, 3.0], [[1.0, 1.0]], [2.0]))
        assert np.all(np.abs(solution.x - 1.0) <= 1e-3)
        assert solution.max_violation <= 1e-6

    def test_divergence(self):
        """Test NumericError on an objective unbounded below"""
        problem = ConstrainedProblem(objective=lambda x: float(-(x @ x)),
                                     objective_grad=lambda x: -2.0 * x,
                                     constraints=[], constraint_grads=[], x0=np.array([1.0]))
        with pytest.raises(NumericError):
            alm_reference_solve(problem)

    def test_too_many_variables(self):
        """Test ConfigurationError above ten variables"""
        problem = ConstrainedProblem.projection(np.zeros(11), [np.ones(11)], [1.0])
        with pytest.raises(ConfigurationError):
            alm_reference_solve(problem)

    def test_growing_penalty(self):
        """Test convergence with a growing penalty schedule"""
        schedule = AlmSchedule(beta=1.0, gamma=2.0)
        solution = alm_reference_solve(ConstrainedProblem.projection([2.0], [[1.0]], [1.0]), schedule)
        assert abs(solution.x[0] - 1.0) <= 1e-3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
