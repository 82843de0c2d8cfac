from concurrent.futures import ThreadPoolExecutor
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from app.core.exceptions import (
    InvalidArgumentError,
    LabelSingularityError,
    NonFiniteLossError,
)
from app.models.schemas import LabeledSample, Provenance
from app.services.network_service import AdamOptimizer, LearningRateSchedule, WeightNetwork
from app.services.problem_service import problem_service
from app.services.saddle_service import BatchSolution, SaddleSolver
from app.services.training_service import (
    AdaptiveState,
    ParameterCell,
    TrainingService,
    adapt_stage,
    label_points,
    loss_value,
    per_sample_loss,
    tensor_grid,
    validation_midpoints,
)
from app.utils.cache import LabelCache


def _sample(parameter, label=1.0):
    return LabeledSample(
        parameter=[float(p) for p in parameter], label=label, provenance=Provenance.ANALYTIC
    )


def _dr1p_samples(values):
    return [problem_service.label("dr1p", [v]) for v in values]


class TestLoss:
    def test_perfect_prediction(self):
        assert loss_value(np.array([0.3, 2.0]), np.array([0.3, 2.0])) == 0.0

    def test_single_sample(self):
        assert loss_value(np.array([1.1]), np.array([1.0])) == pytest.approx(0.005)

    def test_zero_label_without_regularizer(self):
        with pytest.raises(LabelSingularityError, match="epsilon0"):
            per_sample_loss(np.array([0.1]), np.array([0.0]))

    def test_zero_label_with_regularizer(self):
        losses = per_sample_loss(np.array([1e-6]), np.array([0.0]), epsilon0=1e-6)
        np.testing.assert_allclose(losses, [0.5])


class TestTrainingService:
    def setup_method(self):
        self.instance = problem_service.instance("dr1p")
        self.trainer = TrainingService(
            self.instance.system,
            self.instance.family,
            solver=SaddleSolver(threads=1),
            threads=1,
        )
        self.samples = _dr1p_samples([1.0, 3.0, 6.0, 10.0])

    def _network(self, seed=0):
        return WeightNetwork.init([1, 10, 10, 10, 4], [1.0], [10.0], seed=seed)

    def test_prepare(self):
        sample_set = self.trainer.prepare(self.samples)
        assert len(sample_set) == 4
        assert sample_set.operators.shape == (4, 4, 1)
        assert sample_set.loads.shape == (4, 4)

    def test_prepare_empty(self):
        with pytest.raises(InvalidArgumentError):
            self.trainer.prepare([])

    def test_gradient_matches_directional_differences(self):
        network = self._network(seed=3)
        sample_set = self.trainer.prepare(self.samples)
        theta = network.theta.copy()
        _, gradient = self.trainer.loss_gradient(network, sample_set)

        rng = np.random.default_rng(8)
        for _ in range(5):
            direction = rng.standard_normal(network.size)
            step = 1e-6
            network.set_parameters(theta + step * direction)
            high = self.trainer.loss(network, sample_set)
            network.set_parameters(theta - step * direction)
            low = self.trainer.loss(network, sample_set)
            network.set_parameters(theta)
            numeric = (high - low) / (2.0 * step)
            assert gradient @ direction == pytest.approx(numeric, rel=1e-5, abs=1e-12)

    def test_exact_predictions_have_zero_gradient(self):
        network = self._network()
        predictions = self.trainer.predict(network, self.trainer.prepare(self.samples))
        exact = [
            _sample(s.parameter, float(p)) for s, p in zip(self.samples, predictions)
        ]
        loss, gradient = self.trainer.loss_gradient(network, self.trainer.prepare(exact))
        assert loss == 0.0
        np.testing.assert_array_equal(gradient, np.zeros(network.size))

    def test_gradient_averages_samples(self):
        network = self._network()
        pair = self.trainer.loss_gradient(network, self.trainer.prepare(self.samples[:2]))[1]
        first = self.trainer.loss_gradient(network, self.trainer.prepare(self.samples[:1]))[1]
        second = self.trainer.loss_gradient(network, self.trainer.prepare(self.samples[1:2]))[1]
        np.testing.assert_allclose(pair, 0.5 * (first + second), rtol=1e-10, atol=1e-15)

    def test_non_finite_loss(self):
        network = self._network()
        sample_set = self.trainer.prepare(self.samples[:1])
        broken = BatchSolution(
            r=np.zeros((1, 4)),
            u=np.full((1, 1), np.nan),
            qoi=np.array([np.nan]),
            gradient=np.zeros((1, 4)),
        )
        with patch.object(SaddleSolver, "solve_batch", return_value=broken):
            with pytest.raises(NonFiniteLossError) as excinfo:
                self.trainer.loss_gradient(network, sample_set)
        assert excinfo.value.parameter == [1.0]
        assert "lambda=[1.0]" in str(excinfo.value)

    def test_zero_epochs(self):
        network = self._network()
        theta = network.theta.copy()
        result = self.trainer.train(
            network,
            AdamOptimizer(network.size, initial=theta),
            LearningRateSchedule([(1e-3, 0)]),
            self.trainer.prepare(self.samples),
        )
        np.testing.assert_array_equal(network.theta, theta)
        np.testing.assert_array_equal(result.best_theta, theta)
        assert result.history == []

    def test_training_lowers_loss(self, short_schedule):
        network = self._network()
        result = self.trainer.train(
            network,
            AdamOptimizer(network.size, initial=network.theta),
            short_schedule,
            self.trainer.prepare(self.samples),
        )
        assert len(result.history) == 30
        assert result.best_loss < result.history[0].train_loss
        assert result.history[19].learning_rate == 1e-3
        assert result.history[20].learning_rate == 1e-4

    def test_validation_interval(self, short_schedule):
        network = self._network()
        result = self.trainer.train(
            network,
            AdamOptimizer(network.size, initial=network.theta),
            short_schedule,
            self.trainer.prepare(self.samples),
            validation=self.trainer.prepare(_dr1p_samples([2.0, 8.0])),
            validation_interval=10,
            stage=2,
            epoch_offset=100,
        )
        recorded = [r.epoch for r in result.history if r.val_loss is not None]
        assert recorded == [100, 110, 120]
        assert all(r.stage == 2 for r in result.history)

    def test_deterministic(self, short_schedule):
        runs = []
        for _ in range(2):
            network = self._network(seed=9)
            runs.append(
                self.trainer.train(
                    network,
                    AdamOptimizer(network.size, initial=network.theta),
                    short_schedule,
                    self.trainer.prepare(self.samples),
                )
            )
        assert [r.train_loss for r in runs[0].history] == [r.train_loss for r in runs[1].history]
        np.testing.assert_array_equal(runs[0].final_theta, runs[1].final_theta)


class TestValidationMidpoints:
    def test_one_dimensional(self):
        points = [[float(v)] for v in range(1, 11)]
        np.testing.assert_allclose(
            validation_midpoints(points)[:, 0], np.arange(1.5, 10.0, 1.0)
        )

    def test_two_dimensional(self):
        points = tensor_grid([[1.0, 5.5, 10.0], [1.0, 5.5, 10.0]])
        expected = tensor_grid([[3.25, 7.75], [3.25, 7.75]])
        np.testing.assert_allclose(validation_midpoints(points), expected)

    def test_two_points(self):
        np.testing.assert_allclose(validation_midpoints([[0.0], [1.0]]), [[0.5]])

    def test_single_point(self):
        with pytest.raises(InvalidArgumentError):
            validation_midpoints([[1.0]])

    def test_label_points_keeps_order(self):
        labels = label_points([[3.0], [1.0], [2.0]], lambda p: _sample(p, float(p[0])), threads=2)
        assert [s.label for s in labels] == [3.0, 1.0, 2.0]


class TestParameterCell:
    def test_split_one_dimensional(self):
        children = ParameterCell((0.5,), (1.0,)).split()
        assert [c.center.tolist() for c in children] == [[0.625], [0.875]]

    def test_split_two_dimensional(self):
        children = ParameterCell((5.5, 5.5), (10.0, 10.0)).split()
        centres = sorted(tuple(c.center.tolist()) for c in children)
        assert centres == [(6.625, 6.625), (6.625, 8.875), (8.875, 6.625), (8.875, 8.875)]


class TestAdaptStage:
    def setup_method(self):
        self.label_fn = lambda p: _sample(p)
        self.trainer = MagicMock()
        self.trainer.loss.return_value = 1.0
        self.network = MagicMock()

    def test_promotes_one_interval(self):
        state = AdaptiveState.from_grid([[0.0, 0.5, 1.0]], self.label_fn, gamma=5.0, threads=1)
        assert state.validation_points[:, 0].tolist() == [0.25, 0.75]
        self.trainer.sample_losses.return_value = np.array([1.0, 10.0])

        updated, record = adapt_stage(state, self.trainer, self.network, self.label_fn, threads=1)

        assert updated.training_points[:, 0].tolist() == [0.0, 0.5, 0.75, 1.0]
        assert updated.validation_points[:, 0].tolist() == [0.25, 0.625, 0.875]
        assert record.promoted == [[0.75]]
        assert record.n_train == 4
        assert record.n_val == 3
        assert updated.stage == 1

    def test_threshold_is_strict(self):
        state = AdaptiveState.from_grid([[0.0, 0.5, 1.0]], self.label_fn, gamma=5.0, threads=1)
        self.trainer.sample_losses.return_value = np.array([5.0, 4.0])

        updated, record = adapt_stage(state, self.trainer, self.network, self.label_fn, threads=1)

        assert updated.training_points.tolist() == state.training_points.tolist()
        assert updated.validation_points.tolist() == state.validation_points.tolist()
        assert record.promoted == []

    def test_two_dimensional_split(self):
        axes = [[1.0, 5.5, 10.0], [1.0, 5.5, 10.0]]
        state = AdaptiveState.from_grid(axes, self.label_fn, gamma=5.0, threads=1)
        assert len(state.training) == 9
        assert len(state.validation) == 4
        self.trainer.sample_losses.return_value = np.array([0.0, 0.0, 0.0, 100.0])

        updated, _ = adapt_stage(state, self.trainer, self.network, self.label_fn, threads=1)

        training = {tuple(p) for p in updated.training_points.tolist()}
        validation = {tuple(p) for p in updated.validation_points.tolist()}
        assert (7.75, 7.75) in training
        assert len(training) == 10
        assert len(validation) == 7
        assert {(6.625, 6.625), (8.875, 8.875)} <= validation
        assert not training & validation
        assert {tuple(p) for p in state.training_points.tolist()} <= training

    def test_grid_needs_two_coordinates(self):
        with pytest.raises(InvalidArgumentError):
            AdaptiveState.from_grid([[1.0]], self.label_fn, gamma=5.0)


class TestLabelCache:
    def setup_method(self):
        self.cache = LabelCache(max_size=2)

    def test_keys_depend_on_every_bit(self):
        first = self.cache.parameter_key("diff2d", [1.0, 2.0])
        second = self.cache.parameter_key("diff2d", [1.0, 2.0 + 1e-15])
        assert first != second
        assert first == self.cache.parameter_key("diff2d", [1.0, 2.0])
        assert first.startswith("diff2d:")

    def test_hits_and_misses(self):
        self.cache.set("a", 1)
        assert self.cache.get("a") == 1
        assert self.cache.get("b") is None
        assert self.cache.get_stats()["hits"] == 1
        assert self.cache.get_stats()["misses"] == 1

    def test_least_recently_used_is_evicted(self):
        self.cache.set("a", 1)
        self.cache.set("b", 2)
        self.cache.get("a")
        self.cache.set("c", 3)
        assert self.cache.get("b") is None
        assert self.cache.get("a") == 1
        assert self.cache.get("c") == 3

    def test_delete(self):
        self.cache.set("a", 1)
        assert self.cache.delete("a") is True
        assert self.cache.delete("a") is False

    def test_concurrent_access_keeps_bounds_and_counts(self):
        cache = LabelCache(max_size=8)
        keys = [f"k{i % 32}" for i in range(4000)]

        def touch(key):
            if cache.get(key) is None:
                cache.set(key, key)

        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(touch, keys))

        stats = cache.get_stats()
        assert stats["memory_cache_size"] <= 8
        assert stats["hits"] + stats["misses"] == len(keys)
