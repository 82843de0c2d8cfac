import numpy as np
import pytest

from app.core.exceptions import CheckpointError, InvalidArgumentError, StateError
from app.services.network_service import (
    AdamOptimizer,
    LearningRateSchedule,
    WeightNetwork,
    load_checkpoint,
    save_checkpoint,
)

DIMS = [1, 10, 10, 10, 4]


class TestWeightNetwork:
    def test_same_seed_same_parameters(self):
        first = WeightNetwork.init(DIMS, [1.0], [10.0], seed=42)
        second = WeightNetwork.init(DIMS, [1.0], [10.0], seed=42)
        np.testing.assert_array_equal(first.theta, second.theta)

    def test_different_seed(self):
        first = WeightNetwork.init(DIMS, [1.0], [10.0], seed=1)
        second = WeightNetwork.init(DIMS, [1.0], [10.0], seed=2)
        assert not np.array_equal(first.theta, second.theta)

    def test_parameter_count(self):
        net = WeightNetwork.init(DIMS, [1.0], [10.0], seed=0)
        assert net.size == (1 * 10 + 10) + 2 * (10 * 10 + 10) + (10 * 4 + 4)

    def test_glorot_limits_and_zero_biases(self):
        net = WeightNetwork.init(DIMS, [1.0], [10.0], seed=3)
        for (weight, bias), (fan_in, fan_out) in zip(net.layers(), net.shapes):
            assert np.abs(weight).max() <= np.sqrt(6.0 / (fan_in + fan_out))
            np.testing.assert_array_equal(bias, np.zeros(fan_out))

    def test_zero_parameters_give_log_two(self):
        net = WeightNetwork(DIMS, [1.0], [10.0])
        for lam in (1.0, 4.2, 10.0):
            c, _ = net.forward(np.array([lam]))
            np.testing.assert_allclose(c, np.full(4, np.log(2.0)))

    def test_output_shapes(self, dr1p_network):
        single, _ = dr1p_network.forward(np.array([2.0]))
        batch, _ = dr1p_network.forward(np.array([[2.0], [3.0], [9.0]]))
        assert single.shape == (4,)
        assert batch.shape == (3, 4)
        np.testing.assert_array_equal(batch[0], single)

    def test_strictly_positive(self):
        rng = np.random.default_rng(11)
        net = WeightNetwork(DIMS, [1.0], [10.0])
        for _ in range(200):
            net.set_parameters(rng.standard_normal(net.size))
            c, _ = net.forward(rng.uniform(1.0, 10.0, size=(5, 1)))
            assert np.all(c > 0)

    def test_clamps_outside_bounds(self, dr1p_network):
        inside, _ = dr1p_network.forward(np.array([10.0]))
        outside, _ = dr1p_network.forward(np.array([12.0]))
        np.testing.assert_array_equal(outside, inside)

    def test_normalize_onto_unit_box(self):
        net = WeightNetwork([2, 3], [1.0, 0.0], [10.0, 1.0])
        np.testing.assert_allclose(
            net.normalize(np.array([[1.0, 0.0], [5.5, 0.5], [10.0, 1.0]])),
            [[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]],
        )

    def test_invalid_configuration(self):
        with pytest.raises(InvalidArgumentError):
            WeightNetwork([1], [1.0], [10.0])
        with pytest.raises(InvalidArgumentError):
            WeightNetwork([2, 4], [1.0], [10.0])
        with pytest.raises(InvalidArgumentError, match="Unknown activation"):
            WeightNetwork([1, 4], [1.0], [10.0], hidden_activation="relu")

    def test_set_parameters_shape(self, dr1p_network):
        with pytest.raises(InvalidArgumentError):
            dr1p_network.set_parameters(np.zeros(3))

    def test_lipschitz_bound(self, dr1p_network):
        rng = np.random.default_rng(5)
        bound = dr1p_network.lipschitz_bound()
        for a, b in rng.uniform(1.0, 10.0, size=(50, 2)):
            ca, _ = dr1p_network.forward(np.array([a]))
            cb, _ = dr1p_network.forward(np.array([b]))
            assert np.linalg.norm(ca - cb) <= bound * abs(a - b) + 1e-12


class TestBackward:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(21)
        net = WeightNetwork(DIMS, [1.0], [10.0], theta=0.5 * rng.standard_normal(261))
        theta = net.theta.copy()
        for _ in range(10):
            lam = rng.uniform(1.0, 10.0, size=1)
            direction = rng.standard_normal(4)
            _, cache = net.forward(lam)
            gradient = net.backward(cache, direction)

            numeric = np.zeros(net.size)
            for index in range(net.size):
                step = 1e-6
                plus, minus = theta.copy(), theta.copy()
                plus[index] += step
                minus[index] -= step
                net.set_parameters(plus)
                high = direction @ net.forward(lam)[0]
                net.set_parameters(minus)
                low = direction @ net.forward(lam)[0]
                numeric[index] = (high - low) / (2.0 * step)
            net.set_parameters(theta)
            np.testing.assert_allclose(gradient, numeric, rtol=1e-6, atol=1e-8)

    def test_zero_upstream_gradient(self, dr1p_network):
        _, cache = dr1p_network.forward(np.array([3.0]))
        np.testing.assert_array_equal(
            dr1p_network.backward(cache, np.zeros(4)), np.zeros(dr1p_network.size)
        )

    def test_linear_network_outer_product(self):
        net = WeightNetwork(
            [2, 3],
            [-1.0, -1.0],
            [1.0, 1.0],
            input_activation="identity",
            hidden_activation="identity",
            output_activation="identity",
        )
        x = np.array([0.3, -0.8])
        upstream = np.array([1.0, 2.0, -0.5])
        _, cache = net.forward(x)
        gradient = net.backward(cache, upstream)
        np.testing.assert_allclose(gradient[:6], np.outer(x, upstream).ravel())
        np.testing.assert_allclose(gradient[6:], upstream)

    def test_batch_gradient_sums_samples(self, dr1p_network):
        lams = np.array([[2.0], [7.5]])
        upstream = np.array([[1.0, 0.0, -1.0, 0.5], [0.2, 0.3, 0.4, 0.5]])
        _, cache = dr1p_network.forward(lams)
        batch = dr1p_network.backward(cache, upstream)
        singles = []
        for lam, g in zip(lams, upstream):
            _, single_cache = dr1p_network.forward(lam)
            singles.append(dr1p_network.backward(single_cache, g))
        np.testing.assert_allclose(batch, singles[0] + singles[1], rtol=1e-12, atol=1e-15)

    def test_stale_cache(self, dr1p_network):
        _, cache = dr1p_network.forward(np.array([3.0]))
        dr1p_network.set_parameters(dr1p_network.theta + 0.1)
        with pytest.raises(StateError):
            dr1p_network.backward(cache, np.ones(4))


class TestAdamOptimizer:
    def test_zero_gradient_leaves_parameters(self):
        theta = np.array([1.0, -2.0, 3.0])
        optimizer = AdamOptimizer(3)
        np.testing.assert_array_equal(optimizer.step(theta, np.zeros(3), 1e-3), theta)

    def test_first_step_moves_by_rate(self):
        theta = np.zeros(3)
        grad = np.array([0.5, -2.0, 1e-3])
        optimizer = AdamOptimizer(3)
        updated = optimizer.step(theta, grad, 1e-3)
        np.testing.assert_allclose(updated, -1e-3 * np.sign(grad), rtol=1e-10)

    def test_moving_average(self):
        theta = np.ones(2)
        optimizer = AdamOptimizer(2, initial=theta)
        updated = optimizer.step(theta, np.array([1.0, -1.0]), 0.1)
        np.testing.assert_allclose(optimizer.state.ema, 0.99 * theta + 0.01 * updated)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            AdamOptimizer(3).step(np.zeros(3), np.zeros(2), 1e-3)

    def test_clipping_bounds_second_moment(self):
        optimizer = AdamOptimizer(2, clip_norm=1.0)
        optimizer.step(np.zeros(2), np.array([3e6, 4e6]), 1e-3)
        np.testing.assert_allclose(optimizer.state.v, 1e-3 * np.array([0.36, 0.64]))

    def test_recovers_after_gradient_spike(self):
        moved = {}
        for clip_norm in (None, 1.0):
            optimizer = AdamOptimizer(1, clip_norm=clip_norm)
            theta = optimizer.step(np.zeros(1), np.array([1e6]), 1e-3)
            for _ in range(300):
                theta = optimizer.step(theta, np.array([0.05]), 1e-3)
            start = theta.copy()
            for _ in range(100):
                theta = optimizer.step(theta, np.array([0.05]), 1e-3)
            moved[clip_norm] = float(start[0] - theta[0])
        assert moved[1.0] > 1e-2
        assert moved[1.0] > 1000 * moved[None]

    def test_small_gradients_are_not_clipped(self, rng):
        plain, clipped = AdamOptimizer(4), AdamOptimizer(4, clip_norm=10.0)
        theta_plain = theta_clipped = np.zeros(4)
        for _ in range(5):
            grad = rng.uniform(-1.0, 1.0, size=4)
            theta_plain = plain.step(theta_plain, grad, 1e-2)
            theta_clipped = clipped.step(theta_clipped, grad, 1e-2)
        np.testing.assert_array_equal(theta_clipped, theta_plain)

    @pytest.mark.parametrize("clip_norm", [0.0, -1.0])
    def test_invalid_clip_norm(self, clip_norm):
        with pytest.raises(InvalidArgumentError):
            AdamOptimizer(3, clip_norm=clip_norm)


class TestLearningRateSchedule:
    def setup_method(self):
        self.schedule = LearningRateSchedule([(1e-3, 10000), (1e-4, 10000), (1e-5, 10000)])

    def test_total(self):
        assert self.schedule.total_epochs == 30000

    @pytest.mark.parametrize(
        "epoch,rate", [(0, 1e-3), (9999, 1e-3), (10000, 1e-4), (19999, 1e-4), (20000, 1e-5)]
    )
    def test_switch_points(self, epoch, rate):
        assert self.schedule.rate(epoch) == rate

    def test_beyond_schedule(self):
        with pytest.raises(InvalidArgumentError):
            self.schedule.rate(30000)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, dr1p_network):
        best = dr1p_network.theta.copy()
        final = best + 1.0
        ema = best - 1.0
        path = save_checkpoint(tmp_path / "ck.npz", dr1p_network, best, final, ema, "dr1p")

        checkpoint = load_checkpoint(path)
        np.testing.assert_array_equal(checkpoint.network.theta, best)
        np.testing.assert_array_equal(checkpoint.final_theta, final)
        np.testing.assert_array_equal(checkpoint.ema_theta, ema)
        assert checkpoint.problem == "dr1p"
        assert checkpoint.network.dims == DIMS
        assert checkpoint.network.activation_names == ("tanh", "tanh", "softplus")

        lam = np.array([[1.0], [5.0], [10.0]])
        np.testing.assert_array_equal(
            checkpoint.network.forward(lam)[0], dr1p_network.forward(lam)[0]
        )

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="does not exist"):
            load_checkpoint(tmp_path / "nothing.npz")

    def test_corrupt(self, tmp_path):
        path = tmp_path / "ck.npz"
        path.write_bytes(b"this is not a checkpoint file")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ck.npz"
        with open(path, "wb") as handle:
            np.savez(handle, format_version=np.array(99))
        with pytest.raises(CheckpointError, match="Unsupported"):
            load_checkpoint(path)

    def test_parameter_shape_mismatch(self, tmp_path, dr1p_network):
        path = save_checkpoint(
            tmp_path / "ck.npz",
            dr1p_network,
            np.zeros(5),
            dr1p_network.theta,
            dr1p_network.theta,
            "dr1p",
        )
        with pytest.raises(CheckpointError, match="best parameters"):
            load_checkpoint(path)
