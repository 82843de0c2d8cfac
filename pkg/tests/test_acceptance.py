"""Full-length training runs; select with ``pytest -m slow``."""
import numpy as np
import pytest

from app.models.schemas import RefinementStrategy
from app.services.experiment_service import experiment_service
from app.services.problem_service import ReferenceOracle, problem_service
from app.utils.export import read_csv

pytestmark = pytest.mark.slow


class TestDiffusionReaction:
    def test_seed_averaged_accuracy(self, tmp_path):
        maxima = []
        for seed in (0, 1, 2):
            config = experiment_service.resolve_config(
                problem="dr1p", seed=seed, test_points=500, output_dir=tmp_path / f"seed{seed}"
            )
            assert config.total_epochs == 30000
            outcome = experiment_service.train(config)
            result = experiment_service.evaluate(config, outcome.network)

            maxima.append(float(np.max(result.rel_err_weighted)))
            better = result.rel_err_weighted < result.rel_err_unweighted
            assert better.mean() >= 0.95
        assert np.mean(maxima) <= 0.1

    def test_training_is_reproducible(self, tmp_path):
        config = experiment_service.resolve_config(
            problem="dr1p",
            seed=1,
            schedule=[{"rate": 1e-3, "epochs": 500}],
            output_dir=tmp_path,
        )
        first = experiment_service.train(config)
        second = experiment_service.train(config)
        np.testing.assert_array_equal(first.best_theta, second.best_theta)
        assert [r.train_loss for r in first.history] == [r.train_loss for r in second.history]


class TestDiffusionReactionTwoParameters:
    def test_grid_accuracy(self, tmp_path):
        config = experiment_service.resolve_config(problem="dr2p", seed=0, output_dir=tmp_path)
        assert config.test_points == 50
        outcome = experiment_service.train(config)
        result = experiment_service.evaluate(config, outcome.network)
        assert len(result.parameters) == 2500
        assert np.max(result.rel_err_weighted) <= 0.5


class TestAdvectionRefinement:
    def test_adaptive_training_fixes_kink_region(self, tmp_path):
        fixed_config = experiment_service.resolve_config(
            problem="adv_rhs", seed=0, adaptive=False, output_dir=tmp_path / "fixed"
        )
        fixed = experiment_service.train(fixed_config)
        fixed_test = experiment_service.evaluate(fixed_config, fixed.network)
        fixed_train = experiment_service.evaluate(fixed_config, fixed.network, fixed.training)

        band = (fixed_test.parameters[:, 0] > 0.8) & (fixed_test.parameters[:, 0] < 0.9)
        train_error = float(np.max(fixed_train.rel_err_weighted))
        assert np.max(fixed_test.rel_err_weighted[band]) > 10.0 * train_error

        adaptive_config = experiment_service.resolve_config(
            problem="adv_rhs", seed=0, adaptive=True, output_dir=tmp_path / "adaptive"
        )
        assert adaptive_config.gamma == 5.0 and adaptive_config.stages == 6
        assert adaptive_config.total_epochs == 30000
        adaptive = experiment_service.train(adaptive_config)
        adaptive_test = experiment_service.evaluate(adaptive_config, adaptive.network)
        assert 5.0 * np.max(adaptive_test.rel_err_weighted) <= np.max(fixed_test.rel_err_weighted)

    def test_adaptive_not_worse_than_uniform(self, tmp_path):
        config = experiment_service.resolve_config(
            problem="adv_rhs", seed=0, test_points=101, output_dir=tmp_path
        )
        rows = read_csv(experiment_service.run_compare_refinement(config))
        errors = {
            (row["strategy"], row["step"]): float(row["max_rel_err_pct"]) for row in rows
        }
        steps = sorted({row["step"] for row in rows}, key=int)
        assert len(steps) == 6
        at_or_below = [
            errors[(RefinementStrategy.ADAPTIVE.value, step)]
            <= errors[(RefinementStrategy.UNIFORM.value, step)]
            for step in steps
        ]
        assert np.mean(at_or_below) >= 0.7


class TestDiffusion2d:
    def test_adaptive_run_writes_stage_table(self, tmp_path):
        config = experiment_service.resolve_config(
            problem="diff2d",
            seed=0,
            stages=2,
            schedule=[{"rate": 1e-3, "epochs": 200}],
            output_dir=tmp_path,
        )
        experiment_service.run_train(config)
        stages = read_csv(tmp_path / "adaptive_stages.csv")
        assert len(stages) == 2
        assert int(stages[1]["n_train"]) >= int(stages[0]["n_train"])

    def test_error_falls_across_stages(self, tmp_path):
        config = experiment_service.resolve_config(
            problem="diff2d", seed=0, stage_errors=True, output_dir=tmp_path
        )
        outcome = experiment_service.train(config)
        errors = [stage.max_test_rel_err_pct for stage in outcome.stages]
        assert len(errors) == 8
        falls = sum(later < earlier for earlier, later in zip(errors, errors[1:]))
        assert falls >= 4
        assert 10.0 * errors[-1] <= errors[0]

    @pytest.mark.parametrize("alpha,beta", [(1.0, 1.0), (1.0, 10.0), (5.5, 5.5), (10.0, 1.0)])
    def test_reference_levels_agree(self, alpha, beta):
        coarse, fine = problem_service.get("diff2d").oracle.levels
        parameter = np.array([alpha, beta])
        q64 = ReferenceOracle.solve_level(coarse, parameter)
        q128 = ReferenceOracle.solve_level(fine, parameter)
        assert abs(q128 - q64) <= 1e-3 * abs(q128)
