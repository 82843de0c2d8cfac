import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import yaml
from pydantic import ValidationError

from app import __version__
from app.core.config import get_settings
from app.core.exceptions import CheckpointError, ConfigError, InvalidArgumentError
from app.models.schemas import (
    EvalWeights,
    LabeledSample,
    LossRecord,
    RefinementRecord,
    RefinementStrategy,
    RunConfig,
    RunMetadata,
    StageRecord,
)
from app.services.network_service import (
    AdamOptimizer,
    LearningRateSchedule,
    WeightNetwork,
    load_checkpoint,
    save_checkpoint,
)
from app.services.problem_service import (
    ProblemDefinition,
    ProblemInstance,
    ProblemService,
    problem_service,
)
from app.services.saddle_service import SaddleSolver
from app.services.training_service import (
    AdaptiveState,
    TrainingResult,
    TrainingService,
    adapt_stage,
    label_points,
    make_validation_midpoints,
    tensor_grid,
)
from app.utils.export import write_csv, write_json, write_mesh, write_triplets, write_vector

logger = structlog.get_logger(__name__)
settings = get_settings()

CHECKPOINT_FILE = "checkpoint.npz"
LOSS_HISTORY_FILE = "loss_history.csv"
STAGES_FILE = "adaptive_stages.csv"
TRAINING_SET_FILE = "training_set.csv"
METADATA_FILE = "run_metadata.json"
ERRORS_FILE = "errors.csv"
REFINEMENT_FILE = "refinement_comparison.csv"

LOSS_COLUMNS = ["epoch", "stage", "learning_rate", "train_loss", "val_loss"]
STAGE_COLUMNS = ["stage", "n_train", "n_val", "train_loss", "promoted", "max_test_rel_err_pct"]


@dataclass
class TrainOutcome:
    network: WeightNetwork
    best_theta: np.ndarray
    final_theta: np.ndarray
    ema_theta: np.ndarray
    history: List[LossRecord] = field(default_factory=list)
    stages: List[StageRecord] = field(default_factory=list)
    training: List[LabeledSample] = field(default_factory=list)


@dataclass
class EvalOutcome:
    parameters: np.ndarray
    exact: np.ndarray
    weighted: np.ndarray
    unweighted: np.ndarray
    epsilon0: float

    @property
    def rel_err_weighted(self) -> np.ndarray:
        return 100.0 * np.abs(self.weighted - self.exact) / (np.abs(self.exact) + self.epsilon0)

    @property
    def rel_err_unweighted(self) -> np.ndarray:
        return 100.0 * np.abs(self.unweighted - self.exact) / (np.abs(self.exact) + self.epsilon0)


def git_hash() -> str:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            check=True,
            cwd=Path(__file__).resolve().parent,
        )
        return result.stdout.strip() or "unknown"
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping")
    return data


class ExperimentService:
    """Train, evaluate and compare runs of a catalogued problem; writes every artifact."""

    def __init__(self, problems: Optional[ProblemService] = None):
        self.problems = problems or problem_service

    def resolve_config(
        self, file_values: Optional[Dict[str, Any]] = None, **overrides: Any
    ) -> RunConfig:
        """Flags override the file, the file overrides the problem defaults."""
        values: Dict[str, Any] = dict(file_values or {})
        values.update({k: v for k, v in overrides.items() if v is not None})
        if "problem" not in values:
            raise ConfigError("No problem given")
        definition = self.problems.get(values["problem"])
        for key, default in definition.defaults.items():
            if values.get(key) is None:
                values[key] = default
        if values.get("epsilon0") is None:
            values["epsilon0"] = definition.epsilon0
        if values.get("output_dir") is None:
            values["output_dir"] = (
                settings.output_root / definition.name / f"seed{values.get('seed', 0)}"
            )
        try:
            return RunConfig(**values)
        except ValidationError as e:
            raise ConfigError(f"Invalid run configuration: {e}") from e

    def _setup(self, config: RunConfig) -> Tuple[ProblemDefinition, ProblemInstance, TrainingService]:
        definition = self.problems.get(config.problem)
        instance = self.problems.instance(config.problem)
        trainer = TrainingService(
            instance.system,
            instance.family,
            epsilon0=config.epsilon0 or 0.0,
            threads=config.threads,
        )
        return definition, instance, trainer

    @staticmethod
    def _network(
        config: RunConfig, definition: ProblemDefinition, instance: ProblemInstance
    ) -> WeightNetwork:
        dims = [definition.parameter_dim, *(config.hidden_layers or []), instance.family.n_patches]
        return WeightNetwork.init(dims, definition.lower, definition.upper, seed=config.seed)

    @staticmethod
    def _optimizer(config: RunConfig, network: WeightNetwork) -> AdamOptimizer:
        return AdamOptimizer(
            network.size,
            ema_momentum=config.ema_momentum,
            initial=network.theta,
            clip_norm=config.clip_norm,
        )

    @staticmethod
    def _schedule(config: RunConfig) -> LearningRateSchedule:
        return LearningRateSchedule([(stage.rate, stage.epochs) for stage in config.schedule or []])

    @staticmethod
    def output_dir(config: RunConfig) -> Path:
        return Path(config.output_dir or settings.output_root / config.problem)

    def train_on(
        self,
        config: RunConfig,
        trainer: TrainingService,
        network: WeightNetwork,
        optimizer: AdamOptimizer,
        training: Sequence[LabeledSample],
        validation: Sequence[LabeledSample],
        stage: int = 0,
        epoch_offset: int = 0,
    ) -> TrainingResult:
        result = trainer.train(
            network,
            optimizer,
            self._schedule(config),
            trainer.prepare(training),
            validation=trainer.prepare(validation) if validation else None,
            validation_interval=config.validation_interval,
            stage=stage,
            epoch_offset=epoch_offset,
        )
        # next stage (and evaluation) starts from the lowest-loss parameters
        network.set_parameters(result.best_theta)
        return result

    def train(self, config: RunConfig) -> TrainOutcome:
        definition, instance, trainer = self._setup(config)
        network = self._network(config, definition, instance)
        optimizer = self._optimizer(config, network)
        test_samples = (
            label_points(self.test_grid(config, definition), definition.oracle, config.threads)
            if config.stage_errors
            else None
        )
        epochs = self._schedule(config).total_epochs
        history: List[LossRecord] = []
        stages: List[StageRecord] = []

        if config.adaptive:
            state = AdaptiveState.from_grid(
                definition.training_axes, definition.oracle, config.gamma or 5.0, config.threads
            )
            total_stages = config.stages or 1
            for stage in range(total_stages):
                result = self.train_on(
                    config, trainer, network, optimizer, state.training, state.validation,
                    stage=stage, epoch_offset=stage * epochs,
                )
                history.extend(result.history)
                if stage < total_stages - 1:
                    state, record = adapt_stage(state, trainer, network, definition.oracle, config.threads)
                else:
                    record = StageRecord(
                        stage=stage,
                        n_train=len(state.training),
                        n_val=len(state.validation),
                        train_loss=result.best_loss,
                    )
                if test_samples is not None:
                    record = self._with_test_error(config, network, record, test_samples)
                stages.append(record)
            training = state.training
        else:
            training = label_points(tensor_grid(definition.training_axes), definition.oracle, config.threads)
            validation = make_validation_midpoints(
                [s.parameter for s in training], definition.oracle, config.threads
            )
            result = self.train_on(config, trainer, network, optimizer, training, validation)
            history.extend(result.history)
            record = StageRecord(
                stage=0,
                n_train=len(training),
                n_val=len(validation),
                train_loss=result.best_loss,
            )
            if test_samples is not None:
                record = self._with_test_error(config, network, record, test_samples)
            stages.append(record)

        return TrainOutcome(
            network=network,
            best_theta=result.best_theta,
            final_theta=result.final_theta,
            ema_theta=result.ema_theta,
            history=history,
            stages=stages,
            training=list(training),
        )

    def _with_test_error(
        self,
        config: RunConfig,
        network: WeightNetwork,
        record: StageRecord,
        test_samples: Sequence[LabeledSample],
    ) -> StageRecord:
        outcome = self.evaluate(config, network, test_samples)
        error = float(np.max(outcome.rel_err_weighted))
        logger.info("Stage test error", stage=record.stage, max_rel_err_pct=error)
        return record.model_copy(update={"max_test_rel_err_pct": error})

    def run_train(self, config: RunConfig, command: str = "train") -> Dict[str, Path]:
        logger.info(
            "Starting training run",
            problem=config.problem,
            seed=config.seed,
            adaptive=config.adaptive,
        )
        outcome = self.train(config)
        out = self.output_dir(config)
        artifacts = {
            "checkpoint": save_checkpoint(
                out / CHECKPOINT_FILE,
                outcome.network,
                outcome.best_theta,
                outcome.final_theta,
                outcome.ema_theta,
                config.problem,
            ),
            "loss_history": write_csv(out / LOSS_HISTORY_FILE, outcome.history, LOSS_COLUMNS),
            "stages": write_csv(out / STAGES_FILE, outcome.stages, STAGE_COLUMNS),
            "training_set": write_csv(
                out / TRAINING_SET_FILE,
                [
                    {"parameter": s.parameter, "label": s.label, "provenance": s.provenance}
                    for s in outcome.training
                ],
                ["parameter", "label", "provenance"],
            ),
        }
        artifacts["metadata"] = self.write_metadata(out, config, command, len(outcome.stages))
        logger.info("Training run finished", output_dir=str(out))
        return artifacts

    @staticmethod
    def write_metadata(out: Path, config: RunConfig, command: str, stages: int) -> Path:
        metadata = RunMetadata(
            command=command,
            config=config,
            library_version=__version__,
            git_hash=git_hash(),
            eval_weights=config.eval_weights,
            stages=stages,
        )
        return write_json(out / METADATA_FILE, metadata)

    def test_grid(self, config: RunConfig, definition: ProblemDefinition) -> np.ndarray:
        count = config.test_points or 2
        axes = [np.linspace(lo, hi, count) for lo, hi in zip(definition.lower, definition.upper)]
        return tensor_grid(axes)

    def evaluate(
        self,
        config: RunConfig,
        network: WeightNetwork,
        test_samples: Optional[Sequence[LabeledSample]] = None,
    ) -> EvalOutcome:
        definition, instance, trainer = self._setup(config)
        if test_samples is None:
            test_samples = label_points(
                self.test_grid(config, definition), definition.oracle, config.threads
            )
        sample_set = trainer.prepare(test_samples)
        weighted = trainer.predict(network, sample_set)
        unweighted = trainer.solver.solve_batch(
            np.ones((len(sample_set), instance.family.n_patches)),
            instance.family,
            sample_set.operators,
            sample_set.loads,
            instance.system.qoi,
        ).qoi
        return EvalOutcome(
            parameters=sample_set.parameters,
            exact=sample_set.labels,
            weighted=weighted,
            unweighted=unweighted,
            epsilon0=config.epsilon0 or 0.0,
        )

    def load_network(self, config: RunConfig, checkpoint_path: Path) -> WeightNetwork:
        checkpoint = load_checkpoint(checkpoint_path)
        definition = self.problems.get(config.problem)
        instance = self.problems.instance(config.problem)
        if checkpoint.problem != config.problem:
            raise CheckpointError(
                f"Checkpoint was trained for '{checkpoint.problem}', not '{config.problem}'"
            )
        network = checkpoint.network
        if network.input_dim != definition.parameter_dim or network.output_dim != instance.family.n_patches:
            raise CheckpointError(
                f"Checkpoint maps {network.input_dim} -> {network.output_dim}, problem needs "
                f"{definition.parameter_dim} -> {instance.family.n_patches}"
            )
        if config.eval_weights == EvalWeights.EMA:
            network.set_parameters(checkpoint.ema_theta)
        return network

    def run_eval(self, config: RunConfig, checkpoint_path: Path) -> Dict[str, Any]:
        network = self.load_network(config, checkpoint_path)
        definition = self.problems.get(config.problem)
        outcome = self.evaluate(config, network)

        dim = definition.parameter_dim
        names = ["lambda"] if dim == 1 else [f"lambda{i + 1}" for i in range(dim)]
        columns = ["kind", *names, "q_exact", "q_weighted", "q_unweighted",
                   "rel_err_weighted_pct", "rel_err_unweighted_pct",
                   "abs_err_weighted", "abs_err_unweighted"]
        abs_weighted = np.abs(outcome.weighted - outcome.exact)
        abs_unweighted = np.abs(outcome.unweighted - outcome.exact)
        rows: List[Dict[str, Any]] = []
        for i, parameter in enumerate(outcome.parameters):
            row: Dict[str, Any] = {"kind": "point", **dict(zip(names, map(float, parameter)))}
            row.update(
                q_exact=outcome.exact[i],
                q_weighted=outcome.weighted[i],
                q_unweighted=outcome.unweighted[i],
                rel_err_weighted_pct=outcome.rel_err_weighted[i],
                rel_err_unweighted_pct=outcome.rel_err_unweighted[i],
                abs_err_weighted=abs_weighted[i],
                abs_err_unweighted=abs_unweighted[i],
            )
            rows.append(row)
        for kind, reduce in (("max", np.max), ("mean", np.mean)):
            rows.append(
                {
                    "kind": kind,
                    "rel_err_weighted_pct": reduce(outcome.rel_err_weighted),
                    "rel_err_unweighted_pct": reduce(outcome.rel_err_unweighted),
                    "abs_err_weighted": reduce(abs_weighted),
                    "abs_err_unweighted": reduce(abs_unweighted),
                }
            )

        out = self.output_dir(config)
        path = write_csv(out / ERRORS_FILE, rows, columns)
        summary = {
            "errors": path,
            "max_rel_err_weighted_pct": float(np.max(outcome.rel_err_weighted)),
            "max_rel_err_unweighted_pct": float(np.max(outcome.rel_err_unweighted)),
            "mean_rel_err_weighted_pct": float(np.mean(outcome.rel_err_weighted)),
        }
        logger.info("Evaluation finished", **{k: v for k, v in summary.items() if k != "errors"})
        return summary

    @staticmethod
    def uniform_axes(definition: ProblemDefinition, target: int) -> List[np.ndarray]:
        """Equispaced grid with at least ``target`` points (exactly ``target`` in 1D)."""
        dim = definition.parameter_dim
        per_axis = target if dim == 1 else int(math.ceil(target ** (1.0 / dim) - 1e-9))
        per_axis = max(per_axis, 2)
        return [np.linspace(lo, hi, per_axis) for lo, hi in zip(definition.lower, definition.upper)]

    def run_compare_refinement(self, config: RunConfig) -> Path:
        """Adaptive and uniform training sets of equal size, same seed and epoch budget."""
        definition, instance, trainer = self._setup(config)
        test_samples = label_points(self.test_grid(config, definition), definition.oracle, config.threads)
        oracle = definition.oracle
        gamma = config.gamma or 5.0
        steps = config.refinement_steps or 1

        state = AdaptiveState.from_grid(definition.training_axes, oracle, gamma, config.threads)
        networks = {strategy: self._network(config, definition, instance) for strategy in RefinementStrategy}
        optimizers = {
            strategy: self._optimizer(config, net) for strategy, net in networks.items()
        }

        records: List[RefinementRecord] = []
        for step in range(steps):
            uniform_training = label_points(
                tensor_grid(self.uniform_axes(definition, len(state.training))), oracle, config.threads
            )
            sets = {
                RefinementStrategy.ADAPTIVE: (state.training, state.validation),
                RefinementStrategy.UNIFORM: (
                    uniform_training,
                    make_validation_midpoints(
                        [s.parameter for s in uniform_training], oracle, config.threads
                    ),
                ),
            }
            for strategy, (training, validation) in sets.items():
                network = networks[strategy]
                self.train_on(
                    config,
                    trainer,
                    network,
                    optimizers[strategy],
                    training,
                    validation,
                    stage=step,
                )
                outcome = self.evaluate(config, network, test_samples)
                records.append(
                    RefinementRecord(
                        strategy=strategy,
                        step=step,
                        n_train=len(training),
                        max_rel_err_pct=float(np.max(outcome.rel_err_weighted)),
                        mean_rel_err_pct=float(np.mean(outcome.rel_err_weighted)),
                        max_abs_err=float(np.max(np.abs(outcome.weighted - outcome.exact))),
                    )
                )
                logger.info("Refinement step", strategy=strategy.value, step=step, n_train=len(training),
                            max_rel_err_pct=records[-1].max_rel_err_pct)
            if step < steps - 1:
                adaptive_network = networks[RefinementStrategy.ADAPTIVE]
                state, _ = adapt_stage(
                    state, trainer, adaptive_network, oracle, config.threads
                )

        out = self.output_dir(config)
        path = write_csv(out / REFINEMENT_FILE, records)
        self.write_metadata(out, config, "compare-refinement", steps)
        return path

    def dump_system(
        self,
        config: RunConfig,
        parameter: Sequence[float],
        weights: Optional[Sequence[float]] = None,
        checkpoint_path: Optional[Path] = None,
    ) -> List[Path]:
        """Matrices of the online system at one λ as ``row col value`` triplet files."""
        definition = self.problems.get(config.problem)
        instance = self.problems.instance(config.problem)
        parameter = np.asarray(parameter, dtype=float)
        if parameter.shape != (definition.parameter_dim,):
            raise InvalidArgumentError(
                f"Problem {definition.name} takes {definition.parameter_dim} "
                f"parameters, got {parameter.size}"
            )
        if weights is not None and checkpoint_path is not None:
            raise InvalidArgumentError("Give either weights or a checkpoint, not both")
        if checkpoint_path is not None:
            weights, _ = self.load_network(config, checkpoint_path).forward(parameter)
        c = np.ones(instance.family.n_patches) if weights is None else np.asarray(weights, dtype=float)

        solver = SaddleSolver()
        gram = solver.combine_gram(c, instance.family)
        operator = instance.system.matrix(parameter)
        load = instance.system.load(parameter)
        solution = solver.solve(gram, operator, load, instance.system.qoi)

        out = self.output_dir(config)
        paths = [
            write_triplets(out / "gram.txt", gram),
            write_triplets(out / "operator.txt", operator),
            write_triplets(out / "block.txt", solver.block_matrix(gram, operator)),
            write_vector(out / "load.txt", load),
            write_vector(out / "qoi.txt", instance.system.qoi),
            write_vector(out / "weights.txt", c),
            write_vector(out / "solution_r.txt", solution.r),
            write_vector(out / "solution_u.txt", solution.u),
        ]
        for index, matrix in enumerate(instance.family.matrices):
            paths.append(write_triplets(out / f"patch_gram_{index}.txt", matrix))
        paths.extend(write_mesh(out, instance.trial.mesh, prefix="trial_mesh"))
        paths.extend(write_mesh(out, instance.test.mesh, prefix="test_mesh"))
        logger.info("System dumped", output_dir=str(out), qoi=solution.qoi_value, files=len(paths))
        return paths


experiment_service = ExperimentService()
