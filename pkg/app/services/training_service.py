import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.config import get_settings
from app.core.exceptions import (
    InvalidArgumentError,
    LabelSingularityError,
    NonFiniteLossError,
)
from app.models.fem import AffineParametricSystem, WeightedGramFamily
from app.models.schemas import LabeledSample, LossRecord, StageRecord
from app.services.network_service import (
    AdamOptimizer,
    ForwardCache,
    LearningRateSchedule,
    WeightNetwork,
)
from app.services.saddle_service import BatchSolution, SaddleSolver

logger = structlog.get_logger(__name__)
settings = get_settings()

LabelFunction = Callable[[np.ndarray], LabeledSample]


@dataclass
class SampleSet:
    """Labelled parameters with their pre-evaluated B(λ_i) and ℓ(λ_i)."""

    samples: List[LabeledSample]
    parameters: np.ndarray  # (N, ρ)
    labels: np.ndarray  # (N,)
    operators: np.ndarray  # (N, m, n)
    loads: np.ndarray  # (N, m)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TrainingResult:
    best_theta: np.ndarray
    final_theta: np.ndarray
    ema_theta: np.ndarray
    best_loss: float
    final_loss: float
    history: List[LossRecord] = field(default_factory=list)


def loss_value(predictions: np.ndarray, labels: np.ndarray, epsilon0: float = 0.0) -> float:
    """Mean of ½((q̂ − q)/(q + ε₀))²."""
    return float(np.mean(per_sample_loss(predictions, labels, epsilon0)))


def per_sample_loss(predictions: np.ndarray, labels: np.ndarray, epsilon0: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels, dtype=float)
    denominator = labels + epsilon0
    if np.any(denominator == 0.0):
        index = int(np.flatnonzero(denominator == 0.0)[0])
        raise LabelSingularityError(
            f"Label {labels[index]!r} plus regularizer {epsilon0!r} is zero (sample {index}); "
            "use epsilon0 > 0"
        )
    return 0.5 * ((np.asarray(predictions, dtype=float) - labels) / denominator) ** 2


class TrainingService:
    """End-to-end loss and gradient: network → weights → saddle solve → QoI."""

    def __init__(
        self,
        system: AffineParametricSystem,
        family: WeightedGramFamily,
        epsilon0: float = 0.0,
        solver: Optional[SaddleSolver] = None,
        threads: Optional[int] = None,
    ):
        if family.size != system.m:
            raise InvalidArgumentError("Gram family and test space sizes differ")
        self.system = system
        self.family = family
        self.epsilon0 = epsilon0
        self.threads = threads if threads is not None else settings.threads
        self.solver = solver or SaddleSolver(threads=self.threads)

    def prepare(self, samples: Sequence[LabeledSample]) -> SampleSet:
        if not samples:
            raise InvalidArgumentError("Sample set is empty")
        parameters = np.array([s.parameter for s in samples], dtype=float)
        labels = np.array([s.label for s in samples], dtype=float)
        return SampleSet(
            samples=list(samples),
            parameters=parameters,
            labels=labels,
            operators=self.system.matrix_stack(parameters),
            loads=self.system.load_stack(parameters),
        )

    def _solve(
        self, network: WeightNetwork, sample_set: SampleSet
    ) -> Tuple[np.ndarray, BatchSolution, ForwardCache]:
        weights, cache = network.forward(sample_set.parameters)
        batch = self.solver.solve_batch(
            weights, self.family, sample_set.operators, sample_set.loads, self.system.qoi
        )
        return weights, batch, cache

    def predict(self, network: WeightNetwork, sample_set: SampleSet) -> np.ndarray:
        return self._solve(network, sample_set)[1].qoi

    def sample_losses(self, network: WeightNetwork, sample_set: SampleSet) -> np.ndarray:
        return per_sample_loss(self.predict(network, sample_set), sample_set.labels, self.epsilon0)

    def loss(self, network: WeightNetwork, sample_set: SampleSet) -> float:
        return float(np.mean(self.sample_losses(network, sample_set)))

    def _check_finite(
        self, losses: np.ndarray, weights: np.ndarray, sample_set: SampleSet
    ) -> None:
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            index = int(bad[0])
            raise NonFiniteLossError(
                "Training loss is not finite",
                parameter=sample_set.parameters[index].tolist(),
                weight_range=(float(np.min(weights)), float(np.max(weights))),
            )

    def loss_gradient(
        self, network: WeightNetwork, sample_set: SampleSet
    ) -> Tuple[float, np.ndarray]:
        """Loss and dL/dθ; per-sample contributions are summed in sample order."""
        weights, batch, cache = self._solve(network, sample_set)
        losses = per_sample_loss(batch.qoi, sample_set.labels, self.epsilon0)
        self._check_finite(losses, weights, sample_set)

        count = len(sample_set)
        factor = (batch.qoi - sample_set.labels) / (
            count * (sample_set.labels + self.epsilon0) ** 2
        )
        dL_dc = factor[:, None] * batch.gradient
        return float(np.mean(losses)), network.backward(cache, dL_dc)

    def train(
        self,
        network: WeightNetwork,
        optimizer: AdamOptimizer,
        schedule: LearningRateSchedule,
        sample_set: SampleSet,
        validation: Optional[SampleSet] = None,
        validation_interval: int = 100,
        stage: int = 0,
        epoch_offset: int = 0,
    ) -> TrainingResult:
        """Full-batch Adam epochs; returns the lowest-loss and the last parameters."""
        best_theta = network.theta.copy()
        best_loss = np.inf
        history: List[LossRecord] = []
        total = schedule.total_epochs

        for epoch in range(total):
            rate = schedule.rate(epoch)
            loss, grad = self.loss_gradient(network, sample_set)
            if loss < best_loss:
                best_loss, best_theta = loss, network.theta.copy()

            val_loss = None
            if validation is not None and len(validation) and epoch % validation_interval == 0:
                val_loss = self.loss(network, validation)
            history.append(
                LossRecord(
                    epoch=epoch_offset + epoch,
                    stage=stage,
                    learning_rate=rate,
                    train_loss=loss,
                    val_loss=val_loss,
                )
            )
            if epoch % settings.log_every == 0:
                logger.info(
                    "Training progress",
                    epoch=epoch_offset + epoch,
                    stage=stage,
                    loss=loss,
                    learning_rate=rate,
                )
            network.set_parameters(optimizer.step(network.theta, grad, rate))

        final_theta = network.theta.copy()
        final_loss = self.loss(network, sample_set)
        if not np.isfinite(final_loss):
            weights, _ = network.forward(sample_set.parameters)
            self._check_finite(
                self.sample_losses(network, sample_set), np.atleast_2d(weights), sample_set
            )
        if final_loss < best_loss:
            best_loss, best_theta = final_loss, final_theta.copy()

        logger.info(
            "Training finished", epochs=total, stage=stage, best_loss=best_loss, final_loss=final_loss
        )
        return TrainingResult(
            best_theta=best_theta,
            final_theta=final_theta,
            ema_theta=optimizer.state.ema.copy(),
            best_loss=float(best_loss),
            final_loss=final_loss,
            history=history,
        )


def label_points(
    points: Sequence[Sequence[float]], label_fn: LabelFunction, threads: Optional[int] = None
) -> List[LabeledSample]:
    """Oracle labels in input order."""
    workers = threads if threads is not None else settings.threads
    points = [np.asarray(p, dtype=float) for p in points]
    if workers <= 1 or len(points) <= 1:
        return [label_fn(p) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(label_fn, points))


def tensor_grid(axes: Sequence[Sequence[float]]) -> np.ndarray:
    return np.array(list(itertools.product(*[np.asarray(a, dtype=float) for a in axes])))


def validation_midpoints(training_points: Sequence[Sequence[float]]) -> np.ndarray:
    """Cell centres of the rectangular grid spanned by the training coordinates."""
    points = np.atleast_2d(np.asarray(training_points, dtype=float))
    midpoints = []
    for axis in range(points.shape[1]):
        coords = np.unique(points[:, axis])
        if coords.size < 2:
            raise InvalidArgumentError(
                f"Need at least two distinct training coordinates on axis {axis}"
            )
        midpoints.append(0.5 * (coords[:-1] + coords[1:]))
    return tensor_grid(midpoints)


def make_validation_midpoints(
    training_points: Sequence[Sequence[float]],
    label_fn: LabelFunction,
    threads: Optional[int] = None,
) -> List[LabeledSample]:
    return label_points(validation_midpoints(training_points), label_fn, threads)


@dataclass(frozen=True)
class ParameterCell:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def split(self) -> List["ParameterCell"]:
        """2^ρ children sharing the centre as a corner."""
        centre = self.center
        children = []
        for corner in itertools.product((0, 1), repeat=len(self.lower)):
            lower = tuple(float(self.lower[d] if c == 0 else centre[d]) for d, c in enumerate(corner))
            upper = tuple(float(centre[d] if c == 0 else self.upper[d]) for d, c in enumerate(corner))
            children.append(ParameterCell(lower, upper))
        return children


@dataclass
class AdaptiveState:
    """Training set plus the leaf cells whose centres form the validation set."""

    training: List[LabeledSample]
    validation: List[LabeledSample]
    cells: List[ParameterCell]
    gamma: float
    stage: int = 0

    @classmethod
    def from_grid(
        cls,
        axes: Sequence[Sequence[float]],
        label_fn: LabelFunction,
        gamma: float,
        threads: Optional[int] = None,
    ) -> "AdaptiveState":
        axes = [np.unique(np.asarray(a, dtype=float)) for a in axes]
        if any(a.size < 2 for a in axes):
            raise InvalidArgumentError("Need at least two distinct training coordinates per axis")
        cells = [
            ParameterCell(tuple(float(lo) for lo in lower), tuple(float(hi) for hi in upper))
            for lower, upper in zip(
                itertools.product(*[a[:-1] for a in axes]),
                itertools.product(*[a[1:] for a in axes]),
            )
        ]
        training = label_points(tensor_grid(axes), label_fn, threads)
        validation = label_points([cell.center for cell in cells], label_fn, threads)
        return cls(training=training, validation=validation, cells=cells, gamma=gamma)

    @property
    def training_points(self) -> np.ndarray:
        return np.array([s.parameter for s in self.training])

    @property
    def validation_points(self) -> np.ndarray:
        return np.array([s.parameter for s in self.validation])


def adapt_stage(
    state: AdaptiveState,
    trainer: TrainingService,
    network: WeightNetwork,
    label_fn: LabelFunction,
    threads: Optional[int] = None,
) -> Tuple[AdaptiveState, StageRecord]:
    """Promote validation points whose loss exceeds γ times the training loss at θ*."""
    train_loss = trainer.loss(network, trainer.prepare(state.training))
    if state.validation:
        val_losses = trainer.sample_losses(network, trainer.prepare(state.validation))
    else:
        val_losses = np.zeros(0)
    promote = val_losses > state.gamma * train_loss

    training = list(state.training)
    validation: List[LabeledSample] = []
    cells: List[ParameterCell] = []
    new_cells: List[ParameterCell] = []
    for sample, cell, promoted in zip(state.validation, state.cells, promote):
        if promoted:
            training.append(sample)
            new_cells.extend(cell.split())
        else:
            validation.append(sample)
            cells.append(cell)
    new_labels = label_points([cell.center for cell in new_cells], label_fn, threads)
    validation.extend(new_labels)
    cells.extend(new_cells)

    promoted_points = [s.parameter for s, p in zip(state.validation, promote) if p]
    training.sort(key=lambda s: s.key)
    order = sorted(range(len(validation)), key=lambda i: validation[i].key)
    updated = AdaptiveState(
        training=training,
        validation=[validation[i] for i in order],
        cells=[cells[i] for i in order],
        gamma=state.gamma,
        stage=state.stage + 1,
    )
    record = StageRecord(
        stage=state.stage,
        n_train=len(updated.training),
        n_val=len(updated.validation),
        train_loss=train_loss,
        promoted=promoted_points,
    )
    logger.info(
        "Adaptive stage finished",
        stage=state.stage,
        train_loss=train_loss,
        promoted=len(promoted_points),
        n_train=record.n_train,
        n_val=record.n_val,
    )
    return updated, record
