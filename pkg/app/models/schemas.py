import math
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Provenance(str, Enum):
    ANALYTIC = "analytic"
    REFERENCE_SOLVE = "reference-solve"


class InnerProductKind(str, Enum):
    H1_FULL = "h1"
    H1_SEMI = "h1-semi"
    L2 = "l2"


class EvalWeights(str, Enum):
    RAW = "raw"
    EMA = "ema"


class RefinementStrategy(str, Enum):
    ADAPTIVE = "adaptive"
    UNIFORM = "uniform"


class LabeledSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    parameter: List[float]
    label: float
    provenance: Provenance
    error_estimate: Optional[float] = None

    @field_validator("label")
    @classmethod
    def validate_label(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("Label must be finite")
        return v

    @property
    def key(self) -> tuple:
        return tuple(self.parameter)


class LearningRateStage(BaseModel):
    rate: float = Field(..., gt=0)
    epochs: int = Field(..., ge=0)


class RunConfig(BaseModel):
    """Run settings; unset fields are filled from the problem defaults."""

    problem: str
    seed: int = 0
    hidden_layers: Optional[List[int]] = None
    schedule: Optional[List[LearningRateStage]] = None
    adaptive: Optional[bool] = None
    gamma: Optional[float] = Field(None, gt=0)
    stages: Optional[int] = Field(None, ge=1)
    refinement_steps: Optional[int] = Field(None, ge=1)
    validation_interval: int = Field(100, ge=1)
    test_points: Optional[int] = Field(None, ge=2)
    epsilon0: Optional[float] = Field(None, ge=0)
    output_dir: Optional[Path] = None
    eval_weights: EvalWeights = EvalWeights.RAW
    ema_momentum: float = Field(0.99, ge=0, lt=1)
    clip_norm: Optional[float] = Field(None, gt=0)
    stage_errors: bool = False
    threads: Optional[int] = Field(None, ge=1)

    @field_validator("schedule")
    @classmethod
    def validate_schedule(
        cls, v: Optional[List[LearningRateStage]]
    ) -> Optional[List[LearningRateStage]]:
        if v is not None and not v:
            raise ValueError("Learning-rate schedule must not be empty")
        return v

    @field_validator("hidden_layers")
    @classmethod
    def validate_hidden_layers(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is not None and any(width < 1 for width in v):
            raise ValueError("Hidden layer widths must be positive")
        return v

    @property
    def total_epochs(self) -> int:
        return sum(stage.epochs for stage in self.schedule or [])


class LossRecord(BaseModel):
    epoch: int
    stage: int
    learning_rate: float
    train_loss: float
    val_loss: Optional[float] = None


class StageRecord(BaseModel):
    stage: int
    n_train: int
    n_val: int
    train_loss: float
    promoted: List[List[float]] = []
    max_test_rel_err_pct: Optional[float] = None


class RefinementRecord(BaseModel):
    strategy: RefinementStrategy
    step: int
    n_train: int
    max_rel_err_pct: float
    mean_rel_err_pct: float
    max_abs_err: float


class ProblemSummary(BaseModel):
    name: str
    description: str
    parameter_dim: int
    bounds: List[List[float]]
    n_trial: int
    n_test: int
    n_patches: int
    inner_product: InnerProductKind


class RunMetadata(BaseModel):
    command: str
    config: RunConfig
    library_version: str
    git_hash: str
    eval_weights: EvalWeights
    stages: int
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
