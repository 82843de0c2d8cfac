import threading
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse.linalg as spla
import structlog

from app.core.config import get_settings
from app.core.exceptions import ConfigError, OracleAccuracyError
from app.models.fem import (
    AffineParametricSystem,
    BilinearTerm,
    Box,
    FemSpace,
    LoadKind,
    LoadTerm,
    QoIDescriptor,
    QoIKind,
    TermKind,
    WeightedGramFamily,
)
from app.models.schemas import (
    InnerProductKind,
    LabeledSample,
    ProblemSummary,
    Provenance,
)
from app.utils.assembly import (
    assemble_affine_system,
    assemble_gram_family,
    element_integrals,
)
from app.utils.cache import LabelCache, label_cache
from app.utils.mesh import (
    ALL_BOUNDARY,
    build_crisscross_mesh,
    build_interval_mesh,
    element_patches,
    p0_space,
    p1_space,
)

logger = structlog.get_logger(__name__)
settings = get_settings()

SOURCE_POINT = 0.6
QOI_POINT = 0.7
ADVECTION_QOI_POINT = 0.9
LEFT_HALF = Box((0.0, 0.0), (0.5, 1.0))
RIGHT_HALF = Box((0.5, 0.0), (1.0, 1.0))
AVERAGE_BOX = Box((59 / 64, 39 / 64), (61 / 64, 41 / 64))

Oracle = Callable[[np.ndarray], LabeledSample]


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Assembled offline data of a catalogued problem."""

    name: str
    system: AffineParametricSystem
    family: WeightedGramFamily

    @property
    def trial(self) -> FemSpace:
        return self.system.trial

    @property
    def test(self) -> FemSpace:
        return self.system.test


class AnalyticOracle:
    def __init__(self, name: str, function: Callable[[np.ndarray], float]):
        self.name = name
        self.function = function

    def label(self, parameter: Sequence[float]) -> LabeledSample:
        parameter = np.asarray(parameter, dtype=float)
        return LabeledSample(
            parameter=parameter.tolist(),
            label=float(self.function(parameter)),
            provenance=Provenance.ANALYTIC,
        )

    __call__ = label


class ReferenceOracle:
    """Square conforming solve on a coarse and a once-refined mesh.

    The label is the Richardson extrapolation of both QoI values for a method of
    ``order``. Labels whose estimated error exceeds ``tolerance`` relative to
    ``max(|label|, floor)`` are refused. Labels smaller in magnitude than
    ``zero_below`` are round-off of an exact zero and come back as 0.0.
    """

    def __init__(
        self,
        name: str,
        build_levels: Callable[[], Tuple[AffineParametricSystem, AffineParametricSystem]],
        order: int = 2,
        tolerance: Optional[float] = None,
        floor: float = 0.0,
        zero_below: float = 0.0,
        cache: Optional[LabelCache] = None,
    ):
        self.name = name
        self.build_levels = build_levels
        self.order = order
        self.tolerance = tolerance if tolerance is not None else settings.oracle_tolerance
        self.floor = floor
        self.zero_below = zero_below
        self.cache = cache or label_cache
        self._levels: Optional[
            Tuple[AffineParametricSystem, AffineParametricSystem]
        ] = None
        self._lock = threading.Lock()

    @property
    def levels(self) -> Tuple[AffineParametricSystem, AffineParametricSystem]:
        with self._lock:
            if self._levels is None:
                self._levels = self.build_levels()
                logger.info(
                    "Reference levels assembled",
                    problem=self.name,
                    coarse_dofs=self._levels[0].n,
                    fine_dofs=self._levels[1].n,
                )
            return self._levels

    @staticmethod
    def solve_level(system: AffineParametricSystem, parameter: np.ndarray) -> float:
        matrix = system.matrix(parameter).tocsc()
        solution = spla.spsolve(matrix, system.load(parameter))
        return float(system.qoi @ solution)

    def label(self, parameter: Sequence[float]) -> LabeledSample:
        parameter = np.asarray(parameter, dtype=float)
        key = self.cache.parameter_key(self.name, parameter)
        cached = self.cache.get(key)
        if cached is not None:
            return cached

        coarse, fine = (self.solve_level(level, parameter) for level in self.levels)
        gain = 2**self.order - 1
        value = fine + (fine - coarse) / gain
        estimate = abs(fine - coarse) / gain
        if estimate > self.tolerance * max(abs(value), self.floor):
            raise OracleAccuracyError(
                f"Reference label {value:.6e} at {parameter.tolist()} has estimated "
                f"error {estimate:.3e}, above {self.tolerance:.1e} relative"
            )
        if abs(value) < self.zero_below:
            value = 0.0
        logger.debug(
            "Reference label",
            problem=self.name,
            parameter=parameter.tolist(),
            value=value,
            estimate=estimate,
        )
        sample = LabeledSample(
            parameter=parameter.tolist(),
            label=value,
            provenance=Provenance.REFERENCE_SOLVE,
            error_estimate=estimate,
        )
        self.cache.set(key, sample)
        return sample

    __call__ = label


@dataclass
class ProblemDefinition:
    name: str
    description: str
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    inner_product: InnerProductKind
    build: Callable[[], ProblemInstance]
    oracle: Oracle
    epsilon0: float = 0.0
    training_axes: List[List[float]] = field(default_factory=list)
    defaults: Dict[str, Any] = field(default_factory=dict)

    @property
    def parameter_dim(self) -> int:
        return len(self.lower)


def diffusion_reaction_solution(
    x: np.ndarray, lam: float, x0: float = SOURCE_POINT
) -> np.ndarray:
    """Solution of −u'' + λ²u = δ_{x0}, u(0) = 0, u'(1) = 0, split at the source."""
    x = np.asarray(x, dtype=float)
    k1 = np.cosh(lam * (1.0 - x0)) / (2.0 * lam * np.cosh(lam))
    k2 = np.sinh(lam * x0) * np.exp(-lam) / (2.0 * lam * np.cosh(lam))
    left = k1 * (np.exp(lam * x) - np.exp(-lam * x))
    right = k2 * (np.exp(lam * x) + np.exp(lam * (2.0 - x)))
    return np.where(x <= x0, left, right)


def diffusion_reaction_qoi(lam: float) -> float:
    return float(diffusion_reaction_solution(np.array(QOI_POINT), lam))


def diffusion_reaction_2p_qoi(parameter: np.ndarray) -> float:
    """−α²u'' + β²u = δ is the one-parameter problem at λ = β/α, scaled by 1/α²."""
    alpha, beta = float(parameter[0]), float(parameter[1])
    return diffusion_reaction_qoi(beta / alpha) / alpha**2


def advection_qoi(lam: float) -> float:
    """u(0.9) for u' = (x − λ)₊, u(0) = 0."""
    return 0.5 * max(ADVECTION_QOI_POINT - lam, 0.0) ** 2


def advection_printed_qoi(lam: float) -> float:
    """The (x − λ)² closed form at 0.9; it does not solve u' = (x − λ)₊."""
    return max(ADVECTION_QOI_POINT - lam, 0.0) ** 2


def _ramp_antiderivative(x: np.ndarray, parameter: np.ndarray) -> np.ndarray:
    return 0.5 * np.maximum(x - float(parameter[0]), 0.0) ** 2


def _build_diffusion_reaction(two_parameter: bool) -> ProblemInstance:
    # span{x} is P1 on a single element with u(0) = 0
    trial = p1_space(build_interval_mesh(1), dirichlet=["left"])
    test = p1_space(build_interval_mesh(4), dirichlet=["left"])
    if two_parameter:
        terms = [
            BilinearTerm(
                TermKind.STIFFNESS, coefficient=lambda p: p[0] ** 2, name="alpha^2 stiffness"
            ),
            BilinearTerm(TermKind.MASS, coefficient=lambda p: p[1] ** 2, name="beta^2 mass"),
        ]
    else:
        terms = [
            BilinearTerm(TermKind.STIFFNESS),
            BilinearTerm(TermKind.MASS, coefficient=lambda p: p[0] ** 2, name="lambda^2 mass"),
        ]
    system = assemble_affine_system(
        trial,
        test,
        terms,
        [LoadTerm(LoadKind.POINT, point=(SOURCE_POINT,))],
        QoIDescriptor(QoIKind.POINT, point=(QOI_POINT,)),
    )
    family = assemble_gram_family(
        test, element_patches(test.mesh), InnerProductKind.H1_FULL
    )
    return ProblemInstance("dr2p" if two_parameter else "dr1p", system, family)


def advection_system(n_elems: int, trial_elems: int) -> AffineParametricSystem:
    test_mesh = build_interval_mesh(n_elems)
    trial_mesh = test_mesh if trial_elems == n_elems else build_interval_mesh(trial_elems)
    return assemble_affine_system(
        p1_space(trial_mesh, dirichlet=["left"]),
        p0_space(test_mesh),
        [BilinearTerm(TermKind.ADVECTION)],
        [],
        QoIDescriptor(QoIKind.POINT, point=(ADVECTION_QOI_POINT,)),
        load_callback=partial(element_integrals, test_mesh, _ramp_antiderivative),
    )


def _build_advection() -> ProblemInstance:
    system = advection_system(4, 1)
    family = assemble_gram_family(
        system.test, element_patches(system.test.mesh), InnerProductKind.L2
    )
    return ProblemInstance("adv_rhs", system, family)


def diffusion_2d_system(
    trial_k: int, test_k: int, average_box: Box = AVERAGE_BOX
) -> AffineParametricSystem:
    trial = p1_space(build_crisscross_mesh(trial_k), dirichlet=[ALL_BOUNDARY])
    if test_k == trial_k:
        test = trial
    else:
        test = p1_space(build_crisscross_mesh(test_k), dirichlet=[ALL_BOUNDARY])
    terms = [
        BilinearTerm(
            TermKind.STIFFNESS,
            coefficient=lambda p: p[0],
            subdomain=(LEFT_HALF,),
            name="alpha left",
        ),
        BilinearTerm(
            TermKind.STIFFNESS,
            coefficient=lambda p: p[1],
            subdomain=(RIGHT_HALF,),
            name="beta right",
        ),
    ]
    return assemble_affine_system(
        trial,
        test,
        terms,
        [LoadTerm(LoadKind.SOURCE)],
        QoIDescriptor(QoIKind.AVERAGE, box=average_box),
    )


def _build_diffusion_2d() -> ProblemInstance:
    system = diffusion_2d_system(2, 4)
    family = assemble_gram_family(
        system.test, element_patches(system.test.mesh), InnerProductKind.H1_SEMI
    )
    return ProblemInstance("diff2d", system, family)


def _defaults(epochs: int, **overrides: Any) -> Dict[str, Any]:
    defaults: Dict[str, Any] = {
        "schedule": [{"rate": rate, "epochs": epochs} for rate in (1e-3, 1e-4, 1e-5)],
        "hidden_layers": [10, 10, 10],
        "adaptive": False,
        "gamma": 5.0,
        "stages": 1,
        "refinement_steps": 4,
        "test_points": 500,
    }
    defaults.update(overrides)
    return defaults


def problem_diffusion_reaction_1p() -> ProblemDefinition:
    return ProblemDefinition(
        name="dr1p",
        description="1D diffusion-reaction, point source at 0.6, QoI u(0.7)",
        lower=(1.0,),
        upper=(10.0,),
        inner_product=InnerProductKind.H1_FULL,
        build=partial(_build_diffusion_reaction, False),
        oracle=AnalyticOracle("dr1p", lambda p: diffusion_reaction_qoi(float(p[0]))),
        training_axes=[[float(v) for v in range(1, 11)]],
        defaults=_defaults(10000, adaptive=True, stages=3),
    )


def problem_diffusion_reaction_2p() -> ProblemDefinition:
    return ProblemDefinition(
        name="dr2p",
        description="1D diffusion-reaction with parameters (alpha, beta), QoI u(0.7)",
        lower=(1.0, 1.0),
        upper=(10.0, 10.0),
        inner_product=InnerProductKind.H1_FULL,
        build=partial(_build_diffusion_reaction, True),
        oracle=AnalyticOracle("dr2p", diffusion_reaction_2p_qoi),
        training_axes=[np.linspace(1.0, 10.0, 10).tolist()] * 2,
        defaults=_defaults(15000, test_points=50),
    )


def problem_advection_param_rhs() -> ProblemDefinition:
    return ProblemDefinition(
        name="adv_rhs",
        description="1D advection with ramp source (x - lambda)+, QoI u(0.9)",
        lower=(0.0,),
        upper=(1.0,),
        inner_product=InnerProductKind.L2,
        build=_build_advection,
        oracle=ReferenceOracle(
            "adv_rhs",
            lambda: (advection_system(1000, 1000), advection_system(2000, 2000)),
            floor=1e-6,
            zero_below=1e-14,
        ),
        epsilon0=1e-6,
        training_axes=[np.linspace(0.0, 1.0, 11).tolist()],
        defaults=_defaults(
            10000,
            schedule=[{"rate": 1e-3, "epochs": 20000}, {"rate": 1e-4, "epochs": 10000}],
            clip_norm=1.0,
            stages=6,
            refinement_steps=6,
        ),
    )


def problem_diffusion_2d_2p() -> ProblemDefinition:
    return ProblemDefinition(
        name="diff2d",
        description="2D diffusion, alpha on x < 1/2 and beta on x > 1/2, "
        "QoI average over a small square",
        lower=(1.0, 1.0),
        upper=(10.0, 10.0),
        inner_product=InnerProductKind.H1_SEMI,
        build=_build_diffusion_2d,
        oracle=ReferenceOracle(
            "diff2d",
            lambda: (diffusion_2d_system(64, 64), diffusion_2d_system(128, 128)),
        ),
        training_axes=[[1.0, 5.5, 10.0]] * 2,
        defaults=_defaults(
            10000, adaptive=True, stages=8, refinement_steps=8, test_points=15
        ),
    )


def _catalogue() -> Dict[str, ProblemDefinition]:
    problems = [
        problem_diffusion_reaction_1p(),
        problem_diffusion_reaction_2p(),
        problem_advection_param_rhs(),
        problem_diffusion_2d_2p(),
    ]
    return {problem.name: problem for problem in problems}


class ProblemService:
    def __init__(self):
        self.problems = _catalogue()
        self._instances: Dict[str, ProblemInstance] = {}
        self._lock = threading.Lock()

    @property
    def names(self) -> List[str]:
        return list(self.problems)

    def get(self, name: str) -> ProblemDefinition:
        if name not in self.problems:
            raise ConfigError(
                f"Unknown problem '{name}'. Available problems: {', '.join(self.names)}"
            )
        return self.problems[name]

    def instance(self, name: str) -> ProblemInstance:
        definition = self.get(name)
        with self._lock:
            if name not in self._instances:
                self._instances[name] = definition.build()
            return self._instances[name]

    def label(self, name: str, parameter: Sequence[float]) -> LabeledSample:
        return self.get(name).oracle(np.asarray(parameter, dtype=float))

    def describe(self, name: str) -> ProblemSummary:
        definition = self.get(name)
        instance = self.instance(name)
        return ProblemSummary(
            name=name,
            description=definition.description,
            parameter_dim=definition.parameter_dim,
            bounds=[[lo, hi] for lo, hi in zip(definition.lower, definition.upper)],
            n_trial=instance.system.n,
            n_test=instance.system.m,
            n_patches=instance.family.n_patches,
            inner_product=definition.inner_product,
        )


problem_service = ProblemService()
