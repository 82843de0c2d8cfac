import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.special import expit

from app.core.exceptions import CheckpointError, InvalidArgumentError, StateError

logger = structlog.get_logger(__name__)

CHECKPOINT_VERSION = 1

Activation = Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]


def _tanh_derivative(z: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS: Dict[str, Activation] = {
    "tanh": (np.tanh, _tanh_derivative),
    "softplus": (lambda z: np.logaddexp(0.0, z), expit),
    "identity": (lambda z: z, np.ones_like),
}


@dataclass
class ForwardCache:
    version: int
    inputs: np.ndarray  # after normalization and the fixed input transform
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]


class WeightNetwork:
    """MLP mapping λ to positive patch coefficients c(λ; θ).

    Parameters live in one flat vector ``theta``; the layer matrices are views into it.
    """

    def __init__(
        self,
        dims: Sequence[int],
        lower: Sequence[float],
        upper: Sequence[float],
        theta: Optional[np.ndarray] = None,
        input_activation: str = "tanh",
        hidden_activation: str = "tanh",
        output_activation: str = "softplus",
    ):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise InvalidArgumentError(f"Invalid layer dimensions {list(dims)}")
        if len(lower) != dims[0] or len(upper) != dims[0]:
            raise InvalidArgumentError("Parameter bounds must match the input dimension")
        for name in (input_activation, hidden_activation, output_activation):
            if name not in ACTIVATIONS:
                raise InvalidArgumentError(f"Unknown activation '{name}'")

        self.dims = [int(d) for d in dims]
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.activation_names = (input_activation, hidden_activation, output_activation)
        self.shapes = list(zip(self.dims[:-1], self.dims[1:]))
        self.size = sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.shapes)
        self.version = 0
        self.theta = np.zeros(self.size)
        if theta is not None:
            self.set_parameters(theta)

    @classmethod
    def init(
        cls,
        dims: Sequence[int],
        lower: Sequence[float],
        upper: Sequence[float],
        seed: int,
        **activations: str,
    ) -> "WeightNetwork":
        """Glorot-uniform weights and zero biases drawn from ``seed``."""
        net = cls(dims, lower, upper, **activations)
        rng = np.random.default_rng(seed)
        theta = np.zeros(net.size)
        offset = 0
        for fan_in, fan_out in net.shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            theta[offset : offset + fan_in * fan_out] = rng.uniform(-limit, limit, fan_in * fan_out)
            offset += fan_in * fan_out + fan_out
        net.set_parameters(theta)
        return net

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def set_parameters(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise InvalidArgumentError(f"Expected {self.size} parameters, got {theta.shape}")
        self.theta = theta.copy()
        self.version += 1

    def layers(self, theta: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        theta = self.theta if theta is None else theta
        views = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            weight = theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = theta[offset : offset + fan_out]
            offset += fan_out
            views.append((weight, bias))
        return views

    def normalize(self, parameters: np.ndarray) -> np.ndarray:
        """Affine map of Λ onto [-1, 1]^ρ, clamping points outside Λ."""
        parameters = np.atleast_2d(np.asarray(parameters, dtype=float))
        clamped = np.clip(parameters, self.lower, self.upper)
        if not np.array_equal(clamped, parameters):
            outside = np.any(clamped != parameters, axis=1)
            logger.warning(
                "Parameter outside bounds, clamped",
                lambda_in=parameters[outside][0].tolist(),
                lambda_clamped=clamped[outside][0].tolist(),
            )
        return 2.0 * (clamped - self.lower) / (self.upper - self.lower) - 1.0

    def forward(self, parameters: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """Coefficients for one λ (shape (ρ,)) or a batch (shape (N, ρ))."""
        single = np.ndim(parameters) == 1
        input_fn = ACTIVATIONS[self.activation_names[0]][0]
        hidden_fn = ACTIVATIONS[self.activation_names[1]][0]
        output_fn = ACTIVATIONS[self.activation_names[2]][0]

        inputs = input_fn(self.normalize(parameters))
        pre_activations: List[np.ndarray] = []
        activations: List[np.ndarray] = [inputs]
        layers = self.layers()
        current = inputs
        for index, (weight, bias) in enumerate(layers):
            z = current @ weight + bias
            current = output_fn(z) if index == len(layers) - 1 else hidden_fn(z)
            pre_activations.append(z)
            activations.append(current)

        cache = ForwardCache(
            version=self.version,
            inputs=inputs,
            pre_activations=pre_activations,
            activations=activations,
        )
        return (current[0] if single else current), cache

    def backward(self, cache: ForwardCache, dL_dc: np.ndarray) -> np.ndarray:
        """Reverse-mode gradient of Σ dL_dc · c(λ; θ) with respect to θ."""
        if cache.version != self.version:
            raise StateError("Forward cache is stale: parameters changed since the forward pass")
        hidden_grad = ACTIVATIONS[self.activation_names[1]][1]
        output_grad = ACTIVATIONS[self.activation_names[2]][1]

        layers = self.layers()
        delta = np.atleast_2d(dL_dc) * output_grad(cache.pre_activations[-1])
        pieces: List[np.ndarray] = []
        for index in range(len(layers) - 1, -1, -1):
            weight, _ = layers[index]
            pieces.append(delta.sum(axis=0))
            pieces.append((cache.activations[index].T @ delta).ravel())
            if index > 0:
                delta = (delta @ weight.T) * hidden_grad(cache.pre_activations[index - 1])
        return np.concatenate(pieces[::-1])

    def lipschitz_bound(self) -> float:
        """Upper bound of ‖c(λ) − c(λ')‖ / ‖λ − λ'‖ from layer operator norms."""
        bound = float(np.max(2.0 / (self.upper - self.lower)))
        for weight, _ in self.layers():
            bound *= float(np.linalg.norm(weight, 2))
        return bound


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray
    step: int = 0


@dataclass
class LearningRateSchedule:
    """Ordered (rate, epochs) stages."""

    stages: List[Tuple[float, int]] = field(default_factory=list)

    @property
    def total_epochs(self) -> int:
        return sum(epochs for _, epochs in self.stages)

    def stage_of(self, epoch: int) -> int:
        end = 0
        for index, (_, epochs) in enumerate(self.stages):
            end += epochs
            if epoch < end:
                return index
        raise InvalidArgumentError(f"Epoch {epoch} beyond schedule of {self.total_epochs}")

    def rate(self, epoch: int) -> float:
        return self.stages[self.stage_of(epoch)][0]


class AdamOptimizer:
    def __init__(
        self,
        size: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-16,
        ema_momentum: float = 0.99,
        initial: Optional[np.ndarray] = None,
        clip_norm: Optional[float] = None,
    ):
        if clip_norm is not None and clip_norm <= 0:
            raise InvalidArgumentError(f"Gradient clip norm must be positive, got {clip_norm}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.ema_momentum = ema_momentum
        self.clip_norm = clip_norm
        self.state = AdamState(
            m=np.zeros(size),
            v=np.zeros(size),
            ema=np.zeros(size) if initial is None else np.array(initial, dtype=float),
        )

    def step(self, theta: np.ndarray, grad: np.ndarray, rate: float) -> np.ndarray:
        if theta.shape != grad.shape or theta.shape != self.state.m.shape:
            raise InvalidArgumentError("Parameter, gradient and moment shapes differ")
        if self.clip_norm is not None:
            # global L2 norm capped at clip_norm, direction kept
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
        state = self.state
        state.step += 1
        state.m = self.beta1 * state.m + (1.0 - self.beta1) * grad
        state.v = self.beta2 * state.v + (1.0 - self.beta2) * grad**2
        m_hat = state.m / (1.0 - self.beta1**state.step)
        v_hat = state.v / (1.0 - self.beta2**state.step)
        updated = theta - rate * m_hat / (np.sqrt(v_hat) + self.eps)
        state.ema = self.ema_momentum * state.ema + (1.0 - self.ema_momentum) * updated
        return updated


@dataclass
class Checkpoint:
    network: WeightNetwork
    best_theta: np.ndarray
    final_theta: np.ndarray
    ema_theta: np.ndarray
    problem: str


def save_checkpoint(
    path: Path,
    network: WeightNetwork,
    best_theta: np.ndarray,
    final_theta: np.ndarray,
    ema_theta: np.ndarray,
    problem: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(
            handle,
            format_version=np.array(CHECKPOINT_VERSION),
            dims=np.array(network.dims, dtype=np.int64),
            activations=np.array(network.activation_names),
            lower=network.lower,
            upper=network.upper,
            best_theta=np.asarray(best_theta, dtype=float),
            final_theta=np.asarray(final_theta, dtype=float),
            ema_theta=np.asarray(ema_theta, dtype=float),
            problem=np.array(problem),
        )
    logger.info("Checkpoint saved", path=str(path), parameters=network.size)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"Unsupported checkpoint version {version}")
            activations = [str(a) for a in data["activations"]]
            network = WeightNetwork(
                dims=data["dims"].tolist(),
                lower=data["lower"],
                upper=data["upper"],
                input_activation=activations[0],
                hidden_activation=activations[1],
                output_activation=activations[2],
            )
            best, final, ema = (data[k].copy() for k in ("best_theta", "final_theta", "ema_theta"))
            problem = str(data["problem"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, OSError, EOFError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e

    for name, theta in (("best", best), ("final", final), ("ema", ema)):
        if theta.shape != (network.size,):
            raise CheckpointError(
                f"{name} parameters have shape {theta.shape}, network needs {network.size}"
            )
    network.set_parameters(best)
    return Checkpoint(
        network=network, best_theta=best, final_theta=final, ema_theta=ema, problem=problem
    )
