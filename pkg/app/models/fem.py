from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Mapping, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from app.core.exceptions import InvalidArgumentError
from app.models.schemas import InnerProductKind

ParameterMap = Callable[[np.ndarray], float]
LoadCallback = Callable[[np.ndarray], np.ndarray]


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class SpaceFamily(str, Enum):
    P1 = "P1"
    P0 = "P0"


class TermKind(str, Enum):
    STIFFNESS = "stiffness"
    MASS = "mass"
    ADVECTION = "advection"


class LoadKind(str, Enum):
    POINT = "point"
    SOURCE = "source"
    SUBDOMAIN_AVERAGE = "subdomain-average"


class QoIKind(str, Enum):
    POINT = "point"
    AVERAGE = "average"


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box, used for subdomains and averaging regions."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper):
            raise InvalidArgumentError("Box bounds must have equal dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidArgumentError(f"Degenerate box {self.lower} - {self.upper}")

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def measure(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        lower = np.asarray(self.lower) - tol
        upper = np.asarray(self.upper) + tol
        return np.all((points >= lower) & (points <= upper), axis=1)


@dataclass(frozen=True)
class ElementGeometry:
    origin: np.ndarray  # (ne, d) first vertex
    jacobian: np.ndarray  # (ne, d, d) columns are edge vectors
    inverse: np.ndarray  # (ne, d, d)
    measure: np.ndarray  # (ne,)
    barycentric_gradients: np.ndarray  # (ne, d + 1, d)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, d)
    elements: np.ndarray  # (ne, d + 1)
    boundary: np.ndarray  # (nv,) bool
    markers: Mapping[str, np.ndarray]
    bounds: Box

    def __post_init__(self) -> None:
        _freeze(self.vertices)
        _freeze(self.elements)
        _freeze(self.boundary)
        for indices in self.markers.values():
            _freeze(indices)

    @property
    def dimension(self) -> int:
        return int(self.vertices.shape[1])

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_elements(self) -> int:
        return int(self.elements.shape[0])

    @cached_property
    def geometry(self) -> ElementGeometry:
        coords = self.vertices[self.elements]  # (ne, d + 1, d)
        origin = coords[:, 0, :]
        jacobian = np.transpose(coords[:, 1:, :] - origin[:, None, :], (0, 2, 1))
        det = np.linalg.det(jacobian)
        inverse = np.linalg.inv(jacobian)
        measure = np.abs(det) / float(np.prod(np.arange(1, self.dimension + 1)))
        # rows of the inverse Jacobian are the gradients of barycentric coords 1..d
        grads = np.concatenate([-inverse.sum(axis=1, keepdims=True), inverse], axis=1)
        return ElementGeometry(
            origin=_freeze(origin),
            jacobian=_freeze(jacobian),
            inverse=_freeze(inverse),
            measure=_freeze(measure),
            barycentric_gradients=_freeze(grads),
        )

    @cached_property
    def centroids(self) -> np.ndarray:
        return _freeze(self.vertices[self.elements].mean(axis=1))

    def barycentric(self, points: np.ndarray, elements: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``points[i]`` in ``elements[i]``."""
        geo = self.geometry
        local = np.einsum(
            "eij,ej->ei", geo.inverse[elements], points - geo.origin[elements]
        )
        return np.concatenate([1.0 - local.sum(axis=1, keepdims=True), local], axis=1)

    def locate(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Index of an element containing each point, -1 when outside the mesh."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        geo = self.geometry
        local = np.einsum(
            "eij,pej->pei", geo.inverse, points[:, None, :] - geo.origin[None, :, :]
        )
        bary = np.concatenate([1.0 - local.sum(axis=2, keepdims=True), local], axis=2)
        inside = np.all(bary >= -tol, axis=2)
        found = inside.any(axis=1)
        return np.where(found, inside.argmax(axis=1), -1)


@dataclass(frozen=True, eq=False)
class FemSpace:
    mesh: Mesh
    family: SpaceFamily
    constrained: Tuple[str, ...]
    dof_entity: np.ndarray  # vertex (P1) or element (P0) carrying each dof
    entity_dof: np.ndarray  # dof of each vertex/element, -1 when constrained

    def __post_init__(self) -> None:
        _freeze(self.dof_entity)
        _freeze(self.entity_dof)

    @property
    def n_dofs(self) -> int:
        return int(self.dof_entity.shape[0])

    @property
    def degree(self) -> int:
        return 1 if self.family == SpaceFamily.P1 else 0

    @property
    def local_size(self) -> int:
        return self.mesh.dimension + 1 if self.family == SpaceFamily.P1 else 1

    @cached_property
    def element_dofs(self) -> np.ndarray:
        if self.family == SpaceFamily.P1:
            return _freeze(self.entity_dof[self.mesh.elements])
        return _freeze(self.entity_dof[:, None].copy())

    def basis_values(self, points: np.ndarray, elements: np.ndarray) -> np.ndarray:
        """Local basis values at ``points[i]`` inside ``elements[i]``."""
        if self.family == SpaceFamily.P1:
            return self.mesh.barycentric(points, elements)
        return np.ones((len(points), 1))

    def basis_gradients(self, elements: np.ndarray) -> np.ndarray:
        if self.family == SpaceFamily.P1:
            return self.mesh.geometry.barycentric_gradients[elements]
        return np.zeros((len(elements), 1, self.mesh.dimension))


@dataclass(frozen=True, eq=False)
class PatchDecomposition:
    mesh: Mesh
    element_patch: np.ndarray
    n_patches: int

    def __post_init__(self) -> None:
        _freeze(self.element_patch)

    def elements_of(self, patch: int) -> np.ndarray:
        return np.flatnonzero(self.element_patch == patch)


@dataclass(frozen=True, eq=False)
class WeightedGramFamily:
    space: FemSpace
    patches: PatchDecomposition
    kind: InnerProductKind
    matrices: Tuple[sp.csr_matrix, ...]
    flat: sp.csr_matrix  # (m * m, n_a); column l is M^l in row-major order

    @property
    def n_patches(self) -> int:
        return len(self.matrices)

    @property
    def size(self) -> int:
        return self.space.n_dofs

    def unweighted(self) -> sp.csr_matrix:
        total = sp.csr_matrix((self.size, self.size))
        for matrix in self.matrices:
            total = total + matrix
        return total.tocsr()


@dataclass(frozen=True)
class BilinearTerm:
    kind: TermKind
    coefficient: Optional[ParameterMap] = None
    subdomain: Optional[Tuple[Box, ...]] = None
    name: str = ""


@dataclass(frozen=True)
class LoadTerm:
    kind: LoadKind
    coefficient: Optional[ParameterMap] = None
    point: Optional[Tuple[float, ...]] = None
    box: Optional[Box] = None
    value: float = 1.0


@dataclass(frozen=True)
class QoIDescriptor:
    kind: QoIKind
    point: Optional[Tuple[float, ...]] = None
    box: Optional[Box] = None


@dataclass(frozen=True, eq=False)
class AffineParametricSystem:
    """Pre-assembled pieces of B(λ) = B_0 + Σ Φ_l(λ) B_l and ℓ(λ)."""

    trial: FemSpace
    test: FemSpace
    matrices: Tuple[sp.csr_matrix, ...]
    matrix_maps: Tuple[ParameterMap, ...]
    loads: Tuple[np.ndarray, ...]
    load_maps: Tuple[ParameterMap, ...]
    qoi: np.ndarray
    load_callback: Optional[LoadCallback] = None
    labels: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if len(self.matrices) != len(self.matrix_maps) + 1:
            raise InvalidArgumentError("Need one constant matrix plus one per map")
        if self.load_callback is not None and self.loads:
            raise InvalidArgumentError("Affine loads and a load callback are exclusive")
        if self.load_callback is None:
            if not self.loads:
                raise InvalidArgumentError("Either affine loads or a callback needed")
            if len(self.loads) != len(self.load_maps) + 1:
                raise InvalidArgumentError("Need one constant load plus one per map")
        for load in self.loads:
            _freeze(load)
        _freeze(self.qoi)

    @property
    def n(self) -> int:
        return self.trial.n_dofs

    @property
    def m(self) -> int:
        return self.test.n_dofs

    @cached_property
    def _dense_matrices(self) -> np.ndarray:
        return _freeze(np.stack([matrix.toarray() for matrix in self.matrices]))

    def matrix_coefficients(self, parameter: np.ndarray) -> np.ndarray:
        parameter = np.asarray(parameter, dtype=float)
        return np.array([1.0] + [float(phi(parameter)) for phi in self.matrix_maps])

    def load_coefficients(self, parameter: np.ndarray) -> np.ndarray:
        parameter = np.asarray(parameter, dtype=float)
        return np.array([1.0] + [float(psi(parameter)) for psi in self.load_maps])

    def matrix(self, parameter: np.ndarray) -> sp.csr_matrix:
        coefficients = self.matrix_coefficients(parameter)
        total = self.matrices[0] * coefficients[0]
        for coefficient, matrix in zip(coefficients[1:], self.matrices[1:]):
            total = total + coefficient * matrix
        return total.tocsr()

    def dense_matrix(self, parameter: np.ndarray) -> np.ndarray:
        return np.tensordot(
            self.matrix_coefficients(parameter), self._dense_matrices, axes=1
        )

    def load(self, parameter: np.ndarray) -> np.ndarray:
        parameter = np.asarray(parameter, dtype=float)
        if self.load_callback is not None:
            return np.asarray(self.load_callback(parameter), dtype=float)
        coefficients = self.load_coefficients(parameter)
        return np.tensordot(coefficients, np.stack(self.loads), axes=1)

    def matrix_stack(self, parameters: np.ndarray) -> np.ndarray:
        coefficients = np.stack([self.matrix_coefficients(p) for p in parameters])
        return np.einsum("sk,kij->sij", coefficients, self._dense_matrices)

    def load_stack(self, parameters: np.ndarray) -> np.ndarray:
        return np.stack([self.load(p) for p in parameters])
