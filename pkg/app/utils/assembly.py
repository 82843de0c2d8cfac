"""Exact assembly of Gram families, affine operator pieces, loads and QoI vectors.

All integrands are products of P1/P0 functions on the test mesh, so the degree-2
Gauss rules below integrate them exactly. The trial mesh must be nested in the
test mesh (every test element inside one trial element).
"""
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import structlog

from app.core.exceptions import InvalidArgumentError
from app.models.fem import (
    AffineParametricSystem,
    BilinearTerm,
    Box,
    FemSpace,
    LoadCallback,
    LoadKind,
    LoadTerm,
    Mesh,
    PatchDecomposition,
    QoIDescriptor,
    QoIKind,
    SpaceFamily,
    TermKind,
    WeightedGramFamily,
)
from app.models.schemas import InnerProductKind

logger = structlog.get_logger(__name__)

_SQRT3 = np.sqrt(3.0)

# barycentric points and weights (summing to one) on the reference simplex
QUADRATURE = {
    1: (
        np.array([[0.5 + 0.5 / _SQRT3, 0.5 - 0.5 / _SQRT3], [0.5 - 0.5 / _SQRT3, 0.5 + 0.5 / _SQRT3]]),
        np.array([0.5, 0.5]),
    ),
    2: (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
}


class _ElementData:
    """Basis data of a trial/test pair at the quadrature points of the test mesh."""

    def __init__(self, trial: FemSpace, test: FemSpace):
        mesh = test.mesh
        bary, weights = QUADRATURE[mesh.dimension]
        ne, nq = mesh.n_elements, len(weights)
        coords = mesh.vertices[mesh.elements]

        self.points = np.einsum("qk,ekd->eqd", bary, coords)  # (ne, nq, d)
        self.weights = mesh.geometry.measure[:, None] * weights[None, :]  # (ne, nq)
        self.test_values = self._values(test, np.arange(ne), bary)
        self.test_grads = np.broadcast_to(
            test.basis_gradients(np.arange(ne))[:, None], (ne, nq, test.local_size, mesh.dimension)
        )
        self.host = _host_elements(trial.mesh, mesh)
        flat_points = self.points.reshape(-1, mesh.dimension)
        self.trial_values = trial.basis_values(
            flat_points, np.repeat(self.host, nq)
        ).reshape(ne, nq, trial.local_size)
        self.trial_grads = np.broadcast_to(
            trial.basis_gradients(self.host)[:, None], (ne, nq, trial.local_size, mesh.dimension)
        )
        self.rows = test.element_dofs
        self.cols = trial.element_dofs[self.host]

    @staticmethod
    def _values(space: FemSpace, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        if space.family == SpaceFamily.P1:
            return np.broadcast_to(bary[None], (len(elements),) + bary.shape)
        return np.ones((len(elements), len(bary), 1))

    def local(self, kind: TermKind) -> np.ndarray:
        """Local matrices (ne, n_test_local, n_trial_local) of one term kind."""
        if kind == TermKind.STIFFNESS:
            return np.einsum("eq,eqid,eqjd->eij", self.weights, self.test_grads, self.trial_grads)
        if kind == TermKind.MASS:
            return np.einsum("eq,eqi,eqj->eij", self.weights, self.test_values, self.trial_values)
        if kind == TermKind.ADVECTION:
            return np.einsum(
                "eq,eqi,eqj->eij", self.weights, self.test_values, self.trial_grads[..., 0]
            )
        raise InvalidArgumentError(f"Unknown term kind {kind}")


def _host_elements(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Element of ``coarse`` containing each element of ``fine``."""
    if coarse is fine:
        return np.arange(fine.n_elements)
    if coarse.dimension != fine.dimension:
        raise InvalidArgumentError("Trial and test meshes differ in dimension")
    host = coarse.locate(fine.centroids)
    if np.any(host < 0):
        raise InvalidArgumentError("Test mesh extends outside the trial mesh")
    corners = fine.vertices[fine.elements]  # (ne, d + 1, d)
    for corner in range(corners.shape[1]):
        bary = coarse.barycentric(corners[:, corner, :], host)
        if np.any(bary < -1e-10):
            raise InvalidArgumentError("Trial mesh is not nested in the test mesh")
    return host


def _scatter(
    local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]
) -> sp.csr_matrix:
    r = np.broadcast_to(rows[:, :, None], local.shape)
    c = np.broadcast_to(cols[:, None, :], local.shape)
    keep = (r >= 0) & (c >= 0)
    return sp.coo_matrix((local[keep], (r[keep], c[keep])), shape=shape).tocsr()


def _subdomain_mask(mesh: Mesh, subdomain: Optional[Sequence[Box]]) -> np.ndarray:
    if subdomain is None:
        return np.ones(mesh.n_elements, dtype=bool)
    mask = np.zeros(mesh.n_elements, dtype=bool)
    for box in subdomain:
        mask |= box.contains(mesh.centroids)
    return mask


def _gram_local(data: _ElementData, kind: InnerProductKind) -> np.ndarray:
    if kind == InnerProductKind.H1_FULL:
        return data.local(TermKind.STIFFNESS) + data.local(TermKind.MASS)
    if kind == InnerProductKind.H1_SEMI:
        return data.local(TermKind.STIFFNESS)
    if kind == InnerProductKind.L2:
        return data.local(TermKind.MASS)
    raise InvalidArgumentError(f"Unknown inner product {kind}")


def assemble_gram(test: FemSpace, kind: InnerProductKind) -> sp.csr_matrix:
    """Unweighted Gram matrix of the chosen inner product."""
    data = _ElementData(test, test)
    m = test.n_dofs
    return _scatter(_gram_local(data, kind), data.rows, data.cols, (m, m))


def assemble_gram_family(
    test: FemSpace, patches: PatchDecomposition, kind: InnerProductKind
) -> WeightedGramFamily:
    if patches.mesh is not test.mesh:
        raise InvalidArgumentError("Patch decomposition is defined on a different mesh")

    data = _ElementData(test, test)
    local = _gram_local(data, kind)
    m = test.n_dofs
    matrices: List[sp.csr_matrix] = []
    flat_rows, flat_cols, flat_vals = [], [], []
    for patch in range(patches.n_patches):
        elements = patches.elements_of(patch)
        block = _scatter(local[elements], data.rows[elements], data.cols[elements], (m, m))
        # symmetric by construction; remove rounding asymmetry of the einsum
        block = (0.5 * (block + block.T)).tocsr()
        block.eliminate_zeros()
        matrices.append(block)
        coo = block.tocoo()
        flat_rows.append(coo.row * m + coo.col)
        flat_cols.append(np.full(coo.nnz, patch))
        flat_vals.append(coo.data)

    flat = sp.coo_matrix(
        (np.concatenate(flat_vals), (np.concatenate(flat_rows), np.concatenate(flat_cols))),
        shape=(m * m, patches.n_patches),
    ).tocsr()
    logger.info("Assembled Gram family", m=m, n_patches=patches.n_patches, kind=kind.value)
    return WeightedGramFamily(
        space=test, patches=patches, kind=kind, matrices=tuple(matrices), flat=flat
    )


def _term_matrix(
    data: _ElementData, term: BilinearTerm, test: FemSpace, shape: Tuple[int, int], scale: float = 1.0
) -> sp.csr_matrix:
    if term.kind == TermKind.ADVECTION and test.mesh.dimension != 1:
        raise InvalidArgumentError("Advection terms are one-dimensional")
    mask = _subdomain_mask(test.mesh, term.subdomain)
    local = scale * data.local(term.kind)[mask]
    return _scatter(local, data.rows[mask], data.cols[mask], shape)


def assemble_bilinear(
    trial: FemSpace,
    test: FemSpace,
    terms: Sequence[BilinearTerm],
    parameter: Optional[np.ndarray] = None,
) -> sp.csr_matrix:
    """Direct assembly of B(λ) in one pass, coefficients applied per element."""
    data = _ElementData(trial, test)
    shape = (test.n_dofs, trial.n_dofs)
    total = sp.csr_matrix(shape)
    for term in terms:
        scale = 1.0
        if term.coefficient is not None:
            if parameter is None:
                raise InvalidArgumentError("Parameter needed for parametric terms")
            scale = float(term.coefficient(np.asarray(parameter, dtype=float)))
        total = total + _term_matrix(data, term, test, shape, scale)
    return total.tocsr()


def _point_vector(space: FemSpace, point: Sequence[float]) -> np.ndarray:
    point = np.asarray(point, dtype=float).reshape(1, -1)
    if point.shape[1] != space.mesh.dimension:
        raise InvalidArgumentError("Point dimension does not match the mesh")
    element = space.mesh.locate(point)
    if element[0] < 0:
        raise InvalidArgumentError(f"Point {point.ravel().tolist()} lies outside the domain")
    values = space.basis_values(point, element)[0]
    dofs = space.element_dofs[element[0]]
    vector = np.zeros(space.n_dofs)
    keep = dofs >= 0
    np.add.at(vector, dofs[keep], values[keep])
    return vector


def _clip_polygon(polygon: List[np.ndarray], axis: int, bound: float, upper: bool) -> List[np.ndarray]:
    """Sutherland-Hodgman step against the half-plane x[axis] <= bound (or >=)."""

    def inside(p: np.ndarray) -> bool:
        return p[axis] <= bound if upper else p[axis] >= bound

    clipped: List[np.ndarray] = []
    for index, current in enumerate(polygon):
        previous = polygon[index - 1]
        if inside(current):
            if not inside(previous):
                t = (bound - previous[axis]) / (current[axis] - previous[axis])
                clipped.append(previous + t * (current - previous))
            clipped.append(current)
        elif inside(previous):
            t = (bound - previous[axis]) / (current[axis] - previous[axis])
            clipped.append(previous + t * (current - previous))
    return clipped


def _box_pieces(mesh: Mesh, element: int, box: Box) -> List[Tuple[np.ndarray, float]]:
    """Simplices (as midpoint/centroid, measure) covering element ∩ box."""
    coords = mesh.vertices[mesh.elements[element]]
    if mesh.dimension == 1:
        lo = max(coords[:, 0].min(), box.lower[0])
        hi = min(coords[:, 0].max(), box.upper[0])
        if hi <= lo:
            return []
        return [(np.array([0.5 * (lo + hi)]), hi - lo)]

    polygon = [np.asarray(p, dtype=float) for p in coords]
    for axis in range(2):
        polygon = _clip_polygon(polygon, axis, box.lower[axis], upper=False)
        if not polygon:
            return []
        polygon = _clip_polygon(polygon, axis, box.upper[axis], upper=True)
        if not polygon:
            return []
    pieces = []
    anchor = polygon[0]
    for a, b in zip(polygon[1:-1], polygon[2:]):
        area = 0.5 * abs((a[0] - anchor[0]) * (b[1] - anchor[1]) - (a[1] - anchor[1]) * (b[0] - anchor[0]))
        if area > 0:
            pieces.append(((anchor + a + b) / 3.0, area))
    return pieces


def integrate_over_box(space: FemSpace, box: Box) -> np.ndarray:
    """Exact ∫_box of each basis function, regardless of element boundaries."""
    mesh = space.mesh
    if box.dimension != mesh.dimension:
        raise InvalidArgumentError("Box dimension does not match the mesh")
    coords = mesh.vertices[mesh.elements]
    overlaps = np.all(
        (coords.min(axis=1) < np.asarray(box.upper)) & (coords.max(axis=1) > np.asarray(box.lower)),
        axis=1,
    )
    vector = np.zeros(space.n_dofs)
    for element in np.flatnonzero(overlaps):
        dofs = space.element_dofs[element]
        for centre, measure in _box_pieces(mesh, element, box):
            # basis functions are affine on the element: centroid rule is exact
            values = space.basis_values(centre[None, :], np.array([element]))[0]
            keep = dofs >= 0
            np.add.at(vector, dofs[keep], measure * values[keep])
    return vector


def assemble_load(
    test: FemSpace, loads: Sequence[LoadTerm], parameter: Optional[np.ndarray] = None
) -> np.ndarray:
    vector = np.zeros(test.n_dofs)
    data: Optional[_ElementData] = None
    for load in loads:
        scale = load.value
        if load.coefficient is not None:
            if parameter is None:
                raise InvalidArgumentError("Parameter needed for parametric loads")
            scale *= float(load.coefficient(np.asarray(parameter, dtype=float)))
        if load.kind == LoadKind.POINT:
            if load.point is None:
                raise InvalidArgumentError("Point load needs a location")
            vector += scale * _point_vector(test, load.point)
        elif load.kind == LoadKind.SOURCE:
            data = data or _ElementData(test, test)
            local = np.einsum("eq,eqi->ei", data.weights, data.test_values)
            keep = data.rows >= 0
            np.add.at(vector, data.rows[keep], scale * local[keep])
        elif load.kind == LoadKind.SUBDOMAIN_AVERAGE:
            if load.box is None:
                raise InvalidArgumentError("Subdomain-average load needs a box")
            vector += scale * integrate_over_box(test, load.box) / load.box.measure
        else:
            raise InvalidArgumentError(f"Unknown load kind {load.kind}")
    return vector


def assemble_qoi(trial: FemSpace, qoi: QoIDescriptor) -> np.ndarray:
    if qoi.kind == QoIKind.POINT:
        if qoi.point is None:
            raise InvalidArgumentError("Point QoI needs a location")
        return _point_vector(trial, qoi.point)
    if qoi.kind == QoIKind.AVERAGE:
        if qoi.box is None:
            raise InvalidArgumentError("Average QoI needs a box")
        return integrate_over_box(trial, qoi.box) / qoi.box.measure
    raise InvalidArgumentError(f"Unknown QoI kind {qoi.kind}")


def assemble_affine_system(
    trial: FemSpace,
    test: FemSpace,
    terms: Sequence[BilinearTerm],
    loads: Sequence[LoadTerm],
    qoi: QoIDescriptor,
    load_callback: Optional[LoadCallback] = None,
) -> AffineParametricSystem:
    """Pre-assemble B_0, B_l, ℓ_0, ℓ_l and q; parametric pieces keep unit coefficients."""
    data = _ElementData(trial, test)
    shape = (test.n_dofs, trial.n_dofs)

    constant = sp.csr_matrix(shape)
    matrices: List[sp.csr_matrix] = []
    maps = []
    labels = []
    for term in terms:
        matrix = _term_matrix(data, term, test, shape)
        if term.coefficient is None:
            constant = constant + matrix
        else:
            matrices.append(matrix)
            maps.append(term.coefficient)
            labels.append(term.name or term.kind.value)

    if load_callback is not None and loads:
        raise InvalidArgumentError("Give either load descriptors or a load callback")
    constant_load = np.zeros(test.n_dofs)
    load_vectors: List[np.ndarray] = []
    load_maps = []
    for load in loads:
        if load.coefficient is None:
            constant_load += assemble_load(test, [load])
        else:
            unit = LoadTerm(kind=load.kind, point=load.point, box=load.box, value=load.value)
            load_vectors.append(assemble_load(test, [unit]))
            load_maps.append(load.coefficient)

    system = AffineParametricSystem(
        trial=trial,
        test=test,
        matrices=(constant.tocsr(), *matrices),
        matrix_maps=tuple(maps),
        loads=() if load_callback is not None else (constant_load, *load_vectors),
        load_maps=tuple(load_maps),
        qoi=assemble_qoi(trial, qoi),
        load_callback=load_callback,
        labels=tuple(labels),
    )
    logger.info(
        "Assembled affine system",
        n=system.n,
        m=system.m,
        n_matrix_terms=len(maps),
        n_load_terms=len(load_maps),
        callback_load=load_callback is not None,
    )
    return system


def element_integrals(
    mesh: Mesh,
    integrand_antiderivative: Callable[[np.ndarray, np.ndarray], np.ndarray],
    parameter: np.ndarray,
) -> np.ndarray:
    """∫ over each 1D element via an antiderivative F(x, λ): F(b) - F(a)."""
    if mesh.dimension != 1:
        raise InvalidArgumentError("Antiderivative integration is one-dimensional")
    ends = mesh.vertices[mesh.elements][:, :, 0]
    a, b = ends.min(axis=1), ends.max(axis=1)
    return integrand_antiderivative(b, parameter) - integrand_antiderivative(a, parameter)
