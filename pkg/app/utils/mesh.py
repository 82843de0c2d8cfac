from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.exceptions import InvalidArgumentError
from app.models.fem import Box, FemSpace, Mesh, PatchDecomposition, SpaceFamily

logger = structlog.get_logger(__name__)

ALL_BOUNDARY = "boundary"


def build_interval_mesh(n_elems: int, domain: Tuple[float, float] = (0.0, 1.0)) -> Mesh:
    """Uniform mesh of ``n_elems`` intervals; markers ``left``/``right``/``boundary``."""
    if not isinstance(n_elems, (int, np.integer)) or n_elems < 1:
        raise InvalidArgumentError(f"Number of elements must be positive, got {n_elems}")
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise InvalidArgumentError(f"Empty interval [{a}, {b}]")

    vertices = np.linspace(a, b, n_elems + 1)[:, None]
    elements = np.column_stack([np.arange(n_elems), np.arange(1, n_elems + 1)])
    boundary = np.zeros(n_elems + 1, dtype=bool)
    boundary[[0, -1]] = True

    return Mesh(
        vertices=vertices,
        elements=elements,
        boundary=boundary,
        markers={
            "left": np.array([0]),
            "right": np.array([n_elems]),
            ALL_BOUNDARY: np.array([0, n_elems]),
        },
        bounds=Box((a,), (b,)),
    )


def build_crisscross_mesh(
    k: int, domain: Box = Box((0.0, 0.0), (1.0, 1.0))
) -> Mesh:
    """k x k squares, each cut into four triangles by both diagonals.

    Grid vertex (i, j) has index ``i + j * (k + 1)``; the centre of square (i, j)
    has index ``(k + 1)**2 + i + j * k``.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgumentError(f"Number of squares per side must be positive, got {k}")
    (x0, y0), (x1, y1) = domain.lower, domain.upper

    xs = np.linspace(x0, x1, k + 1)
    ys = np.linspace(y0, y1, k + 1)
    gx, gy = np.meshgrid(xs, ys)
    corners = np.column_stack([gx.ravel(), gy.ravel()])
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]))
    centres = np.column_stack([cx.ravel(), cy.ravel()])
    vertices = np.vstack([corners, centres])

    i, j = np.meshgrid(np.arange(k), np.arange(k))
    i, j = i.ravel(), j.ravel()
    v00 = i + j * (k + 1)
    v10 = v00 + 1
    v01 = v00 + (k + 1)
    v11 = v01 + 1
    c = (k + 1) ** 2 + i + j * k
    # counter-clockwise: bottom, right, top, left
    elements = np.stack(
        [
            np.column_stack([v00, v10, c]),
            np.column_stack([v10, v11, c]),
            np.column_stack([v11, v01, c]),
            np.column_stack([v01, v00, c]),
        ],
        axis=1,
    ).reshape(-1, 3)

    n_corner = (k + 1) ** 2
    gi = np.arange(n_corner) % (k + 1)
    gj = np.arange(n_corner) // (k + 1)
    boundary = np.zeros(len(vertices), dtype=bool)
    boundary[:n_corner] = (gi == 0) | (gi == k) | (gj == 0) | (gj == k)

    markers = {
        "left": np.flatnonzero(boundary[:n_corner] & (gi == 0)),
        "right": np.flatnonzero(boundary[:n_corner] & (gi == k)),
        "bottom": np.flatnonzero(boundary[:n_corner] & (gj == 0)),
        "top": np.flatnonzero(boundary[:n_corner] & (gj == k)),
        ALL_BOUNDARY: np.flatnonzero(boundary),
    }

    mesh = Mesh(
        vertices=vertices, elements=elements, boundary=boundary, markers=markers, bounds=domain
    )
    logger.debug("Built criss-cross mesh", k=k, vertices=mesh.n_vertices, elements=mesh.n_elements)
    return mesh


def p1_space(mesh: Mesh, dirichlet: Iterable[str] = ()) -> FemSpace:
    """Conforming P1 space; vertices under the named markers carry no dof."""
    dirichlet = tuple(dirichlet)
    constrained = np.zeros(mesh.n_vertices, dtype=bool)
    for name in dirichlet:
        if name not in mesh.markers:
            raise InvalidArgumentError(
                f"Unknown boundary marker '{name}', available: {sorted(mesh.markers)}"
            )
        constrained[mesh.markers[name]] = True

    free = np.flatnonzero(~constrained)
    entity_dof = np.full(mesh.n_vertices, -1)
    entity_dof[free] = np.arange(len(free))
    return FemSpace(
        mesh=mesh,
        family=SpaceFamily.P1,
        constrained=dirichlet,
        dof_entity=free,
        entity_dof=entity_dof,
    )


def p0_space(mesh: Mesh) -> FemSpace:
    """Piecewise constants, one dof per element."""
    return FemSpace(
        mesh=mesh,
        family=SpaceFamily.P0,
        constrained=(),
        dof_entity=np.arange(mesh.n_elements),
        entity_dof=np.arange(mesh.n_elements),
    )


def element_patches(mesh: Mesh) -> PatchDecomposition:
    return PatchDecomposition(
        mesh=mesh, element_patch=np.arange(mesh.n_elements), n_patches=mesh.n_elements
    )


def patches_from_labels(
    mesh: Mesh, labels: Sequence[int], n_patches: Optional[int] = None
) -> PatchDecomposition:
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (mesh.n_elements,):
        raise InvalidArgumentError("Need exactly one patch label per element")
    n_patches = int(labels.max()) + 1 if n_patches is None else n_patches
    if labels.min() < 0 or labels.max() >= n_patches:
        raise InvalidArgumentError("Patch labels out of range")
    empty = np.setdiff1d(np.arange(n_patches), labels)
    if empty.size:
        raise InvalidArgumentError(f"Patches without elements: {empty.tolist()}")
    return PatchDecomposition(mesh=mesh, element_patch=labels, n_patches=n_patches)


def box_patches(mesh: Mesh, boxes: Sequence[Box]) -> PatchDecomposition:
    """One patch per box, assigned by element centroid."""
    labels = np.full(mesh.n_elements, -1)
    for index, box in enumerate(boxes):
        hit = box.contains(mesh.centroids) & (labels < 0)
        labels[hit] = index
    if np.any(labels < 0):
        raise InvalidArgumentError("Boxes do not cover every element")
    return patches_from_labels(mesh, labels, n_patches=len(boxes))
