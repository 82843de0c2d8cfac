import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import BaseModel

from app.models.fem import Mesh

logger = structlog.get_logger(__name__)

Row = Union[BaseModel, Dict[str, Any]]


def format_value(value: Any) -> str:
    """Shortest text that reads back to the identical float."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return json.dumps(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_csv(path: Path, rows: Iterable[Row], columns: Optional[Sequence[str]] = None) -> Path:
    records: List[Dict[str, Any]] = [
        row.model_dump() if isinstance(row, BaseModel) else dict(row) for row in rows
    ]
    if columns is None:
        columns = list(records[0].keys()) if records else []
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for record in records:
            writer.writerow([format_value(record.get(column)) for column in columns])
    logger.debug("Wrote table", path=str(path), rows=len(records))
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def write_json(path: Path, payload: Union[BaseModel, Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    path.write_text(text + "\n")
    return path


def write_triplets(path: Path, matrix: Union[np.ndarray, sp.spmatrix]) -> Path:
    """``row col value`` per stored entry, zero-based, row-major order."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        handle.write(f"# shape {coo.shape[0]} {coo.shape[1]}\n")
        for k in order:
            handle.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
    return path


def read_triplets(path: Path) -> sp.csr_matrix:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    shape = (int(header[2]), int(header[3]))
    entries = [line.split() for line in lines[1:] if line.strip()]
    rows = np.array([int(e[0]) for e in entries], dtype=int)
    cols = np.array([int(e[1]) for e in entries], dtype=int)
    vals = np.array([float(e[2]) for e in entries])
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def write_vector(path: Path, vector: np.ndarray) -> Path:
    return write_triplets(path, np.asarray(vector, dtype=float).reshape(-1, 1))


def write_mesh(directory: Path, mesh: Mesh, prefix: str = "mesh") -> List[Path]:
    """Vertex listing ``index x [y] boundary`` and element listing ``index v0 v1 [v2]``."""
    directory.mkdir(parents=True, exist_ok=True)
    vertices = directory / f"{prefix}_vertices.txt"
    elements = directory / f"{prefix}_elements.txt"
    with open(vertices, "w") as handle:
        for index, (coords, flag) in enumerate(zip(mesh.vertices, mesh.boundary)):
            text = " ".join(repr(float(x)) for x in coords)
            handle.write(f"{index} {text} {int(flag)}\n")
    with open(elements, "w") as handle:
        for index, cell in enumerate(mesh.elements):
            handle.write(f"{index} {' '.join(str(int(v)) for v in cell)}\n")
    return [vertices, elements]
