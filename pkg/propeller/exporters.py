#!/usr/bin/env python3
"""
Propeller Exporters Module
Artifact writers: OBJ and legacy VTK meshes through meshio, CSV tables and
the JSON run summary.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import meshio
import numpy as np
import pandas as pd

from .geometry import SurfaceMesh
from .initmap import MapField, vertex_energy_density
from .region import PropellerRegion

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _to_meshio(mesh: SurfaceMesh, point_data: Optional[Dict[str, np.ndarray]] = None) -> meshio.Mesh:
    return meshio.Mesh(
        points=np.asarray(mesh.vertices, dtype=np.float64),
        cells=[("triangle", np.asarray(mesh.faces, dtype=np.int64))],
        point_data=point_data or {},
    )


def write_obj(mesh: SurfaceMesh, path: PathLike) -> Path:
    """Surface mesh as Wavefront OBJ."""
    path = _prepare(path)
    meshio.write(path, _to_meshio(mesh), file_format="obj")
    logger.info("💾 Saved mesh (%d vertices) to %s", mesh.n_vertices, path)
    return path


def write_vtk(mesh: SurfaceMesh, path: PathLike, field: Optional[MapField] = None,
              region: Optional[PropellerRegion] = None) -> Path:
    """
    Legacy ASCII VTK with region tags and tube indices; with a field also the
    image vectors, the energy density and (given a region) the margin.
    """
    path = _prepare(path)
    data: Dict[str, np.ndarray] = {
        "region_tag": mesh.region_tags.astype(np.int32),
        "tube_index": mesh.tube_index.astype(np.int32),
    }
    if field is not None:
        data["u"] = np.asarray(field.values, dtype=np.float64)
        data["energy_density"] = vertex_energy_density(field)
        if region is not None:
            data["margin"] = np.asarray(region.margin(field.values), dtype=np.float64)
    meshio.write(path, _to_meshio(mesh, data), file_format="vtk", binary=False)
    logger.debug("Saved VTK %s", path)
    return path


def read_mesh_points(path: PathLike) -> np.ndarray:
    """Vertex positions of a written mesh file."""
    return np.asarray(meshio.read(path).points, dtype=float)


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_summary(summary: Dict[str, Any], path: PathLike) -> Path:
    """Machine-readable run summary, keys sorted."""
    path = _prepare(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_jsonable)
    logger.info("💾 Saved summary to %s", path)
    return path


def write_text(text: str, path: PathLike) -> Path:
    path = _prepare(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path
