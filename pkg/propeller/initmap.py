#!/usr/bin/env python3
"""
Propeller Initial Map Module
Discrete maps from the surface to the sphere, the explicit meridian map u0,
Dirichlet energies and the equivariance measure.
"""

import logging
import math
import weakref
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import MapFieldError
from .geometry import (RegionTag, SurfaceMesh, SurfaceParams, rotation_about_z,
                       sphere_geodesic_distance, surface_summary, z2_reflect)

logger = logging.getLogger(__name__)

_warned_meshes = weakref.WeakSet()


@dataclass(frozen=True, eq=False)
class MapField:
    """Per-vertex unit vectors, one for every vertex of ``mesh``."""

    values: np.ndarray
    mesh: SurfaceMesh

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mesh.n_vertices, 3):
            raise MapFieldError(f"field has shape {values.shape}, mesh needs ({self.mesh.n_vertices}, 3)")
        norms = np.linalg.norm(values, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise MapFieldError(f"value at vertex {worst} is off the sphere (|u| = {norms[worst]!r})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, mesh: SurfaceMesh, point) -> "MapField":
        return cls(np.tile(np.asarray(point, dtype=float), (mesh.n_vertices, 1)), mesh)

    @classmethod
    def identity(cls, mesh: SurfaceMesh) -> "MapField":
        """Vertex positions themselves; valid only on a unit-sphere mesh."""
        return cls(mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True), mesh)

    def with_values(self, values: np.ndarray) -> "MapField":
        return MapField(values, self.mesh)


def meridian(t: np.ndarray, half_height: float) -> np.ndarray:
    """gamma(t) = (sin(pi(t+R)/2R), 0, -cos(pi(t+R)/2R)), from S at -R to N at R."""
    a = math.pi * (np.asarray(t, dtype=float) + half_height) / (2.0 * half_height)
    return np.stack([np.sin(a), np.zeros_like(a), -np.cos(a)], axis=-1)


def build_u0(mesh: SurfaceMesh, params: SurfaceParams) -> MapField:
    """
    Spheres to their poles, tube i along the i-th rotated meridian.

    Upper sphere and upper collars map to N, lower ones to S. A tube vertex
    at height t on tube i maps to psi^i(gamma(t)) with psi the rotation by
    2*pi/(2p+1). Lower-half values are mirrored from the upper half and the
    waists are put exactly on the Equator, so both symmetries hold exactly.
    """
    if mesh.params is not None and mesh.params != params:
        raise MapFieldError("mesh was built from different surface parameters")
    if mesh.tube_count != params.tube_count:
        raise MapFieldError(f"mesh has {mesh.tube_count} tubes, params describe {params.tube_count}")
    if mesh.tube_count == 0:
        raise MapFieldError("u0 needs a mesh with tubes")

    R = params.tube_half_height
    n = params.tube_count
    values = np.zeros((mesh.n_vertices, 3))
    values[mesh.side > 0] = (0.0, 0.0, 1.0)
    values[mesh.side < 0] = (0.0, 0.0, -1.0)

    tube = mesh.region_tags == int(RegionTag.TUBE)
    heights = mesh.tube_height
    if np.any(np.abs(heights[tube]) > R * (1.0 + 1e-12)):
        raise MapFieldError("tube heights exceed the half height of the params")
    profile = meridian(np.abs(heights[tube]), R)
    profile[heights[tube] == 0.0] = (1.0, 0.0, 0.0)
    below = heights[tube] < 0.0
    profile[below] = z2_reflect(profile[below])
    rotations = np.stack([rotation_about_z(2.0 * math.pi * k / n) for k in range(n)])
    values[tube] = np.einsum("vij,vj->vi", rotations[mesh.tube_index[tube]], profile)

    field = MapField(values, mesh)
    logger.info("🧭 Built u0 on %d vertices (%d tube vertices)", mesh.n_vertices, int(np.count_nonzero(tube)))
    return field


def _edge_terms(field: MapField) -> np.ndarray:
    mesh = field.mesh
    if mesh.negative_weight_count and mesh not in _warned_meshes:
        _warned_meshes.add(mesh)
        logger.warning("⚠️  %d obtuse cotangent stencils: edge weights are negative there",
                       mesh.negative_weight_count)
    u = field.values
    d = u[mesh.edges[:, 0]] - u[mesh.edges[:, 1]]
    return mesh.cotan_weights * np.einsum("ij,ij->i", d, d)


def dirichlet_energy(field: MapField, deterministic: bool = True) -> float:
    """
    E(u) = 1/2 sum over edges of w_ij |u_i - u_j|^2 with cotangent weights.

    The deterministic mode accumulates edges left to right in a fixed order.
    """
    terms = _edge_terms(field)
    if terms.size == 0:
        return 0.0
    total = np.cumsum(terms)[-1] if deterministic else np.sum(terms)
    return 0.5 * float(total)


def vertex_energy_density(field: MapField) -> np.ndarray:
    """Per-vertex share of the energy (each edge split between its ends)."""
    terms = 0.25 * _edge_terms(field)
    mesh = field.mesh
    density = np.zeros(mesh.n_vertices)
    np.add.at(density, mesh.edges[:, 0], terms)
    np.add.at(density, mesh.edges[:, 1], terms)
    return density


def energy_bound(params: SurfaceParams) -> float:
    """(2p+1) * pi^3 r^2 / (4R), the closed form quoted for the initial energy."""
    return params.tube_count * math.pi ** 3 * params.tube_radius ** 2 / (4.0 * params.tube_half_height)


def cylinder_energy(params: SurfaceParams) -> float:
    """(2p+1) * pi^3 r / (2R): exact energy of u0 on straight cylinders of area 4*pi*r*R."""
    return params.tube_count * math.pi ** 3 * params.tube_radius / (2.0 * params.tube_half_height)


def junction_slack(mesh: SurfaceMesh) -> float:
    """Junction area as a share of the tube area."""
    return float(surface_summary(mesh)["junction_slack"])


def equivariance_errors(field: MapField) -> Tuple[float, float]:
    """Max geodesic deviations from u(phi v) = psi u(v) and u(sigma v) = sigma u(v)."""
    mesh = field.mesh
    u = field.values
    rotated = u @ rotation_about_z(2.0 * math.pi / mesh.symmetry_order).T
    rot = float(np.max(sphere_geodesic_distance(u[mesh.z3_map], rotated)))
    mir = float(np.max(sphere_geodesic_distance(u[mesh.z2_map], z2_reflect(u))))
    return rot, mir


def check_equivariance(field: MapField) -> float:
    return max(equivariance_errors(field))


def face_differential_norms(field: MapField) -> np.ndarray:
    """Frobenius norm of the differential of the piecewise-linear map on each face."""
    mesh = field.mesh
    x = mesh.vertices[mesh.faces]
    u = field.values[mesh.faces]
    normal = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    double_area = np.linalg.norm(normal, axis=1)
    unit = normal / double_area[:, None]
    grads = []
    for i in range(3):
        opposite = x[:, (i + 2) % 3] - x[:, (i + 1) % 3]
        grads.append(np.cross(unit, opposite) / double_area[:, None])
    grads = np.stack(grads, axis=1)
    du = np.einsum("fik,fil->fkl", u, grads)
    return np.sqrt(np.einsum("fkl,fkl->f", du, du))


def max_differential_norm(field: MapField) -> float:
    return float(np.max(face_differential_norms(field)))


def energy_table(field: MapField, params: SurfaceParams) -> Dict[str, float]:
    """Discrete energy next to both closed forms and the collar slack."""
    energy = dirichlet_energy(field)
    return {
        "energy": energy,
        "energy_bound": energy_bound(params),
        "cylinder_energy": cylinder_energy(params),
        "ratio_to_cylinder": energy / cylinder_energy(params),
        "ratio_to_bound": energy / energy_bound(params),
        "r2_over_R": params.tube_radius ** 2 / params.tube_half_height,
        "junction_slack": junction_slack(field.mesh),
        "max_differential": max_differential_norm(field),
        "differential_limit": math.pi / (2.0 * params.tube_half_height),
    }
