#!/usr/bin/env python3
"""
Propeller Geometry Module
Sphere arithmetic, the symmetry actions on the target sphere, and the
procedural construction of the genus-2p source surface as a closed,
exactly symmetric triangle mesh with its cotangent operators.

The surface is two unit spheres stacked on the vertical axis and joined by
2p+1 vertical tubes of radius r and height 2R. Every tube leaves its sphere
horizontally through a circular hole on the sphere's equator and bends down
through a quarter-torus collar (bend radius 2r) into the straight part, so
the mirror plane z = 0 cuts each tube through its waist loop.
"""

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import ConvexHull, cKDTree

from .errors import DegenerateProjectionError, MapFieldError, SurfaceConstructionError

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-12
PROJECTION_FLOOR = 1e-12
MIN_TUBE_SEGMENTS = 12
SPHERE_SPACING = 0.7
RING_GROWTH = 1.5
JITTER = 0.15

ArrayLike = Union["SpherePoint", np.ndarray, List[float], Tuple[float, float, float]]


# ---------------------------------------------------------------------------
# Sphere arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpherePoint:
    """A point of the target sphere, stored as a unit vector."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        norm_sq = self.x * self.x + self.y * self.y + self.z * self.z
        if abs(norm_sq - 1.0) > UNIT_TOLERANCE:
            raise MapFieldError(f"({self.x}, {self.y}, {self.z}) is not a unit vector (|q|^2 = {norm_sq!r})")

    @classmethod
    def from_array(cls, vector: np.ndarray) -> "SpherePoint":
        x, y, z = (float(c) for c in np.asarray(vector, dtype=float).reshape(3))
        return cls(x, y, z)

    @classmethod
    def from_longitude(cls, longitude: float, latitude: float = 0.0) -> "SpherePoint":
        c = math.cos(latitude)
        return cls(c * math.cos(longitude), c * math.sin(longitude), math.sin(latitude))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x, self.y, self.z], dtype=dtype or float)

    @property
    def longitude(self) -> float:
        return math.atan2(self.y, self.x)

    @property
    def latitude(self) -> float:
        return math.asin(max(-1.0, min(1.0, self.z)))


NORTH_POLE = SpherePoint(0.0, 0.0, 1.0)
SOUTH_POLE = SpherePoint(0.0, 0.0, -1.0)


def _points(q: ArrayLike) -> np.ndarray:
    return np.asarray(q, dtype=float)


def _like(result: np.ndarray, original: ArrayLike):
    """Return a SpherePoint when the caller passed one, arrays otherwise."""
    if isinstance(original, SpherePoint):
        return SpherePoint.from_array(result)
    return result


def sphere_geodesic_distance(a: ArrayLike, b: ArrayLike):
    """
    Great-circle distance between unit vectors, in [0, pi].

    Evaluated as atan2(|a x b|, a . b), which equals the arccos of the
    clamped inner product but keeps full precision for nearby and for
    nearly antipodal points. Broadcasts over leading dimensions.
    """
    pa, pb = _points(a), _points(b)
    cross = np.cross(pa, pb)
    dist = np.arctan2(np.linalg.norm(cross, axis=-1), np.sum(pa * pb, axis=-1))
    if np.ndim(dist) == 0:
        return float(dist)
    return dist


def project_to_sphere(v: ArrayLike):
    """Radially project nonzero vectors onto the unit sphere."""
    vec = _points(v)
    norms = np.linalg.norm(vec, axis=-1)
    if np.any(norms <= PROJECTION_FLOOR):
        bad = int(np.count_nonzero(norms <= PROJECTION_FLOOR))
        raise DegenerateProjectionError(
            f"degenerate projection: {bad} vector(s) with norm <= {PROJECTION_FLOOR:g}"
        )
    return _like(vec / norms[..., None], v)


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def z3_rotate(q: ArrayLike, k: int = 1, order: int = 3):
    """
    Rotate about the vertical axis by 2*pi*k/order.

    With the default order this is the cyclic action of order three; the
    genus-2p surfaces use order 2p+1. Multiples of the order return the
    input unchanged.
    """
    k = int(k) % int(order)
    pts = _points(q)
    if k == 0:
        return _like(pts.copy(), q)
    rotated = pts @ rotation_about_z(2.0 * math.pi * k / order).T
    return _like(rotated, q)


def z2_reflect(q: ArrayLike):
    """Mirror through the equatorial plane: (x, y, z) -> (x, y, -z)."""
    pts = _points(q).copy()
    pts[..., 2] = -pts[..., 2]
    return _like(pts, q)


def antipode(q: ArrayLike):
    return _like(-_points(q), q)


# ---------------------------------------------------------------------------
# Surface parameters
# ---------------------------------------------------------------------------

class SurfaceParams(BaseModel):
    """Geometry of the source surface and width of the forbidden bands."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tube_radius: float = Field(0.1, gt=0.0, lt=1.0)
    tube_half_height: float = Field(5.0, gt=1.0)
    sphere_gap: Optional[float] = Field(None, gt=0.0)
    epsilon: float = Field(0.05, gt=0.0, lt=math.pi / 12.0)
    genus_parameter: int = Field(1, ge=1)
    resolution: int = Field(2, ge=1)
    tube_segments: Optional[int] = Field(None, ge=3)
    mesh_seed: int = 7

    @property
    def tube_count(self) -> int:
        return 2 * self.genus_parameter + 1

    @property
    def genus(self) -> int:
        return self.tube_count - 1

    @property
    def bend_radius(self) -> float:
        return 2.0 * self.tube_radius

    @property
    def hole_radius(self) -> float:
        """Geodesic radius of the holes cut into each sphere."""
        return math.asin(self.tube_radius)

    @property
    def derived_gap(self) -> float:
        return 2.0 * self.tube_half_height + 2.0 * self.bend_radius - 2.0

    @property
    def segments(self) -> int:
        if self.tube_segments is not None:
            return int(self.tube_segments)
        return 6 * 2 ** self.resolution

    @model_validator(mode="after")
    def _check_layout(self) -> "SurfaceParams":
        n = self.tube_count
        limit = math.pi / (2 * n)
        if self.hole_radius >= limit:
            raise ValueError(
                f"attachment sites overlap: hole radius asin(r) = {self.hole_radius:.6f} must stay "
                f"below pi/(2(2p+1)) = {limit:.6f} for {n} tubes"
            )
        if 2 * n * self.epsilon >= math.pi:
            raise ValueError(
                f"forbidden bands overlap: {n} arcs of length pi/{n} with margins eps = {self.epsilon} "
                f"need 2(2p+1)eps < pi"
            )
        if self.sphere_gap is not None:
            derived = self.derived_gap
            if abs(self.sphere_gap - derived) > 1e-9 * max(1.0, derived):
                raise ValueError(
                    f"sphere_gap = {self.sphere_gap} is inconsistent with tubes of height 2R and "
                    f"bend radius 2r; the construction requires d = 2R + 4r - 2 = {derived:.12g}"
                )
        return self


# ---------------------------------------------------------------------------
# Mesh type and operators
# ---------------------------------------------------------------------------

class RegionTag(IntEnum):
    UPPER_SPHERE = 0
    LOWER_SPHERE = 1
    TUBE = 2
    JUNCTION = 3


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """
    Immutable closed triangle mesh with its symmetry permutations.

    Faces are counterclockwise seen from outside. ``z3_map[v]`` is the vertex
    at the position of ``v`` rotated by 2*pi/symmetry_order about the vertical
    axis and ``z2_map[v]`` the vertex at its mirror image through z = 0.
    Cotangent operators are computed on first use and cached.
    """

    vertices: np.ndarray
    faces: np.ndarray
    z3_map: np.ndarray
    z2_map: np.ndarray
    region_tags: np.ndarray
    tube_index: np.ndarray
    tube_height: np.ndarray
    side: np.ndarray
    waist_loops: Tuple[np.ndarray, ...]
    genus: int
    symmetry_order: int = 3
    params: Optional[SurfaceParams] = None

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    @property
    def tube_count(self) -> int:
        return len(self.waist_loops)

    def region_label(self, vertex: int) -> str:
        tag = RegionTag(int(self.region_tags[vertex]))
        if tag == RegionTag.TUBE:
            return f"tube({int(self.tube_index[vertex]) + 1})"
        return tag.name.lower()

    # --- cached operators -------------------------------------------------

    @cached_property
    def edges(self) -> np.ndarray:
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @cached_property
    def area(self) -> float:
        return float(np.sum(self.face_areas))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        v = self.vertices
        return np.linalg.norm(v[self.edges[:, 0]] - v[self.edges[:, 1]], axis=1)

    @cached_property
    def cotan_weights(self) -> np.ndarray:
        """Half the sum of the cotangents of the angles opposite each edge."""
        v = self.vertices
        n = self.n_vertices
        keys = self.edges[:, 0].astype(np.int64) * n + self.edges[:, 1]
        weights = np.zeros(len(keys))
        f = self.faces
        for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            ia, ib, ic = f[:, a], f[:, b], f[:, c]
            u = v[ia] - v[ic]
            w = v[ib] - v[ic]
            cot = np.sum(u * w, axis=1) / np.linalg.norm(np.cross(u, w), axis=1)
            lo, hi = np.minimum(ia, ib), np.maximum(ia, ib)
            pos = np.searchsorted(keys, lo.astype(np.int64) * n + hi)
            np.add.at(weights, pos, 0.5 * cot)
        return weights

    @cached_property
    def negative_weight_count(self) -> int:
        return int(np.count_nonzero(self.cotan_weights < 0.0))

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Cotangent stiffness matrix L with E(u) = 1/2 tr(u^T L u)."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = self.cotan_weights
        rows = np.concatenate([i, j, i, j])
        cols = np.concatenate([j, i, i, j])
        vals = np.concatenate([-w, -w, w, w])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_vertices, self.n_vertices))

    @cached_property
    def masses(self) -> np.ndarray:
        """Lumped barycentric vertex areas."""
        third = np.repeat(self.face_areas / 3.0, 3)
        return np.bincount(self.faces.ravel(), weights=third, minlength=self.n_vertices)

    @cached_property
    def stable_step(self) -> float:
        """Largest dt with dt * sum_j |w_ij| / m_i <= 1 at every vertex."""
        row = np.zeros(self.n_vertices)
        w = np.abs(self.cotan_weights)
        np.add.at(row, self.edges[:, 0], w)
        np.add.at(row, self.edges[:, 1], w)
        return float(np.min(self.masses / row))

    @cached_property
    def length_graph(self) -> sp.csr_matrix:
        """Symmetric edge-length adjacency for intrinsic (Dijkstra) distances."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        lengths = self.edge_lengths
        return sp.csr_matrix(
            (np.concatenate([lengths, lengths]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n_vertices, self.n_vertices),
        )

    @cached_property
    def two_ring(self) -> sp.csr_matrix:
        """0/1 matrix whose row v marks the closed 2-ring of v."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        ones = np.ones(2 * len(i))
        adj = sp.csr_matrix((ones, (np.concatenate([i, j]), np.concatenate([j, i]))),
                            shape=(self.n_vertices, self.n_vertices))
        one_ring = adj + sp.identity(self.n_vertices, format="csr")
        two = (one_ring @ one_ring).tocsr()
        two.data[:] = 1.0
        return two

    def tag_area(self, tag: RegionTag) -> float:
        """Area of faces touching at least one vertex with ``tag``."""
        hit = np.any(self.region_tags[self.faces] == int(tag), axis=1)
        return float(np.sum(self.face_areas[hit]))

    # --- validation -------------------------------------------------------

    def validate(self) -> "SurfaceMesh":
        """Check every structural invariant; raise naming the first violation."""
        n = self.n_vertices
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3 or f.min() < 0 or f.max() >= n:
            raise SurfaceConstructionError("faces must be index triples into the vertex array")

        if np.min(self.face_areas) <= 1e-14:
            worst = int(np.argmin(self.face_areas))
            raise SurfaceConstructionError(f"degenerate face {worst} with area {self.face_areas[worst]:.3e}")

        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]).astype(np.int64)
        keys = directed[:, 0] * n + directed[:, 1]
        reverse = directed[:, 1] * n + directed[:, 0]
        if len(np.unique(keys)) != len(keys):
            raise SurfaceConstructionError("mesh is not consistently oriented (repeated directed edge)")
        if not np.array_equal(np.sort(keys), np.sort(reverse)):
            raise SurfaceConstructionError("mesh is not closed: some edge is not shared by exactly 2 faces")

        chi = n - len(self.edges) + self.n_faces
        if chi != 2 - 2 * self.genus:
            raise SurfaceConstructionError(
                f"Euler characteristic {chi} does not match genus {self.genus} (expected {2 - 2 * self.genus})"
            )

        identity = np.arange(n)
        for name, perm, order in (("z3_map", self.z3_map, self.symmetry_order), ("z2_map", self.z2_map, 2)):
            if not np.array_equal(np.sort(perm), identity):
                raise SurfaceConstructionError(f"{name} is not a vertex permutation")
            power = identity
            for _ in range(order):
                power = perm[power]
            if not np.array_equal(power, identity):
                raise SurfaceConstructionError(f"{name} does not have order {order}")

        base = _canonical_faces(f)
        if not np.array_equal(_canonical_faces(self.z3_map[f]), base):
            raise SurfaceConstructionError("face set is not invariant under z3_map")
        if not np.array_equal(_canonical_faces(self.z2_map[f][:, ::-1]), base):
            raise SurfaceConstructionError("face set is not invariant under z2_map")

        tubes = self.region_tags == int(RegionTag.TUBE)
        if np.any(tubes) and self.tube_count:
            moved = self.tube_index[self.z3_map[tubes]]
            if not np.array_equal(moved, (self.tube_index[tubes] + 1) % self.tube_count):
                raise SurfaceConstructionError("z3_map does not permute the tubes cyclically")
        upper = self.region_tags == int(RegionTag.UPPER_SPHERE)
        lower = self.region_tags == int(RegionTag.LOWER_SPHERE)
        if not (np.all(lower[self.z2_map[upper]]) and np.all(upper[self.z2_map[lower]])):
            raise SurfaceConstructionError("z2_map does not swap the two spheres")
        for i, loop in enumerate(self.waist_loops):
            if set(self.z2_map[loop].tolist()) != set(loop.tolist()):
                raise SurfaceConstructionError(f"z2_map does not fix waist loop {i + 1}")
        return self


def _canonical_faces(faces: np.ndarray) -> np.ndarray:
    """Rotate each triangle to start at its smallest index, then sort rows."""
    shift = np.argmin(faces, axis=1)
    idx = (np.arange(3)[None, :] + shift[:, None]) % 3
    rolled = np.take_along_axis(faces, idx, axis=1)
    order = np.lexsort(rolled.T[::-1])
    return rolled[order]


def symmetry_residuals(mesh: SurfaceMesh) -> Tuple[float, float]:
    """Positional residuals of the rotation and mirror permutations."""
    v = mesh.vertices
    rotated = v @ rotation_about_z(2.0 * math.pi / mesh.symmetry_order).T
    rot = float(np.max(np.linalg.norm(v[mesh.z3_map] - rotated, axis=1)))
    mirrored = v * np.array([1.0, 1.0, -1.0])
    mir = float(np.max(np.linalg.norm(v[mesh.z2_map] - mirrored, axis=1)))
    return rot, mir


def mesh_symmetry_residual(mesh: SurfaceMesh) -> float:
    """Max displacement between a permuted vertex and the transformed position."""
    return max(symmetry_residuals(mesh))


def match_permutation(points: np.ndarray, targets: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Index of the point coinciding with each target position."""
    dist, idx = cKDTree(points).query(targets)
    if np.max(dist) > tol:
        raise SurfaceConstructionError(f"no vertex within {tol:g} of a transformed position ({np.max(dist):.3e})")
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

class SurfaceBuilder:
    """Builds the genus-2p surface from one symmetry sector."""

    def __init__(self, params: SurfaceParams):
        self.params = params
        self.n = params.tube_count
        self.segments = params.segments
        if self.segments < MIN_TUBE_SEGMENTS:
            raise SurfaceConstructionError(
                f"resolution too coarse: {self.segments} segments around each tube, need >= {MIN_TUBE_SEGMENTS}"
            )
        self.r = params.tube_radius
        self.R = params.tube_half_height
        self.bend = params.bend_radius
        self.hole = params.hole_radius
        self.center = self.R + self.bend
        self.spacing = SPHERE_SPACING / 2 ** params.resolution
        self.phis = 2.0 * math.pi * np.arange(self.segments) / self.segments
        self.theta0 = math.pi / self.n
        self.rng = np.random.default_rng(params.mesh_seed)

        chord = 2.0 * self.r * math.sin(math.pi / self.segments)
        self.tube_rings = max(2, int(math.ceil(self.R / chord)))
        self.elbow_rings = max(2, self.segments // 2)

    # --- frames -----------------------------------------------------------

    def _frame(self, theta: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        e_rho = np.array([math.cos(theta), math.sin(theta), 0.0])
        e_theta = np.array([-math.sin(theta), math.cos(theta), 0.0])
        return e_rho, e_theta, np.array([0.0, 0.0, 1.0])

    def _cap_ring(self, rho: float, phis: np.ndarray) -> np.ndarray:
        """Points at geodesic distance rho from the sector-0 hole center."""
        p, e_theta, e_z = self._frame(self.theta0)
        return (math.cos(rho) * p[None, :]
                + math.sin(rho) * (np.cos(phis)[:, None] * e_z + np.sin(phis)[:, None] * e_theta))

    # --- sphere -----------------------------------------------------------

    def _sector_points(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rim loop and remaining sample points of sector 0 on the unit sphere."""
        rim = self._cap_ring(self.hole, self.phis)

        rings = []
        rho = self.hole
        edge = 2.0 * math.pi * math.sin(self.hole) / self.segments
        rho_max = 0.45 * math.pi / self.n
        ring_no = 0
        while True:
            next_edge = RING_GROWTH * edge
            next_rho = rho + 0.87 * 0.5 * (edge + next_edge)
            if next_edge >= self.spacing or next_rho > rho_max:
                break
            ring_no += 1
            count = max(6, int(round(2.0 * math.pi * math.sin(next_rho) / next_edge)))
            jitter = self.rng.uniform(-JITTER, JITTER, size=(2, count))
            phis = 2.0 * math.pi * (np.arange(count) + 0.5 * (ring_no % 2) + jitter[0]) / count
            radii = next_rho + 0.1 * next_edge * jitter[1]
            p, e_theta, e_z = self._frame(self.theta0)
            rings.append(np.cos(radii)[:, None] * p
                         + np.sin(radii)[:, None] * (np.cos(phis)[:, None] * e_z + np.sin(phis)[:, None] * e_theta))
            rho, edge = next_rho, next_edge
        exclusion = rho + 0.87 * 0.5 * (edge + self.spacing)

        centers = np.stack([self._frame(self.theta0 + 2.0 * math.pi * k / self.n)[0] for k in range(self.n)])
        n_lat = max(3, int(round(math.pi / self.spacing)))
        d_beta = math.pi / n_lat
        grid = []
        for i in range(1, n_lat):
            beta = i * d_beta
            per_sector = max(1, int(round(2.0 * math.pi * math.sin(beta) / (self.spacing * self.n))))
            total = per_sector * self.n
            jitter = self.rng.uniform(-JITTER, JITTER, size=(2, per_sector))
            lon = (self.theta0 - math.pi / self.n
                   + 2.0 * math.pi * (np.arange(per_sector) + 0.5 + 0.25 * (i % 2) + jitter[0]) / total)
            colat = beta + d_beta * jitter[1]
            pts = np.stack([np.sin(colat) * np.cos(lon), np.sin(colat) * np.sin(lon), np.cos(colat)], axis=1)
            near = sphere_geodesic_distance(pts[:, None, :], centers[None, :, :]).min(axis=1) < exclusion
            grid.append(pts[~near])

        others = np.concatenate(rings + grid) if rings or grid else np.zeros((0, 3))
        return rim, others

    def _sphere(self) -> Tuple[np.ndarray, np.ndarray, int]:
        """Unit-sphere vertices, outward faces and the per-sector block size."""
        rim, others = self._sector_points()
        sector = np.concatenate([rim, others])
        block = len(sector)
        pts = [np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])]
        for k in range(self.n):
            pts.append(sector @ rotation_about_z(2.0 * math.pi * k / self.n).T)
        body = np.concatenate(pts)
        apexes = np.stack([self._frame(self.theta0 + 2.0 * math.pi * k / self.n)[0] for k in range(self.n)])
        hull = ConvexHull(np.concatenate([body, apexes]))
        simplices = hull.simplices.astype(np.int64)

        if len(np.unique(simplices)) != len(body) + self.n:
            raise SurfaceConstructionError("sphere sampling left points off the convex hull")
        in_cap = np.any(simplices >= len(body), axis=1)
        if int(np.count_nonzero(in_cap)) != self.n * self.segments:
            raise SurfaceConstructionError("hole caps did not triangulate as fans; lower the tube radius or resolution")
        faces = simplices[~in_cap]
        faces = _orient_outward(body, faces, lambda c: c)
        return body, faces, block

    # --- tubes ------------------------------------------------------------

    def _tube_ring(self, t: float) -> np.ndarray:
        e_rho, e_theta, e_z = self._frame(self.theta0)
        axis = (math.cos(self.hole) + self.bend) * e_rho + t * e_z
        return axis + self.r * (np.cos(self.phis)[:, None] * e_rho + np.sin(self.phis)[:, None] * e_theta)

    def _elbow_ring(self, s: float) -> np.ndarray:
        e_rho, e_theta, e_z = self._frame(self.theta0)
        corner = math.cos(self.hole) * e_rho + self.R * e_z
        normal = math.cos(s) * e_rho + math.sin(s) * e_z
        path = corner + self.bend * normal
        return path + self.r * (np.cos(self.phis)[:, None] * normal + np.sin(self.phis)[:, None] * e_theta)

    def build(self) -> SurfaceMesh:
        n, seg = self.n, self.segments
        logger.info("🧱 Building genus-%d surface: %d tubes, %d segments, %d+%d rings per tube half",
                    self.params.genus, n, seg, self.tube_rings, self.elbow_rings - 1)

        unit, sphere_faces, block = self._sphere()
        n_sphere = len(unit)
        upper_sphere = unit + np.array([0.0, 0.0, self.center])

        elbow0 = np.concatenate([self._elbow_ring(0.5 * math.pi * q / self.elbow_rings)
                                 for q in range(1, self.elbow_rings)])
        tube0 = np.concatenate([self._tube_ring(self.R * q / self.tube_rings)
                                for q in range(1, self.tube_rings + 1)])
        waist0 = self._tube_ring(0.0)
        rotations = [rotation_about_z(2.0 * math.pi * k / n) for k in range(n)]

        elbow_base = n_sphere
        per_elbow = (self.elbow_rings - 1) * seg
        tube_base = elbow_base + n * per_elbow
        per_tube = self.tube_rings * seg
        upper_count = tube_base + n * per_tube
        waist_base = upper_count
        lower_base = waist_base + n * seg
        total = lower_base + upper_count

        upper = np.concatenate([upper_sphere]
                               + [elbow0 @ rot.T for rot in rotations]
                               + [tube0 @ rot.T for rot in rotations])
        waist = np.concatenate([waist0 @ rot.T for rot in rotations])
        waist[:, 2] = 0.0
        vertices = np.concatenate([upper, waist, upper * np.array([1.0, 1.0, -1.0])])

        # ring index arrays from the waist up to the rim, per tube
        faces = [sphere_faces]
        for k in range(n):
            rings = [waist_base + k * seg + np.arange(seg)]
            rings += [tube_base + k * per_tube + q * seg + np.arange(seg) for q in range(self.tube_rings)]
            rings += [elbow_base + k * per_elbow + q * seg + np.arange(seg) for q in range(self.elbow_rings - 1)]
            rings.append(2 + k * block + np.arange(seg))
            strips = np.concatenate([_strip(a, b) for a, b in zip(rings[:-1], rings[1:])])
            faces.append(self._orient_tube_strip(vertices, strips, k))
        upper_faces = np.concatenate(faces)

        mirror = np.arange(total)
        mirror[:upper_count] = np.arange(upper_count) + lower_base
        mirror[lower_base:] = np.arange(upper_count)
        all_faces = np.concatenate([upper_faces, mirror[upper_faces][:, ::-1]])

        z3_upper = np.arange(upper_count)
        sector_ids = np.arange(n * block)
        z3_upper[2:n_sphere] = 2 + (sector_ids + block) % (n * block)
        elbow_ids = np.arange(n * per_elbow)
        z3_upper[elbow_base:tube_base] = elbow_base + (elbow_ids + per_elbow) % (n * per_elbow)
        tube_ids = np.arange(n * per_tube)
        z3_upper[tube_base:upper_count] = tube_base + (tube_ids + per_tube) % (n * per_tube)
        waist_ids = np.arange(n * seg)
        z3_map = np.concatenate([z3_upper, waist_base + (waist_ids + seg) % (n * seg), z3_upper + lower_base])

        tags_upper = np.full(upper_count, int(RegionTag.UPPER_SPHERE), dtype=np.int8)
        rim_mask = np.zeros(n_sphere, dtype=bool)
        for k in range(n):
            rim_mask[2 + k * block: 2 + k * block + seg] = True
        tags_upper[:n_sphere][rim_mask] = int(RegionTag.JUNCTION)
        tags_upper[elbow_base:tube_base] = int(RegionTag.JUNCTION)
        tags_upper[tube_base:] = int(RegionTag.TUBE)
        tags_lower = tags_upper.copy()
        tags_lower[tags_upper == int(RegionTag.UPPER_SPHERE)] = int(RegionTag.LOWER_SPHERE)
        region_tags = np.concatenate([tags_upper, np.full(n * seg, int(RegionTag.TUBE), dtype=np.int8), tags_lower])

        index_upper = np.full(upper_count, -1, dtype=np.int64)
        index_upper[2:n_sphere][np.tile(np.arange(block) < seg, n)] = np.repeat(np.arange(n), seg)
        index_upper[elbow_base:tube_base] = np.repeat(np.arange(n), per_elbow)
        index_upper[tube_base:] = np.repeat(np.arange(n), per_tube)
        tube_index = np.concatenate([index_upper, np.repeat(np.arange(n), seg), index_upper])

        height_upper = np.full(upper_count, np.nan)
        ring_heights = self.R * np.arange(1, self.tube_rings + 1) / self.tube_rings
        height_upper[tube_base:] = np.tile(np.repeat(ring_heights, seg), n)
        tube_height = np.concatenate([height_upper, np.zeros(n * seg), -height_upper])

        side = np.concatenate([np.ones(upper_count, dtype=np.int8), np.zeros(n * seg, dtype=np.int8),
                               -np.ones(upper_count, dtype=np.int8)])
        waist_loops = tuple(waist_base + k * seg + np.arange(seg) for k in range(n))

        mesh = SurfaceMesh(
            vertices=vertices,
            faces=all_faces.astype(np.int64),
            z3_map=z3_map.astype(np.int64),
            z2_map=mirror.astype(np.int64),
            region_tags=region_tags,
            tube_index=tube_index,
            tube_height=tube_height,
            side=side,
            waist_loops=waist_loops,
            genus=self.params.genus,
            symmetry_order=n,
            params=self.params,
        )
        mesh.validate()
        if mesh.negative_weight_count:
            logger.warning("⚠️  %d edges carry negative cotangent weights", mesh.negative_weight_count)
        logger.info("✅ Surface ready: V=%d, F=%d, chi=%d, area=%.6f",
                    mesh.n_vertices, mesh.n_faces, mesh.n_vertices - len(mesh.edges) + mesh.n_faces, mesh.area)
        return mesh

    def _orient_tube_strip(self, vertices: np.ndarray, faces: np.ndarray, k: int) -> np.ndarray:
        """Orient tube and collar triangles away from their centerline."""
        theta = self.theta0 + 2.0 * math.pi * k / self.n
        e_rho, e_theta, e_z = self._frame(theta)
        axis_rho = math.cos(self.hole) + self.bend
        # (rho, z) of the bend circle's center
        corner = np.array([math.cos(self.hole), self.R])

        def outward(centroids: np.ndarray) -> np.ndarray:
            rho = centroids @ e_rho
            z = centroids[:, 2]
            along = centroids @ e_theta
            in_collar = z > self.R
            # straight part: away from the vertical axis
            d_rho = rho - axis_rho
            d_z = np.zeros_like(z)
            # collar: away from the bend circle in the (rho, z) plane
            rel = np.stack([rho - corner[0], z - corner[1]], axis=1)
            norm = np.linalg.norm(rel, axis=1)
            norm[norm == 0.0] = 1.0
            near = rel * (self.bend / norm)[:, None]
            d_rho = np.where(in_collar, rel[:, 0] - near[:, 0], d_rho)
            d_z = np.where(in_collar, rel[:, 1] - near[:, 1], d_z)
            return d_rho[:, None] * e_rho + d_z[:, None] * e_z + along[:, None] * e_theta

        return _orient_outward(vertices, faces, outward)


def _strip(ring_a: np.ndarray, ring_b: np.ndarray) -> np.ndarray:
    """Two triangles per quad between consecutive loops with matching phases."""
    a0, a1 = ring_a, np.roll(ring_a, -1)
    b0, b1 = ring_b, np.roll(ring_b, -1)
    first = np.stack([a0, a1, b1], axis=1)
    second = np.stack([a0, b1, b0], axis=1)
    return np.concatenate([first, second])


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, outward) -> np.ndarray:
    """Flip triangles whose normal points against ``outward(centroid)``."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    centroids = (a + b + c) / 3.0
    flip = np.sum(normals * outward(centroids), axis=1) < 0.0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return faces


def build_surface(params: SurfaceParams) -> SurfaceMesh:
    """Closed genus-2p mesh with exact rotation and mirror permutations."""
    return SurfaceBuilder(params).build()


def build_icosphere(level: int = 2) -> SurfaceMesh:
    """
    Subdivided icosahedron on the unit sphere.

    Used as a source mesh for the identity map. Its mirror permutation is
    exact; the rotation permutation is the identity (symmetry order 1).
    """
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(int(level)):
        pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        pairs.sort(axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        mids = verts[edges[:, 0]] + verts[edges[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        base = len(verts)
        m = base + inverse.reshape(3, -1).T  # midpoints of edges (01, 12, 20)
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate([
            np.stack([a, m[:, 0], m[:, 2]], axis=1),
            np.stack([b, m[:, 1], m[:, 0]], axis=1),
            np.stack([c, m[:, 2], m[:, 1]], axis=1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
        ])
        verts = np.concatenate([verts, mids])

    faces = _orient_outward(verts, faces, lambda c: c)
    n = len(verts)
    mesh = SurfaceMesh(
        vertices=verts,
        faces=faces,
        z3_map=np.arange(n),
        z2_map=match_permutation(verts, verts * np.array([1.0, 1.0, -1.0])),
        region_tags=np.full(n, int(RegionTag.UPPER_SPHERE), dtype=np.int8),
        tube_index=np.full(n, -1, dtype=np.int64),
        tube_height=np.full(n, np.nan),
        side=np.zeros(n, dtype=np.int8),
        waist_loops=(),
        genus=0,
        symmetry_order=1,
    )
    return mesh


def surface_summary(mesh: SurfaceMesh) -> Dict[str, Any]:
    """Counts and areas reported with every build."""
    tube_area = float(np.sum(mesh.face_areas[np.all(mesh.region_tags[mesh.faces] == int(RegionTag.TUBE), axis=1)]))
    junction_area = mesh.tag_area(RegionTag.JUNCTION)
    return {
        "vertices": mesh.n_vertices,
        "faces": mesh.n_faces,
        "edges": int(len(mesh.edges)),
        "euler_characteristic": mesh.n_vertices - int(len(mesh.edges)) + mesh.n_faces,
        "genus": mesh.genus,
        "area": mesh.area,
        "tube_area": tube_area,
        "junction_area": junction_area,
        "junction_slack": junction_area / tube_area if tube_area > 0 else 0.0,
        "negative_cotan_weights": mesh.negative_weight_count,
        "symmetry_residual": mesh_symmetry_residual(mesh),
    }
