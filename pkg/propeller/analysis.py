#!/usr/bin/env python3
"""
Propeller Analysis Module
Post-flow verification of the limit map: harmonic residual, degree, image
containment in the propeller region, Equator points on the tube waists,
the Courant-Lebesgue diameter bound and the combined verification report.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import pdist

from .errors import (CourantLebesgueDomainError, DegreeUnreliableError, EquatorPointsError,
                     ResolutionError)
from .flow import Snapshot, tension_field
from .geometry import RegionTag, SurfaceParams, z3_rotate
from .initmap import (MapField, check_equivariance, cylinder_energy, dirichlet_energy,
                      energy_bound)
from .region import ObstructionReport, PropellerRegion, antipodal_obstruction_check

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi
DEGREE_TOLERANCE = 0.1
ANNULUS_SAMPLES = 32
SPHERE_DIAMETER = 2.0


def harmonic_residual(field: MapField) -> float:
    """Sup-norm of the discrete tension field."""
    tau = tension_field(field)
    return float(np.max(np.linalg.norm(tau, axis=1))) if len(tau) else 0.0


def signed_face_areas(field: MapField) -> np.ndarray:
    """Oriented spherical area of each image triangle, in (-2*pi, 2*pi]."""
    u = field.values[field.mesh.faces]
    a, b, c = u[:, 0], u[:, 1], u[:, 2]
    triple = np.einsum("ij,ij->i", a, np.cross(b, c))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


def image_area(field: MapField) -> float:
    """Unsigned spherical area of the image, counted with multiplicity."""
    return float(np.sum(np.abs(signed_face_areas(field))))


@dataclass(frozen=True)
class DegreeReport:
    degree: int
    raw: float
    residual: float

    def __int__(self) -> int:
        return self.degree


def map_degree(field: MapField, tolerance: float = DEGREE_TOLERANCE) -> DegreeReport:
    """Total signed image area over 4*pi, rounded to the nearest integer."""
    areas = signed_face_areas(field)
    raw = float(np.cumsum(areas)[-1] / FOUR_PI) if len(areas) else 0.0
    degree = int(round(raw))
    residual = abs(raw - degree)
    if residual > tolerance:
        raise DegreeUnreliableError(
            f"signed image area gives degree {raw:.4f}, {residual:.3f} from an integer; refine the mesh",
            raw_degree=raw,
        )
    return DegreeReport(degree=degree, raw=raw, residual=residual)


# ---------------------------------------------------------------------------
# Containment
# ---------------------------------------------------------------------------

@dataclass
class ContainmentReport:
    min_margin: float
    vertex_min_margin: float
    midpoint_min_margin: float
    offending_vertices: np.ndarray
    worst_vertex: int
    worst_label: str
    by_region: Dict[str, float] = field(default_factory=dict)

    @property
    def contained(self) -> bool:
        return self.min_margin > 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "min_margin": self.min_margin,
            "vertex_min_margin": self.vertex_min_margin,
            "midpoint_min_margin": self.midpoint_min_margin,
            "offending_vertices": int(len(self.offending_vertices)),
            "worst_vertex": self.worst_vertex,
            "worst_region": self.worst_label,
            **{f"margin[{name}]": value for name, value in self.by_region.items()},
        }


def containment(field: MapField, region: PropellerRegion) -> ContainmentReport:
    """
    Margin of the image inside the region, at vertices and at geodesic
    midpoints of the edge images.
    """
    mesh = field.mesh
    u = field.values
    vertex_margin = np.asarray(region.margin(u))

    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    chord = u[i] + u[j]
    norms = np.linalg.norm(chord, axis=1)
    usable = norms > 1e-12
    if not np.all(usable):
        logger.warning("⚠️  %d edges map to antipodal pairs; their midpoints are skipped",
                       int(np.count_nonzero(~usable)))
    mid_margin = np.full(len(i), np.inf)
    mid_margin[usable] = region.margin(chord[usable] / norms[usable, None])

    edge_bad = mid_margin <= 0.0
    offending = np.union1d(np.flatnonzero(vertex_margin <= 0.0),
                           np.concatenate([i[edge_bad], j[edge_bad]]))

    # spread each edge midpoint to both endpoints for localisation
    per_vertex = vertex_margin.copy()
    np.minimum.at(per_vertex, i, mid_margin)
    np.minimum.at(per_vertex, j, mid_margin)
    worst = int(np.argmin(per_vertex))

    by_region = {}
    for tag in RegionTag:
        mask = mesh.region_tags == int(tag)
        if np.any(mask):
            by_region[tag.name.lower()] = float(np.min(per_vertex[mask]))

    report = ContainmentReport(
        min_margin=float(per_vertex[worst]),
        vertex_min_margin=float(np.min(vertex_margin)),
        midpoint_min_margin=float(np.min(mid_margin)) if len(mid_margin) else float("inf"),
        offending_vertices=offending,
        worst_vertex=worst,
        worst_label=mesh.region_label(worst),
        by_region=by_region,
    )
    logger.info("%s Containment: min margin %.6f at vertex %d (%s), %d offending vertices",
                "✅" if report.contained else "❌", report.min_margin, worst, report.worst_label,
                len(offending))
    return report


# ---------------------------------------------------------------------------
# Equator points on the waists
# ---------------------------------------------------------------------------

@dataclass
class EquatorPointsReport:
    points: List[int]
    images: np.ndarray
    max_abs_z: List[float]
    permutation_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.max_abs_z) < self.tolerance and self.permutation_error < self.tolerance

    def as_dict(self) -> Dict[str, Any]:
        return {
            "points": list(self.points),
            "images": self.images.tolist(),
            "max_abs_z": list(self.max_abs_z),
            "permutation_error": self.permutation_error,
            "passed": self.passed,
        }


def find_equator_points(field: MapField, tol: float = 1e-6) -> EquatorPointsReport:
    """
    Pick p_1 on the first waist loop with image on the Equator, follow its
    orbit p_{i+1} = phi(p_i) and check that the target rotation carries each
    image to the next, cyclically.
    """
    mesh = field.mesh
    loops = mesh.waist_loops
    if not loops:
        raise EquatorPointsError("mesh has no waist loops")
    u = field.values

    heights = [np.abs(u[loop, 2]) for loop in loops]
    first = loops[0][int(np.argmin(heights[0]))]
    if heights[0].min() >= tol:
        raise EquatorPointsError(
            f"no vertex of waist loop 1 maps within {tol:g} of the Equator (closest |z| = {heights[0].min():.3e})"
        )

    points = [int(first)]
    for i in range(1, len(loops)):
        nxt = int(mesh.z3_map[points[-1]])
        if nxt not in set(loops[i].tolist()):
            raise EquatorPointsError(f"rotation does not carry waist loop {i} onto waist loop {i + 1}")
        points.append(nxt)
    for i, p in enumerate(points):
        if abs(u[p, 2]) >= tol:
            raise EquatorPointsError(f"image of p_{i + 1} (vertex {p}) is off the Equator: z = {u[p, 2]:.3e}")

    images = u[points]
    n = len(points)
    moved = z3_rotate(images, 1, mesh.symmetry_order)
    permutation_error = float(np.max(np.linalg.norm(moved - np.roll(images, -1, axis=0), axis=1)))
    report = EquatorPointsReport(points=points, images=images, max_abs_z=[float(h.max()) for h in heights],
                                 permutation_error=permutation_error, tolerance=tol)
    logger.info("%s Equator points %s: max |z| %.2e, cyclic error %.2e over %d tubes",
                "✅" if report.passed else "❌", points, max(report.max_abs_z), permutation_error, n)
    return report


def check_equator_localization(field: MapField, delta: float, tol: float = 1e-6) -> Dict[str, Any]:
    """
    Vertices whose image meets the Equator must lie within intrinsic
    distance ``delta`` of a waist loop.
    """
    mesh = field.mesh
    z = field.values[:, 2]
    on_equator = np.abs(z) < tol
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    crossing = (z[i] * z[j] < 0.0) & ~on_equator[i] & ~on_equator[j]
    on_equator[i[crossing]] = True
    on_equator[j[crossing]] = True

    waist = np.concatenate(mesh.waist_loops) if mesh.waist_loops else np.zeros(0, dtype=np.int64)
    if len(waist) == 0:
        raise EquatorPointsError("mesh has no waist loops")
    dist = dijkstra(mesh.length_graph, directed=False, indices=waist, min_only=True)
    reach = float(np.max(dist[on_equator])) if np.any(on_equator) else 0.0
    return {
        "equator_vertices": int(np.count_nonzero(on_equator)),
        "max_distance_to_waist": reach,
        "delta": delta,
        "passed": bool(reach <= delta),
    }


# ---------------------------------------------------------------------------
# Courant-Lebesgue
# ---------------------------------------------------------------------------

def courant_lebesgue_bound(energy: float, delta: float) -> float:
    """(8*pi*C)^(1/2) * (log 1/delta)^(-1/2)."""
    if not 0.0 < delta < 1.0:
        raise CourantLebesgueDomainError(f"delta must lie in (0, 1), got {delta}")
    if energy < 0.0:
        raise CourantLebesgueDomainError(f"energy must be non-negative, got {energy}")
    return math.sqrt(8.0 * math.pi * energy) / math.sqrt(math.log(1.0 / delta))


@dataclass
class CourantLebesgueReport:
    center: int
    delta: float
    energy: float
    rhs: float
    s_found: Optional[float]
    lhs: float
    radii: np.ndarray
    diameters: np.ndarray

    @property
    def passed(self) -> bool:
        return self.s_found is not None

    @property
    def vacuous(self) -> bool:
        """Bound at or above the chordal diameter of the sphere."""
        return self.rhs >= SPHERE_DIAMETER

    def as_dict(self) -> Dict[str, Any]:
        return {"center": self.center, "delta": self.delta, "energy": self.energy, "rhs": self.rhs,
                "s_found": self.s_found, "lhs": self.lhs, "passed": self.passed, "vacuous": self.vacuous}


def check_courant_lebesgue(field: MapField, center: int, delta: float,
                           energy: Optional[float] = None,
                           samples: int = ANNULUS_SAMPLES) -> CourantLebesgueReport:
    """
    Look for a radius s in (delta, sqrt(delta)) whose intrinsic circle around
    ``center`` has chordal image diameter at most the bound.

    Circles are Dijkstra annuli |d(v) - s| <= h/2 with h the longest edge at
    the center. ``energy`` defaults to E(field).
    """
    if not 0.0 < delta < 1.0:
        raise CourantLebesgueDomainError(f"delta must lie in (0, 1), got {delta}")
    mesh = field.mesh
    C = dirichlet_energy(field) if energy is None else float(energy)
    rhs = courant_lebesgue_bound(C, delta)

    dist = dijkstra(mesh.length_graph, directed=False, indices=int(center))
    incident = (mesh.edges[:, 0] == center) | (mesh.edges[:, 1] == center)
    half_width = 0.5 * float(np.max(mesh.edge_lengths[incident]))

    lo, hi = delta, math.sqrt(delta)
    radii = lo + (hi - lo) * (np.arange(samples) + 0.5) / samples
    diameters = np.full(samples, np.nan)
    for k, s in enumerate(radii):
        ring = np.flatnonzero((np.abs(dist - s) <= half_width) & (dist > 0.0))
        if len(ring) == 0:
            continue
        diameters[k] = float(np.max(pdist(field.values[ring]))) if len(ring) > 1 else 0.0

    if np.all(np.isnan(diameters)):
        raise ResolutionError(
            f"no mesh vertices at intrinsic distance ({lo:.3g}, {hi:.3g}) from vertex {center}; refine the mesh"
        )
    passing = np.flatnonzero(diameters <= rhs)
    s_found = float(radii[passing[0]]) if len(passing) else None
    lhs = float(diameters[passing[0]]) if len(passing) else float(np.nanmin(diameters))
    report = CourantLebesgueReport(center=int(center), delta=delta, energy=C, rhs=rhs, s_found=s_found,
                                   lhs=lhs, radii=radii, diameters=diameters)
    logger.debug("Courant-Lebesgue at %d: lhs %.4e, rhs %.4e, s=%s", center, lhs, rhs, s_found)
    return report


# ---------------------------------------------------------------------------
# Energy constants and the convexity obstruction
# ---------------------------------------------------------------------------

def energy_constants(final: MapField, initial: MapField, params: SurfaceParams) -> Dict[str, Any]:
    """Energies next to the closed forms, with the printed inequalities evaluated."""
    e_final = dirichlet_energy(final)
    e_initial = dirichlet_energy(initial)
    r, R = params.tube_radius, params.tube_half_height
    return {
        "energy_final": e_final,
        "energy_initial": e_initial,
        "energy_bound": energy_bound(params),
        "cylinder_energy": cylinder_energy(params),
        "r2_over_R": r * r / R,
        "initial_below_cylinder_energy": bool(e_initial <= cylinder_energy(params)),
        "initial_below_energy_bound": bool(e_initial <= energy_bound(params)),
        "flow_lowered_energy": bool(e_final <= e_initial),
        "bubble_headroom": FOUR_PI / e_initial if e_initial > 0 else float("inf"),
    }


@dataclass
class ConvexityObstruction:
    non_constant: bool
    harmonic: bool
    contained: bool
    no_closed_geodesic: bool

    @property
    def holds(self) -> bool:
        return self.non_constant and self.harmonic and self.contained and self.no_closed_geodesic

    def statement(self) -> str:
        if self.holds:
            return ("The region contains no closed geodesic yet holds the image of a non-constant "
                    "harmonic map from a closed surface, so it supports no strictly convex function.")
        missing = [name for name, ok in (("non-constant", self.non_constant), ("harmonic", self.harmonic),
                                         ("contained", self.contained),
                                         ("no closed geodesic", self.no_closed_geodesic)) if not ok]
        return "Obstruction not established: " + ", ".join(missing) + " failed."


def convexity_obstruction(field: MapField, containment_report: ContainmentReport,
                          antipodal: ObstructionReport, tension_tol: float) -> ConvexityObstruction:
    spread = float(np.max(np.linalg.norm(field.values - field.values[0], axis=1)))
    return ConvexityObstruction(
        non_constant=spread > 1e-6,
        harmonic=harmonic_residual(field) < tension_tol,
        contained=containment_report.contained,
        no_closed_geodesic=antipodal.passed,
    )


# ---------------------------------------------------------------------------
# Snapshot audit and the verification report
# ---------------------------------------------------------------------------

class SnapshotAudit:
    """Snapshot callback recording degree, margin and equivariance per snapshot."""

    def __init__(self, region: Optional[PropellerRegion] = None):
        self.region = region
        self.rows: List[Dict[str, Any]] = []

    def __call__(self, snapshot: Snapshot):
        try:
            degree = map_degree(snapshot.field).degree
        except DegreeUnreliableError as exc:
            logger.warning("⚠️  Degree unreliable at step %d: %s", snapshot.step, exc)
            degree = None
        self.rows.append({"step": snapshot.step, "t": snapshot.t, "energy": snapshot.energy,
                          "degree": degree, "min_margin": snapshot.min_margin,
                          "equivariance_error": snapshot.equivariance_error})

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["step", "t", "energy", "degree", "min_margin",
                                                "equivariance_error"])

    def degrees_constant(self, expected: int = 0) -> bool:
        return all(row["degree"] == expected for row in self.rows)

    def max_equivariance_error(self) -> float:
        return max((row["equivariance_error"] for row in self.rows), default=0.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: Any = None
    detail: str = ""


@dataclass
class VerificationReport:
    checks: Dict[str, CheckResult] = field(default_factory=dict)
    quantities: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, passed: bool, value: Any = None, detail: str = "") -> CheckResult:
        result = CheckResult(name, bool(passed), value, detail)
        self.checks[name] = result
        return result

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks.values())

    @property
    def failing(self) -> List[str]:
        return [name for name, check in self.checks.items() if not check.passed]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"check": c.name, "passed": c.passed, "value": c.value, "detail": c.detail}
                             for c in self.checks.values()])

    def to_text(self) -> str:
        lines = ["Propeller verification report", "=" * 60]
        for check in self.checks.values():
            mark = "PASS" if check.passed else "FAIL"
            lines.append(f"[{mark}] {check.name}: {check.value}  {check.detail}".rstrip())
        lines.append("-" * 60)
        for key in sorted(self.quantities):
            lines.append(f"{key} = {self.quantities[key]}")
        lines.append("=" * 60)
        lines.append("ALL CHECKS PASSED" if self.passed else "FAILED: " + ", ".join(self.failing))
        return "\n".join(lines) + "\n"


def verify(field: MapField, region: PropellerRegion, params: SurfaceParams,
           initial: Optional[MapField] = None, tension_tol: float = 1e-4,
           equivariance_tol: float = 1e-9, equator_tol: float = 1e-6,
           antipodal: Optional[ObstructionReport] = None) -> VerificationReport:
    """Run every analysis check on a (converged) field and collect pass flags."""
    report = VerificationReport()
    r = params.tube_radius

    residual = harmonic_residual(field)
    report.add("harmonic_residual", residual < tension_tol, residual, f"tol {tension_tol:g}")

    try:
        degree = map_degree(field)
        report.add("degree", degree.degree == 0 and degree.residual < 0.05, degree.degree,
                   f"raw {degree.raw:.3e}")
        report.quantities["degree_residual"] = degree.residual
    except DegreeUnreliableError as exc:
        report.add("degree", False, None, str(exc))
    if initial is not None:
        try:
            start = map_degree(initial).degree
            report.add("degree_initial", start == 0, start)
        except DegreeUnreliableError as exc:
            report.add("degree_initial", False, None, str(exc))

    equivariance = check_equivariance(field)
    report.add("equivariance", equivariance < equivariance_tol, equivariance, f"tol {equivariance_tol:g}")

    contained = containment(field, region)
    report.add("containment", contained.contained, contained.min_margin,
               f"worst at {contained.worst_label}")
    report.quantities.update({f"containment.{k}": v for k, v in contained.as_dict().items()})

    try:
        points = find_equator_points(field, equator_tol)
        report.add("equator_points", points.passed, points.permutation_error,
                   f"p_i = {points.points}")
        centers = points.points
    except EquatorPointsError as exc:
        report.add("equator_points", False, None, str(exc))
        centers = [int(loop[0]) for loop in field.mesh.waist_loops]

    localization = check_equator_localization(field, delta=r, tol=equator_tol)
    report.add("equator_localization", localization["passed"], localization["max_distance_to_waist"],
               f"delta {r:g}")

    delta = r * r
    energy = dirichlet_energy(field)
    for i, center in enumerate(centers):
        try:
            cl = check_courant_lebesgue(field, center, delta, energy=energy)
            detail = f"bound {cl.rhs:.4e}"
            if cl.vacuous:
                detail += f", vacuous (bound >= {SPHERE_DIAMETER:g}, the chordal diameter of the sphere)"
            report.add(f"courant_lebesgue[p{i + 1}]", cl.passed, cl.lhs, detail)
        except ResolutionError as exc:
            report.add(f"courant_lebesgue[p{i + 1}]", False, None, str(exc))

    area = image_area(field)
    report.add("image_area", area < 0.5 * FOUR_PI, area, "image is a proper subset of the sphere")
    report.quantities["image_area_over_energy"] = area / energy if energy > 0 else float("nan")

    if antipodal is None:
        antipodal = antipodal_obstruction_check(region)
    obstruction = convexity_obstruction(field, contained, antipodal, tension_tol)
    report.add("convexity_obstruction", obstruction.holds, None, obstruction.statement())

    if initial is not None:
        report.quantities.update({f"energy.{k}": v for k, v in energy_constants(field, initial, params).items()})
    else:
        report.quantities["energy.energy_final"] = energy

    logger.info("%s Verification: %d checks, %d failing", "✅" if report.passed else "❌",
                len(report.checks), len(report.failing))
    return report
