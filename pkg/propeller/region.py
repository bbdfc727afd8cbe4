#!/usr/bin/env python3
"""
Propeller Region Module
The propeller region on the target sphere: the sphere minus eps-bands
around alternating Equator arcs. Membership and distance queries, the
closed-geodesic obstruction checks, and the sweep-out separation checker.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import SampleGraphError
from .geometry import SpherePoint, project_to_sphere, sphere_geodesic_distance

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
ARC_TOLERANCE = 1e-12
CONVEXITY_RADIUS = math.pi / 2.0


def _wrap(angle):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(angle) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class PropellerRegion:
    """
    Sphere minus the open eps-neighbourhoods of the removed Equator arcs.

    The default layout splits the Equator into 2m equal pieces and removes
    every second one, starting at longitude arc_phase + pi/(2m); kept arcs are
    centered at arc_phase + 2*pi*k/m. ``explicit_arcs`` replaces the layout
    with arbitrary (start, end) longitude pairs, end > start.
    """

    epsilon: float
    arc_count: int = 3
    arc_phase: float = 0.0
    explicit_arcs: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.explicit_arcs is None and self.arc_count < 1:
            raise ValueError(f"arc_count must be >= 1, got {self.arc_count}")
        arcs = self.removed_arcs
        if np.any(arcs[:, 1] <= arcs[:, 0]) or np.any(arcs[:, 1] - arcs[:, 0] >= TWO_PI):
            raise ValueError("each removed arc needs start < end and length below 2*pi")
        starts = np.sort(arcs[:, 0] % TWO_PI)
        order = np.argsort(arcs[:, 0] % TWO_PI)
        lengths = (arcs[:, 1] - arcs[:, 0])[order]
        gaps = np.diff(np.append(starts, starts[0] + TWO_PI))
        if np.any(lengths >= gaps):
            raise ValueError("removed arcs must be pairwise disjoint")

    @classmethod
    def from_arcs(cls, epsilon: float, arcs: Sequence[Tuple[float, float]]) -> "PropellerRegion":
        return cls(epsilon=epsilon, arc_count=len(arcs),
                   explicit_arcs=tuple((float(a), float(b)) for a, b in arcs))

    @property
    def removed_arcs(self) -> np.ndarray:
        if self.explicit_arcs is not None:
            return np.array(self.explicit_arcs, dtype=float).reshape(-1, 2)
        m = self.arc_count
        j = np.arange(m)
        start = self.arc_phase + math.pi / (2 * m) + TWO_PI * j / m
        return np.stack([start, start + math.pi / m], axis=1)

    @property
    def arc_midpoints(self) -> np.ndarray:
        return self.removed_arcs.mean(axis=1)

    @property
    def kept_arcs(self) -> np.ndarray:
        """Complementary Equator intervals, as (start, end) with end > start."""
        arcs = self.removed_arcs
        order = np.argsort(arcs[:, 0] % TWO_PI)
        starts = arcs[order, 0] % TWO_PI
        ends = starts + (arcs[order, 1] - arcs[order, 0])
        nxt = np.append(starts[1:], starts[0] + TWO_PI)
        return np.stack([ends, nxt], axis=1)

    def removed_midpoint(self, i: int) -> SpherePoint:
        return SpherePoint.from_longitude(float(self.arc_midpoints[i]))

    def kept_midpoint(self, i: int) -> SpherePoint:
        return SpherePoint.from_longitude(float(self.kept_arcs[i].mean()))

    # --- queries ------------------------------------------------------------

    def distance_to_forbidden(self, q):
        """
        Geodesic distance from q to the closest removed arc.

        The nearest arc point sits on the Equator at the arc longitude closest
        to q's longitude, so the distance follows from q's height and its
        longitude offset to that point.
        """
        pts = np.asarray(q, dtype=float)
        flat = pts.reshape(-1, 3)
        x, y, z = flat[:, 0], flat[:, 1], flat[:, 2]
        rho = np.hypot(x, y)
        lon = np.arctan2(y, x)
        arcs = self.removed_arcs
        mid = arcs.mean(axis=1)
        half = 0.5 * (arcs[:, 1] - arcs[:, 0])
        offset = _wrap(lon[:, None] - mid[None, :])
        delta = offset - np.clip(offset, -half[None, :], half[None, :])
        dist = np.arctan2(np.sqrt(z[:, None] ** 2 + (rho[:, None] * np.sin(delta)) ** 2),
                          rho[:, None] * np.cos(delta))
        best = dist.min(axis=1)
        if pts.ndim == 1:
            return float(best[0])
        return best.reshape(pts.shape[:-1])

    def contains(self, q):
        """Closed region: distance to every removed arc at least eps."""
        d = self.distance_to_forbidden(q)
        if np.ndim(d) == 0:
            return bool(d >= self.epsilon)
        return d >= self.epsilon

    def margin(self, q):
        return np.asarray(self.distance_to_forbidden(q)) - self.epsilon

    def on_removed_arc(self, longitudes: np.ndarray, tol: float = ARC_TOLERANCE) -> np.ndarray:
        """Whether Equator points at these longitudes lie on a closed removed arc."""
        lon = np.asarray(longitudes, dtype=float)
        arcs = self.removed_arcs
        mid = arcs.mean(axis=1)
        half = 0.5 * (arcs[:, 1] - arcs[:, 0])
        offset = np.abs(_wrap(lon[..., None] - mid))
        return np.any(offset <= half + tol, axis=-1)


# ---------------------------------------------------------------------------
# Closed-geodesic obstruction
# ---------------------------------------------------------------------------

@dataclass
class ObstructionReport:
    passed: bool
    n_samples: int
    witnesses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    min_penetration: float = float("nan")

    def as_dict(self):
        return {
            "passed": self.passed,
            "n_samples": self.n_samples,
            "witnesses": int(len(self.witnesses)),
            "min_penetration": self.min_penetration,
        }


def sample_kept_longitudes(region: PropellerRegion, n_samples: int, seed: int = 0) -> np.ndarray:
    """Uniform longitudes on the open kept part of the Equator."""
    rng = np.random.default_rng(seed)
    kept = region.kept_arcs
    lengths = kept[:, 1] - kept[:, 0]
    which = rng.choice(len(kept), size=n_samples, p=lengths / lengths.sum())
    u = rng.uniform(0.0, 1.0, size=n_samples)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return kept[which, 0] + u * lengths[which]


def antipodal_obstruction_check(region: PropellerRegion, n_samples: int = 10_000, seed: int = 0,
                                longitudes: Optional[np.ndarray] = None) -> ObstructionReport:
    """
    Every point of the kept Equator must have its antipode on a removed arc.

    A great circle meets the Equator in antipodal pairs, so this shows no
    great circle avoids the forbidden set. ``longitudes`` overrides sampling.
    """
    if longitudes is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        longitudes = sample_kept_longitudes(region, n_samples, seed)
    longitudes = np.atleast_1d(np.asarray(longitudes, dtype=float))
    hit = region.on_removed_arc(longitudes + math.pi)
    witnesses = longitudes[~hit]
    report = ObstructionReport(passed=bool(np.all(hit)), n_samples=len(longitudes), witnesses=witnesses)
    if report.passed:
        logger.info("✅ Antipodal check: %d kept Equator samples, all antipodes removed", len(longitudes))
    else:
        logger.warning("❌ Antipodal check: %d of %d antipodes land on kept arcs", len(witnesses), len(longitudes))
    return report


def great_circle_normals(n_circles: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return project_to_sphere(rng.normal(size=(n_circles, 3)))


def _trace_chunk(region: PropellerRegion, normals: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Deepest penetration eps - min distance along each traced circle."""
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    e1 = np.cross(normals, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normals, e1)
    c, s = np.cos(angles), np.sin(angles)
    pts = c[None, :, None] * e1[:, None, :] + s[None, :, None] * e2[:, None, :]
    dist = region.distance_to_forbidden(pts)
    return region.epsilon - dist.min(axis=1)


def great_circle_obstruction_check(region: PropellerRegion, n_circles: int = 10_000, seed: int = 0,
                                   normals: Optional[np.ndarray] = None, step: float = 1e-3,
                                   workers: int = 1, chunk: int = 64) -> ObstructionReport:
    """
    Trace great circles and require each to enter the forbidden bands.

    The reported ``min_penetration`` is the smallest, over circles, of the
    deepest excursion into a band (eps minus the minimum distance); the
    check passes when it is positive.
    """
    if normals is None:
        if n_circles < 1:
            raise ValueError("n_circles must be >= 1")
        normals = great_circle_normals(n_circles, seed)
    normals = project_to_sphere(np.atleast_2d(np.asarray(normals, dtype=float)))
    n_points = int(math.ceil(TWO_PI / step))
    angles = TWO_PI * np.arange(n_points) / n_points
    chunks = [normals[i:i + chunk] for i in range(0, len(normals), chunk)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda block: _trace_chunk(region, block, angles), chunks))
    else:
        parts = [_trace_chunk(region, block, angles) for block in chunks]
    penetration = np.concatenate(parts)

    missed = np.flatnonzero(penetration <= 0.0)
    report = ObstructionReport(
        passed=len(missed) == 0,
        n_samples=len(normals),
        witnesses=normals[missed],
        min_penetration=float(penetration.min()),
    )
    logger.info("%s Great-circle check: %d circles, min penetration %.6f",
                "✅" if report.passed else "❌", len(normals), report.min_penetration)
    return report


# ---------------------------------------------------------------------------
# Sweep-out separation
# ---------------------------------------------------------------------------

@dataclass
class SampleGraph:
    """Sample points of a region with a symmetric neighbourhood adjacency."""

    points: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def edges(self) -> np.ndarray:
        upper = sp.triu(self.adjacency, k=1).tocoo()
        return np.stack([upper.row, upper.col], axis=1)


@dataclass
class SweepoutReport:
    passed: bool
    failing_index: Optional[int]
    checked: List[int]
    skipped: List[int]
    component_counts: List[int]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"index": self.checked, "components": self.component_counts})


def tube_region_mask(points: np.ndarray, curve: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Whether each point lies in the union of balls B(curve[t], radii[t])."""
    inside = np.zeros(len(points), dtype=bool)
    for center, radius in zip(curve, radii):
        inside |= sphere_geodesic_distance(points, center) < radius
    return inside


def sample_tube_region(curve, radii, n_samples: int = 10_000, seed: int = 0,
                       batch: int = 50_000) -> np.ndarray:
    """Uniform samples of the union of balls around the curve points."""
    curve = np.asarray(curve, dtype=float)
    radii = np.asarray(radii, dtype=float)
    rng = np.random.default_rng(seed)
    found = []
    total = 0
    while total < n_samples:
        cand = project_to_sphere(rng.normal(size=(batch, 3)))
        keep = cand[tube_region_mask(cand, curve, radii)]
        found.append(keep)
        total += len(keep)
    return np.concatenate(found)[:n_samples]


def knn_graph(points: np.ndarray, k: int = 8) -> SampleGraph:
    """Symmetrised k-nearest-neighbour graph (chordal distances)."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    rows = np.repeat(np.arange(len(points)), k)
    cols = idx[:, 1:].ravel()
    data = np.ones(len(rows), dtype=bool)
    adj = sp.csr_matrix((data, (rows, cols)), shape=(len(points), len(points)))
    adj = (adj + adj.T).astype(bool).tocsr()
    return SampleGraph(points=np.asarray(points, dtype=float), adjacency=adj)


def _chord_points(points: np.ndarray, edges: np.ndarray, count: int) -> np.ndarray:
    s = np.arange(1, count + 1) / (count + 1)
    a, b = points[edges[:, 0]], points[edges[:, 1]]
    mixed = (1.0 - s)[None, :, None] * a[:, None, :] + s[None, :, None] * b[:, None, :]
    return project_to_sphere(mixed)


def _components(n: int, edges: np.ndarray, keep_vertices: np.ndarray) -> Tuple[int, np.ndarray]:
    graph = sp.csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    sub = graph[keep_vertices][:, keep_vertices]
    return connected_components(sub, directed=False)


def check_sweepout_separation(samples: SampleGraph, curve, radii, min_component_size: int = 3,
                              chord_checks: int = 5) -> SweepoutReport:
    """
    Removing any ball B(curve[t0], radii[t0]) must split the region in two.

    For each interior index the sample points inside the ball are removed,
    together with graph edges whose chord passes through the ball; the
    remainder must have exactly two components (ignoring debris smaller than
    ``min_component_size``), one reaching each end of the curve. Indices whose
    ball swallows an endpoint cannot separate and are skipped.
    """
    curve = np.asarray(curve, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if len(curve) < 3 or len(curve) != len(radii):
        raise SampleGraphError(f"need at least 3 curve points with one radius each, got {len(curve)}/{len(radii)}")
    if np.any(radii >= CONVEXITY_RADIUS):
        raise SampleGraphError(f"radii must stay below the convexity radius pi/2 of the unit sphere "
                               f"(max radius {radii.max():.6f})")

    points = samples.points
    n = len(points)
    edges = samples.edges
    chords = _chord_points(points, edges, chord_checks)
    chord_inside = tube_region_mask(chords.reshape(-1, 3), curve, radii).reshape(len(edges), chord_checks)
    edges = edges[np.all(chord_inside, axis=1)]
    chords = chords[np.all(chord_inside, axis=1)]

    everyone = np.ones(n, dtype=bool)
    count, labels = _components(n, edges, everyone)
    sizes = np.bincount(labels)
    if np.count_nonzero(sizes >= min_component_size) != 1:
        raise SampleGraphError(f"sample graph is disconnected ({np.count_nonzero(sizes >= min_component_size)} "
                               f"components); add samples or neighbours")

    checked, skipped, counts = [], [], []
    failing = None
    for t0 in range(1, len(curve) - 1):
        center, radius = curve[t0], radii[t0]
        if (sphere_geodesic_distance(curve[0], center) < radius
                or sphere_geodesic_distance(curve[-1], center) < radius):
            skipped.append(t0)
            continue
        keep = sphere_geodesic_distance(points, center) >= radius
        blocked = np.any(sphere_geodesic_distance(chords, center) < radius, axis=1)
        live = edges[~blocked]
        live = live[keep[live[:, 0]] & keep[live[:, 1]]]
        idx = np.flatnonzero(keep)
        remap = np.full(n, -1)
        remap[idx] = np.arange(len(idx))
        sub_edges = remap[live]
        _, labels = _components(len(idx), sub_edges, np.ones(len(idx), dtype=bool))
        sizes = np.bincount(labels, minlength=1)
        big = np.flatnonzero(sizes >= min_component_size)

        ok = len(big) == 2
        if ok:
            kept_points = points[idx]
            near_a = int(np.argmin(sphere_geodesic_distance(kept_points, curve[0])))
            near_b = int(np.argmin(sphere_geodesic_distance(kept_points, curve[-1])))
            ok = labels[near_a] != labels[near_b] and {labels[near_a], labels[near_b]} == set(big.tolist())
        checked.append(t0)
        counts.append(int(len(big)))
        if not ok and failing is None:
            failing = t0

    if not checked:
        raise SampleGraphError("every interior ball contains a curve endpoint; shrink the radii")
    report = SweepoutReport(passed=failing is None, failing_index=failing, checked=checked,
                            skipped=skipped, component_counts=counts)
    logger.info("%s Sweep-out check: %d indices checked, %d skipped%s",
                "✅" if report.passed else "❌", len(checked), len(skipped),
                "" if report.passed else f", first failure at index {failing}")
    return report


def great_circle_arc(start_longitude: float, length: float, count: int) -> np.ndarray:
    """Points along the Equator, used for sweep-out controls."""
    lon = start_longitude + length * np.arange(count) / (count - 1)
    return np.stack([np.cos(lon), np.sin(lon), np.zeros(count)], axis=1)


def closed_great_circle(count: int) -> np.ndarray:
    lon = TWO_PI * np.arange(count) / count
    return np.stack([np.cos(lon), np.sin(lon), np.zeros(count)], axis=1)


def region_check_frame(reports: dict) -> pd.DataFrame:
    """One row per region check, written to region_checks.csv."""
    rows = []
    for name, report in reports.items():
        if isinstance(report, SweepoutReport):
            rows.append({"check": name, "passed": report.passed, "samples": len(report.checked),
                         "value": report.failing_index if report.failing_index is not None else -1})
        else:
            rows.append({"check": name, "passed": report.passed, "samples": report.n_samples,
                         "value": report.min_penetration if name == "great_circles" else len(report.witnesses)})
    return pd.DataFrame(rows)
