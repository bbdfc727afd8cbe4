#!/usr/bin/env python3
"""
🌀 Propeller Lab - Test Suite
Checks of the surface construction, the region, the initial map, the heat
flow, the analysis and the command line. Runs under pytest or as a script.
"""

import dataclasses
import inspect
import json
import math
import sys
import tempfile
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

from propeller.analysis import (check_courant_lebesgue, check_equator_localization, containment,
                                courant_lebesgue_bound, find_equator_points, harmonic_residual,
                                image_area, map_degree, verify)
from propeller.cli import main as cli_main
from propeller.config import expand_checks, load_config
from propeller.exporters import read_mesh_points
from propeller.errors import (CheckpointError, ConfigError, CourantLebesgueDomainError,
                              DegenerateProjectionError, EquatorPointsError, MapFieldError,
                              ResolutionError, SampleGraphError, StiffnessError,
                              SurfaceConstructionError)
from propeller.flow import (FlowConfig, FlowState, StepRecord, detect_bubble, flow_step,
                            gradient_check, load_checkpoint, run_flow, save_checkpoint,
                            tension_field)
from propeller.geometry import (NORTH_POLE, SOUTH_POLE, RegionTag, SpherePoint, SurfaceParams,
                                build_icosphere, build_surface, mesh_symmetry_residual,
                                project_to_sphere, sphere_geodesic_distance, surface_summary,
                                z2_reflect, z3_rotate)
from propeller.initmap import (MapField, build_u0, check_equivariance, cylinder_energy,
                               dirichlet_energy, energy_bound, energy_table, junction_slack,
                               max_differential_norm)
from propeller.region import (PropellerRegion, antipodal_obstruction_check,
                              check_sweepout_separation, closed_great_circle, great_circle_arc,
                              great_circle_obstruction_check, knn_graph, sample_tube_region)

SMALL = SurfaceParams(tube_radius=0.1, tube_half_height=2.0, epsilon=0.05, resolution=1)
REFERENCE_COARSE = SurfaceParams(tube_radius=0.1, tube_half_height=5.0, epsilon=0.05, resolution=1)
QUIET = dict(progress=False)


@lru_cache(maxsize=None)
def surface(params: SurfaceParams):
    return build_surface(params)


@lru_cache(maxsize=None)
def initial_map(params: SurfaceParams):
    return build_u0(surface(params), params)


@lru_cache(maxsize=None)
def icosphere(level: int):
    return build_icosphere(level)


def random_field(mesh, seed=0):
    rng = np.random.default_rng(seed)
    return MapField(project_to_sphere(rng.normal(size=(mesh.n_vertices, 3))), mesh)


def write_config(path: Path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def test_imports():
    """The package exposes its public API."""
    import propeller
    assert propeller.__version__
    for name in propeller.__all__:
        assert hasattr(propeller, name), name


def test_geodesic_distance_examples():
    """Poles are pi apart, orthogonal points pi/2, a point is 0 from itself."""
    assert sphere_geodesic_distance(NORTH_POLE, SOUTH_POLE) == pytest.approx(math.pi, abs=1e-15)
    assert sphere_geodesic_distance((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)) == pytest.approx(math.pi / 2, abs=1e-15)
    assert sphere_geodesic_distance(NORTH_POLE, NORTH_POLE) == 0.0


def test_sphere_point_rejects_non_unit():
    """A SpherePoint must be a unit vector."""
    with pytest.raises(MapFieldError):
        SpherePoint(1.0, 1.0, 0.0)


def test_projection_of_zero_vector_fails():
    """Projecting a (near) zero vector is an error, not a NaN."""
    with pytest.raises(DegenerateProjectionError):
        project_to_sphere(np.zeros(3))
    q = project_to_sphere(np.array([3.0, 4.0, 0.0]))
    assert np.allclose(q, [0.6, 0.8, 0.0])


def test_symmetry_actions_have_their_orders():
    """Three rotations and two reflections give back the point."""
    q = SpherePoint.from_longitude(0.3, 0.2)
    thrice = z3_rotate(z3_rotate(z3_rotate(q)))
    assert isinstance(thrice, SpherePoint)
    assert np.allclose(thrice.as_array(), q.as_array(), atol=1e-15)
    assert z2_reflect(z2_reflect(q)) == q
    assert np.array_equal(z3_rotate(q.as_array(), k=3), q.as_array())


def test_geodesic_distance_matches_chord_formula():
    """Agrees with 2 arcsin(|a - b| / 2) on random pairs."""
    rng = np.random.default_rng(11)
    a = project_to_sphere(rng.normal(size=(1000, 3)))
    b = project_to_sphere(rng.normal(size=(1000, 3)))
    chord = 2 * np.arcsin(np.linalg.norm(a - b, axis=1) / 2)
    assert np.allclose(sphere_geodesic_distance(a, b), chord, atol=1e-9)


def test_symmetry_actions_are_isometries():
    """Rotations and the mirror keep the pairwise distances of random triples."""
    rng = np.random.default_rng(12)
    for _ in range(100):
        triple = project_to_sphere(rng.normal(size=(3, 3)))
        before = sphere_geodesic_distance(triple[:, None], triple[None, :])
        for moved in (z3_rotate(triple), z3_rotate(triple, k=2), z2_reflect(triple)):
            after = sphere_geodesic_distance(moved[:, None], moved[None, :])
            assert np.allclose(after, before, atol=1e-12)


def test_surface_params_validation():
    """Radius outside (0, 1), overlapping holes and a wrong gap are rejected."""
    with pytest.raises(ValidationError):
        SurfaceParams(tube_radius=2.0)
    with pytest.raises(ValidationError):
        SurfaceParams(tube_radius=0.35, genus_parameter=2)
    with pytest.raises(ValidationError):
        SurfaceParams(sphere_gap=1.0)
    params = SurfaceParams(sphere_gap=2 * 5.0 + 4 * 0.1 - 2)
    assert params.derived_gap == pytest.approx(8.4)


def test_coarse_tube_is_rejected():
    """Fewer than 12 segments around a tube cannot be built."""
    with pytest.raises(SurfaceConstructionError):
        build_surface(SurfaceParams(tube_segments=8, tube_half_height=2.0))


def test_genus_two_topology():
    """p=1 gives a closed genus-2 surface with Euler characteristic -2."""
    print("🧪 Testing genus-2 surface...")
    mesh = surface(SMALL)

    chi = mesh.n_vertices - len(mesh.edges) + mesh.n_faces

    assert chi == -2
    assert mesh.genus == 2
    assert mesh.tube_count == 3
    directed = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    assert 2 * len(mesh.edges) == len(directed)
    print("✅ Genus-2 surface is closed and oriented")


def test_genus_four_topology():
    """p=2 gives Euler characteristic -6."""
    params = SurfaceParams(tube_radius=0.1, tube_half_height=2.0, genus_parameter=2, resolution=1)
    mesh = build_surface(params)
    assert mesh.n_vertices - len(mesh.edges) + mesh.n_faces == -6
    assert mesh.symmetry_order == 5
    assert len(mesh.waist_loops) == 5


def test_mesh_symmetries_are_exact():
    """Both permutations map vertex positions onto the acted positions."""
    mesh = surface(SMALL)
    assert mesh_symmetry_residual(mesh) < 1e-12
    for loop in mesh.waist_loops:
        assert np.all(mesh.vertices[loop, 2] == 0.0)
        assert set(mesh.z2_map[loop].tolist()) == set(loop.tolist())
    tubes = mesh.region_tags == int(RegionTag.TUBE)
    assert np.array_equal(mesh.tube_index[mesh.z3_map[tubes]], (mesh.tube_index[tubes] + 1) % 3)


def test_symmetry_residual_sees_broken_meshes():
    """One vertex moved by delta shows up; identity permutations are far off."""
    mesh = surface(SMALL)
    delta = 1e-6
    vertex = int(np.flatnonzero(mesh.region_tags == int(RegionTag.TUBE))[0])
    moved = mesh.vertices.copy()
    moved[vertex] += delta * np.array([1.0, 0.0, 0.0])

    nudged = dataclasses.replace(mesh, vertices=moved)
    frozen = dataclasses.replace(mesh, z3_map=np.arange(mesh.n_vertices), z2_map=np.arange(mesh.n_vertices))

    assert mesh_symmetry_residual(nudged) >= delta / 2
    assert mesh_symmetry_residual(frozen) > 0.5


def test_cotangent_operators():
    """Stiffness is symmetric, annihilates constants, masses sum to the area."""
    mesh = surface(SMALL)
    L = mesh.stiffness
    assert abs(L - L.T).max() < 1e-12
    assert np.max(np.abs(L @ np.ones(mesh.n_vertices))) < 1e-10
    assert np.sum(mesh.masses) == pytest.approx(mesh.area, rel=1e-12)
    assert mesh.stable_step > 0.0


def test_area_converges_under_refinement():
    """Surface area changes by less than 2% from resolution 1 to 2."""
    fine = build_surface(SMALL.model_copy(update={"resolution": 2}))
    coarse = surface(SMALL)
    assert abs(fine.area - coarse.area) / fine.area < 0.02


def test_icosphere():
    """Icospheres are closed genus-0 meshes approaching the sphere area."""
    mesh = icosphere(3)
    assert mesh.n_vertices - len(mesh.edges) + mesh.n_faces == 2
    assert mesh.area == pytest.approx(4 * math.pi, rel=0.02)
    assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0)


# ---------------------------------------------------------------------------
# region
# ---------------------------------------------------------------------------

def test_region_distances():
    """Pole at pi/2, kept-arc center at pi/6, removed-arc midpoint inside a band."""
    region = PropellerRegion(epsilon=0.05)
    assert region.distance_to_forbidden(NORTH_POLE) == pytest.approx(math.pi / 2, abs=1e-12)
    assert region.distance_to_forbidden((1.0, 0.0, 0.0)) == pytest.approx(math.pi / 6, abs=1e-12)
    assert region.distance_to_forbidden(region.removed_midpoint(0)) == pytest.approx(0.0, abs=1e-12)
    assert not region.contains(region.removed_midpoint(1))
    assert region.contains(region.kept_midpoint(2))
    assert float(region.margin(NORTH_POLE)) == pytest.approx(math.pi / 2 - 0.05, abs=1e-12)


def test_region_distance_matches_dense_arcs():
    """The closed form equals the nearest of 10^5 points spread over the removed arcs."""
    region = PropellerRegion(epsilon=0.05)
    arcs = region.removed_arcs
    per_arc = 100_000 // len(arcs)
    lon = np.concatenate([np.linspace(a, b, per_arc) for a, b in arcs])
    dense = np.stack([np.cos(lon), np.sin(lon), np.zeros_like(lon)], axis=1)
    rng = np.random.default_rng(13)
    queries = project_to_sphere(rng.normal(size=(200, 3)))

    nearest = np.concatenate([np.arccos(np.clip(np.max(chunk @ dense.T, axis=1), -1.0, 1.0))
                              for chunk in np.array_split(queries, 20)])

    exact = region.distance_to_forbidden(queries)
    assert np.all(exact <= nearest + 1e-7)
    assert np.allclose(exact, nearest, atol=1e-4)


def test_region_distance_is_lipschitz():
    """|d(p) - d(q)| never exceeds the geodesic distance between p and q."""
    region = PropellerRegion(epsilon=0.05)
    rng = np.random.default_rng(14)
    p = project_to_sphere(rng.normal(size=(2000, 3)))
    q = project_to_sphere(p + 0.2 * rng.normal(size=(2000, 3)))
    gap = np.abs(region.distance_to_forbidden(p) - region.distance_to_forbidden(q))
    assert np.all(gap <= sphere_geodesic_distance(p, q) + 1e-12)


def test_region_is_symmetric():
    """Membership and distance are unchanged by the rotation and the mirror."""
    region = PropellerRegion(epsilon=0.05)
    rng = np.random.default_rng(15)
    points = project_to_sphere(rng.normal(size=(5000, 3)))
    base = region.distance_to_forbidden(points)
    for moved in (z3_rotate(points), z2_reflect(points)):
        assert np.array_equal(region.contains(moved), region.contains(points))
        assert np.allclose(region.distance_to_forbidden(moved), base, atol=1e-12)


def test_region_rejects_overlapping_arcs():
    """Explicit arcs must be disjoint."""
    with pytest.raises(ValueError):
        PropellerRegion.from_arcs(0.05, [(0.0, 1.0), (0.5, 2.0)])


def test_antipodal_obstruction():
    """Alternating arcs block every great circle; a lopsided layout does not."""
    for eps in (0.01, 0.05, 0.1):
        assert antipodal_obstruction_check(PropellerRegion(epsilon=eps), n_samples=10_000, seed=1).passed
    lopsided = PropellerRegion.from_arcs(0.05, [(0.1, 0.5), (2.0, 2.4)])
    report = antipodal_obstruction_check(lopsided, n_samples=2000, seed=1)
    assert not report.passed
    assert len(report.witnesses) > 0


def test_great_circle_obstruction():
    """Random great circles and the x-z meridian all enter a band; a meridian avoids lopsided arcs."""
    region = PropellerRegion(epsilon=0.05)
    report = great_circle_obstruction_check(region, n_circles=2000, seed=2, step=1e-3, workers=2)
    assert report.passed
    assert report.min_penetration > 0.0

    crossings = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    assert np.min(region.distance_to_forbidden(crossings)) == pytest.approx(0.0, abs=1e-12)
    assert great_circle_obstruction_check(region, normals=np.array([[0.0, 1.0, 0.0]])).passed

    lopsided = PropellerRegion.from_arcs(0.05, [(0.1, 0.5), (2.0, 2.4)])
    meridian = great_circle_obstruction_check(lopsided, normals=np.array([[0.0, 1.0, 0.0]]))
    assert not meridian.passed


def test_sweepout_separation_controls():
    """A quarter arc tube separates at every interior ball; a closed one never does."""
    print("🧪 Testing sweep-out controls...")
    arc = great_circle_arc(0.0, math.pi / 2, 48)
    radii = np.full(len(arc), 0.1)
    samples = knn_graph(sample_tube_region(arc, radii, 4000, seed=0), k=8)
    report = check_sweepout_separation(samples, arc, radii)
    assert report.passed
    assert report.skipped

    loop = closed_great_circle(192)
    loop_radii = np.full(len(loop), 0.1)
    loop_samples = knn_graph(sample_tube_region(loop, loop_radii, 16000, seed=0), k=8)
    negative = check_sweepout_separation(loop_samples, loop, loop_radii)
    assert not negative.passed
    assert negative.failing_index is not None
    print("✅ Sweep-out controls behave")


def test_sweepout_rejects_bad_input():
    """Radii at the convexity radius and two-point curves are refused."""
    arc = great_circle_arc(0.0, 1.0, 10)
    samples = knn_graph(sample_tube_region(arc, np.full(10, 0.1), 500, seed=0), k=6)
    with pytest.raises(SampleGraphError):
        check_sweepout_separation(samples, arc, np.full(10, math.pi / 2))
    with pytest.raises(SampleGraphError):
        check_sweepout_separation(samples, arc[:2], np.full(2, 0.1))


# ---------------------------------------------------------------------------
# initial map
# ---------------------------------------------------------------------------

def test_u0_values():
    """Spheres go to the poles, waists to the rotated kept-arc centers."""
    mesh, u0 = surface(SMALL), initial_map(SMALL)
    off_tube = mesh.region_tags != int(RegionTag.TUBE)
    assert np.all(u0.values[off_tube & (mesh.side > 0)] == [0.0, 0.0, 1.0])
    assert np.all(u0.values[off_tube & (mesh.side < 0)] == [0.0, 0.0, -1.0])
    for k, loop in enumerate(mesh.waist_loops):
        expected = [math.cos(2 * math.pi * k / 3), math.sin(2 * math.pi * k / 3), 0.0]
        assert np.allclose(u0.values[loop], expected, atol=1e-15)
    assert check_equivariance(u0) < 1e-12


def test_u0_energy_matches_strip_formula():
    """Only vertical tube edges carry energy: E = n * 2H * seg * (c/dt) * 2 sin^2(pi dt / 4R)."""
    mesh, u0 = surface(SMALL), initial_map(SMALL)
    heights = np.unique(mesh.tube_height[mesh.tube_height > 0])
    H, R, seg = len(heights), SMALL.tube_half_height, SMALL.segments
    dt = R / H
    chord = 2 * SMALL.tube_radius * math.sin(math.pi / seg)
    expected = 3 * 2 * H * seg * (chord / dt) * 2 * math.sin(math.pi * dt / (4 * R)) ** 2

    energy = dirichlet_energy(u0)

    assert energy == pytest.approx(expected, rel=1e-9)
    assert 0.9 <= energy / cylinder_energy(SMALL) <= 1.0


def test_energy_closed_forms():
    """Closed forms for r=0.1, R=5 and the headroom below 4*pi."""
    params = REFERENCE_COARSE
    assert cylinder_energy(params) == pytest.approx(3 * math.pi ** 3 * 0.1 / 10, rel=1e-15)
    assert energy_bound(params) == pytest.approx(3 * math.pi ** 3 * 0.01 / 20, rel=1e-15)
    energy = dirichlet_energy(initial_map(params))
    assert 0.0 < energy <= cylinder_energy(params)
    assert 10 * energy < 4 * math.pi


def test_u0_energy_decreases_with_height():
    """Longer tubes carry less energy, about 1/R."""
    e2 = dirichlet_energy(initial_map(SMALL))
    e4 = dirichlet_energy(initial_map(SMALL.model_copy(update={"tube_half_height": 4.0})))
    assert e4 < e2
    assert e2 / e4 == pytest.approx(2.0, rel=0.01)


def test_u0_energy_approaches_cylinder_energy():
    """Refining the surface moves E(u0) / cylinder energy toward 1."""
    fine = SMALL.model_copy(update={"resolution": 2})
    coarse_ratio = dirichlet_energy(initial_map(SMALL)) / cylinder_energy(SMALL)
    fine_ratio = dirichlet_energy(initial_map(fine)) / cylinder_energy(fine)
    assert abs(1.0 - fine_ratio) < abs(1.0 - coarse_ratio)
    assert fine_ratio <= 1.0


def test_u0_energy_over_heights():
    """E(u0) falls as the tubes grow from R=2 to 5 to 10."""
    energies = [dirichlet_energy(initial_map(SMALL.model_copy(update={"tube_half_height": R})))
                for R in (2.0, 5.0, 10.0)]
    assert energies[0] > energies[1] > energies[2]


def test_energy_table_reports_junction_slack():
    """The table carries the same collar share as the surface summary."""
    mesh = surface(SMALL)
    table = energy_table(initial_map(SMALL), SMALL)
    assert table["junction_slack"] == junction_slack(mesh)
    assert table["junction_slack"] == surface_summary(mesh)["junction_slack"]
    assert table["ratio_to_cylinder"] == pytest.approx(table["energy"] / table["cylinder_energy"])


def test_equivariance_check_sees_broken_fields():
    """A single moved value or a random field breaks equivariance."""
    u0 = initial_map(SMALL)
    vertex = int(np.flatnonzero(u0.mesh.region_tags == int(RegionTag.TUBE))[5])
    values = u0.values.copy()
    values[vertex] = project_to_sphere(values[vertex] + np.array([0.0, 0.0, 1e-3]))

    assert check_equivariance(u0.with_values(values)) > 0.0
    assert check_equivariance(random_field(u0.mesh)) > 0.5


def test_energy_is_invariant_under_target_rotations():
    """Rotating every value by one rotation of the sphere keeps the energy."""
    field = random_field(surface(SMALL), seed=4)
    q, r = np.linalg.qr(np.random.default_rng(16).normal(size=(3, 3)))
    rotation = q * np.sign(np.diag(r))
    if np.linalg.det(rotation) < 0:
        rotation[:, 0] = -rotation[:, 0]

    rotated = field.with_values(field.values @ rotation.T)

    assert dirichlet_energy(rotated) == pytest.approx(dirichlet_energy(field), rel=1e-12)


def test_u0_differential_bound():
    """The piecewise-linear u0 never stretches by more than pi/(2R)."""
    u0 = initial_map(SMALL)
    assert max_differential_norm(u0) <= math.pi / (2 * SMALL.tube_half_height) * (1 + 1e-9)


def test_map_field_validation():
    """Fields must be unit vectors on the right mesh and params must match."""
    mesh = surface(SMALL)
    with pytest.raises(MapFieldError):
        MapField(np.ones((mesh.n_vertices, 3)), mesh)
    with pytest.raises(MapFieldError):
        MapField(np.tile([0.0, 0.0, 1.0], (3, 1)), mesh)
    with pytest.raises(MapFieldError):
        build_u0(mesh, SMALL.model_copy(update={"tube_half_height": 3.0}))
    assert dirichlet_energy(MapField.constant(mesh, (0.0, 0.0, 1.0))) == 0.0


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def test_tension_of_constant_and_random_fields():
    """Constants have zero tension; tension is always tangent."""
    mesh = surface(SMALL)
    assert np.max(np.abs(tension_field(MapField.constant(mesh, (1.0, 0.0, 0.0))))) == 0.0
    field = random_field(mesh)
    tau = tension_field(field)
    assert np.max(np.abs(np.einsum("ij,ij->i", tau, field.values))) < 1e-12 * max(1.0, np.abs(tau).max())


def test_identity_tension_decays_on_icospheres():
    """The identity of the sphere is harmonic: tension shrinks under refinement."""
    peaks = [float(np.max(np.linalg.norm(tension_field(MapField.identity(icosphere(level))), axis=1)))
             for level in (1, 2, 3)]
    assert peaks[1] < peaks[0]
    assert peaks[2] < peaks[1]


def test_energy_gradient_matches_finite_differences():
    """Directional derivative equals -sum m <tau, xi> to 1e-5."""
    check = gradient_check(initial_map(SMALL), seed=3)
    assert check["relative_error"] < 1e-5


def test_first_order_energy_decrease():
    """A tiny step lowers the energy by dt * sum m |tau|^2 within 10%."""
    u0 = initial_map(SMALL)
    config = FlowConfig(dt=1e-8, **QUIET)
    state = FlowState.start(u0, config)
    predicted = 1e-8 * float(np.sum(u0.mesh.masses * np.sum(state.tension ** 2, axis=1)))

    nxt = flow_step(state, config)

    assert state.energy - nxt.energy == pytest.approx(predicted, rel=0.1)
    assert nxt.step == 1 and nxt.t == pytest.approx(1e-8)


def test_flow_keeps_symmetry_and_monotonicity():
    """Steps from u0 stay equivariant and never raise the energy."""
    u0 = initial_map(SMALL)
    config = FlowConfig(max_steps=200, **QUIET)
    report = run_flow(u0, config, PropellerRegion(epsilon=0.05))
    assert report.steps == 200
    assert report.energy_is_monotone()
    assert report.energy < report.initial_energy
    assert check_equivariance(report.field) < 1e-10
    assert all(rec.min_margin > 0 for rec in report.history)
    assert not report.alarms


def test_flow_keeps_mirror_pairs():
    """Mirror-paired vertices keep mirrored values in every snapshot."""
    u0 = initial_map(SMALL)
    mesh = u0.mesh
    upper_pole = 0
    lower_pole = int(mesh.z2_map[upper_pole])
    config = FlowConfig(max_steps=300, snapshot_every=50, **QUIET)

    report = run_flow(u0, config)

    assert len(report.snapshots) >= 7
    assert lower_pole != upper_pole
    for snap in report.snapshots:
        u = snap.field.values
        assert sphere_geodesic_distance(u[upper_pole], z2_reflect(u[lower_pole])) < 1e-9
        assert np.max(sphere_geodesic_distance(u, z2_reflect(u[mesh.z2_map]))) < 1e-9


def test_constant_field_converges_immediately():
    """A constant map is already harmonic."""
    mesh = surface(SMALL)
    report = run_flow(MapField.constant(mesh, (0.0, 0.0, 1.0)), FlowConfig(**QUIET))
    assert report.converged
    assert report.steps == 0
    assert report.energy == 0.0


def test_huge_step_is_halved():
    """A huge dt is halved until the energy stops rising."""
    u0 = initial_map(SMALL)
    report = run_flow(u0, FlowConfig(dt=10.0, max_steps=3, **QUIET))
    assert report.history[1].halvings > 0
    assert report.energy_is_monotone()
    with pytest.raises(StiffnessError) as info:
        flow_step(FlowState.start(u0, FlowConfig(dt=10.0, max_halvings=0, **QUIET)),
                  FlowConfig(dt=10.0, max_halvings=0, **QUIET))
    assert "energy_after" in info.value.diagnostics


def test_bubble_detection():
    """A drop of 13 raises an alarm; slow decay and the u0 run do not."""
    config = FlowConfig()
    drop = [StepRecord(0, 0.0, 20.0, 1.0, 0.0, 0.1), StepRecord(1, 0.1, 7.0, 1.0, 0.0, 0.1)]
    alarms = detect_bubble(drop, config)
    assert [a.step for a in alarms] == [1]
    smooth = [StepRecord(i, 0.1 * i, 1.0 * 0.99 ** i, 1.0, 0.0, 0.1) for i in range(50)]
    assert detect_bubble(smooth, config) == []
    crowded = [StepRecord(0, 0.0, 1.0, 1.0, 0.0, 0.1, max_ring_energy_fraction=0.5)]
    assert detect_bubble(crowded, config)[0].kind == "energy concentration"
    with pytest.raises(ValueError):
        detect_bubble([], config)


def test_flow_logs_are_reproducible(tmp_path):
    """Two identical runs write byte-identical CSV logs."""
    u0 = initial_map(SMALL)
    config = FlowConfig(max_steps=30, **QUIET)
    first = run_flow(u0, config).write_log(tmp_path / "a.csv")
    second = run_flow(u0, config).write_log(tmp_path / "b.csv")
    assert first.read_bytes() == second.read_bytes()
    header = first.read_text().splitlines()[0]
    assert header.startswith("step,t,energy,max_tension,equivariance_error,min_margin")


def test_checkpoint_resume_matches_straight_run(tmp_path):
    """Stopping, saving, loading and resuming reproduces the straight run."""
    u0 = initial_map(SMALL)
    straight = run_flow(u0, FlowConfig(max_steps=40, **QUIET))

    half = run_flow(u0, FlowConfig(max_steps=20, **QUIET))
    path = save_checkpoint(half.final_state, tmp_path / "checkpoint.json")
    state = load_checkpoint(path, u0.mesh)
    resumed = run_flow(u0, FlowConfig(max_steps=40, **QUIET), state=state)

    assert state.step == 20
    assert np.array_equal(resumed.field.values, straight.field.values)
    assert (resumed.write_log(tmp_path / "r.csv").read_bytes()
            == straight.write_log(tmp_path / "s.csv").read_bytes())


def test_checkpoint_errors(tmp_path):
    """Foreign files and other meshes are refused."""
    u0 = initial_map(SMALL)
    bogus = tmp_path / "bogus.json"
    bogus.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(bogus, u0.mesh)
    path = save_checkpoint(FlowState.start(u0, FlowConfig(**QUIET)), tmp_path / "ok.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, icosphere(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json", u0.mesh)


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

def test_harmonic_residual():
    """Zero for constants, positive for u0."""
    mesh = surface(SMALL)
    assert harmonic_residual(MapField.constant(mesh, (0.0, 0.0, 1.0))) == 0.0
    assert harmonic_residual(initial_map(SMALL)) > 0.0


def test_degree():
    """Constant and u0 have degree 0, the icosphere identity degree 1."""
    assert map_degree(MapField.constant(icosphere(2), (0.0, 0.0, 1.0))).degree == 0
    identity = map_degree(MapField.identity(icosphere(2)))
    assert identity.degree == 1
    assert identity.residual < 1e-9
    u0 = initial_map(SMALL)
    report = map_degree(u0)
    assert report.degree == 0 and report.residual < 0.05
    rotated = u0.with_values(z3_rotate(u0.values))
    assert map_degree(rotated).degree == report.degree
    assert image_area(u0) < 1e-8


def test_containment():
    """North pole margin pi/2 - eps; u0 margin pi/6 - eps at the waists."""
    region = PropellerRegion(epsilon=0.05)
    mesh = surface(SMALL)
    north = containment(MapField.constant(mesh, (0.0, 0.0, 1.0)), region)
    assert north.min_margin == pytest.approx(math.pi / 2 - 0.05, abs=1e-12)

    report = containment(initial_map(SMALL), region)
    assert report.min_margin == pytest.approx(math.pi / 6 - 0.05, abs=1e-9)
    assert report.worst_label.startswith("tube(")
    assert len(report.offending_vertices) == 0
    assert report.by_region["upper_sphere"] == pytest.approx(math.pi / 2 - 0.05, abs=1e-12)


def test_equator_points():
    """u0 puts p_i on the Equator, cyclically permuted; a constant field cannot."""
    u0 = initial_map(SMALL)
    report = find_equator_points(u0)
    assert report.passed
    assert len(report.points) == 3
    assert report.permutation_error < 1e-12
    assert np.allclose(report.images[0], [1.0, 0.0, 0.0], atol=1e-15)
    with pytest.raises(EquatorPointsError):
        find_equator_points(MapField.constant(u0.mesh, (0.0, 0.0, 1.0)))
    assert check_equator_localization(u0, delta=1e-9)["passed"]


def test_equator_localization_ignores_rounding_at_the_waists():
    """Waist values a hair off the Equator do not pull in the neighbouring rings."""
    u0 = initial_map(SMALL)
    waist = np.concatenate(u0.mesh.waist_loops)
    values = u0.values.copy()
    values[waist, 2] = np.where(np.arange(len(waist)) % 2 == 0, 1e-17, -1e-17)
    noisy = u0.with_values(project_to_sphere(values))

    report = check_equator_localization(noisy, delta=SMALL.tube_radius)

    assert report["max_distance_to_waist"] == 0.0
    assert report["equator_vertices"] == len(waist)


def test_courant_lebesgue_bound():
    """Unit example, the r=0.1, R=5 example, monotonicity and domain errors."""
    assert courant_lebesgue_bound(1 / (8 * math.pi), math.exp(-1)) == pytest.approx(1.0, abs=1e-12)
    assert courant_lebesgue_bound(0.1 ** 2 / 5, 0.01) == pytest.approx(0.1044, abs=1e-3)
    assert courant_lebesgue_bound(1.0, 0.001) < courant_lebesgue_bound(1.0, 0.01)
    with pytest.raises(CourantLebesgueDomainError):
        courant_lebesgue_bound(1.0, 1.0)
    with pytest.raises(ValueError):
        courant_lebesgue_bound(-1.0, 0.5)


def test_courant_lebesgue_check():
    """Constant passes, a jump with tiny energy fails, coarse meshes are reported."""
    mesh = icosphere(3)
    constant = check_courant_lebesgue(MapField.constant(mesh, (0.0, 0.0, 1.0)), 0, 0.09)
    assert constant.passed and constant.lhs == 0.0

    center = mesh.vertices[0]
    tangent = np.cross(center, [0.0, 0.0, 1.0] if abs(center[2]) < 0.9 else [1.0, 0.0, 0.0])
    side = (mesh.vertices - center) @ tangent >= 0.0
    jump = MapField(np.where(side[:, None], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]), mesh)
    failed = check_courant_lebesgue(jump, 0, 0.09, energy=1e-6)
    assert not failed.passed
    assert failed.lhs == pytest.approx(2.0)

    doubled = check_courant_lebesgue(jump, 0, 0.09, energy=2e-6)
    assert doubled.rhs == pytest.approx(math.sqrt(2) * failed.rhs, rel=1e-12)

    with pytest.raises(ResolutionError):
        check_courant_lebesgue(MapField.identity(icosphere(1)), 0, 1e-4)


def test_courant_lebesgue_vacuous_bound_is_reported():
    """A bound of at least 2 is flagged as vacuous in the check and in verify."""
    assert courant_lebesgue_bound(0.83, 0.01) > 2.0
    mesh = icosphere(3)
    assert not check_courant_lebesgue(MapField.constant(mesh, (0.0, 0.0, 1.0)), 0, 0.09).vacuous

    u0 = initial_map(SMALL)
    region = PropellerRegion(epsilon=0.05)
    report = verify(u0, region, SMALL, initial=u0, antipodal=antipodal_obstruction_check(region, n_samples=500))

    check = report.checks["courant_lebesgue[p1]"]
    assert check.passed
    assert "vacuous" in check.detail
    assert check_courant_lebesgue(u0, find_equator_points(u0).points[0], SMALL.tube_radius ** 2).vacuous


def test_verify_u0_report():
    """u0 passes the degree and containment checks but is not harmonic."""
    u0 = initial_map(SMALL)
    region = PropellerRegion(epsilon=0.05)
    antipodal = antipodal_obstruction_check(region, n_samples=500)

    report = verify(u0, region, SMALL, initial=u0, antipodal=antipodal)

    assert report.checks["degree"].passed
    assert report.checks["containment"].passed
    assert report.checks["equator_points"].passed
    assert all(report.checks[f"courant_lebesgue[p{i}]"].passed for i in (1, 2, 3))
    assert not report.checks["harmonic_residual"].passed
    assert not report.passed
    assert "FAIL" in report.to_text()


# ---------------------------------------------------------------------------
# config and command line
# ---------------------------------------------------------------------------

def test_config_layers(tmp_path):
    """File values, then environment, then explicit overrides."""
    path = write_config(tmp_path / "run.ini", [
        "# test run",
        "surface.tube_radius = 0.2",
        "surface.resolution = 1",
        "flow.dt = auto",
        "flow.max_steps = 10",
    ])
    config = load_config(path, overrides={"flow.max_steps": 7},
                         environ={"PROPELLER_SURFACE__TUBE_HALF_HEIGHT": "3.5", "PROPELLER_DEBUG": "true"})
    assert config.surface.tube_radius == 0.2
    assert config.surface.tube_half_height == 3.5
    assert config.flow.dt == "auto"
    assert config.flow.max_steps == 7
    assert config.checks == ["region", "sweepout", "flow", "analysis"]
    assert load_config(None, environ={}).surface.tube_half_height == 5.0


def test_config_errors_name_line_and_field(tmp_path):
    """r=2 and unknown keys are reported with their line numbers."""
    path = write_config(tmp_path / "bad.ini", ["# comment", "surface.tube_radius = 2", "surface.colour = red"])
    with pytest.raises(ConfigError) as info:
        load_config(path, environ={})
    problems = {p["field"]: p["line"] for p in info.value.problems}
    assert problems["surface.tube_radius"] == 2
    assert problems["surface.colour"] == 3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini", environ={})


def test_check_selection():
    """Aliases expand, unknown names fail."""
    assert expand_checks("region-only") == ["region", "sweepout"]
    assert expand_checks("flow,region") == ["flow", "region"]
    with pytest.raises(ValueError):
        expand_checks("bogus")


def _small_run_file(tmp_path: Path, *extra):
    return write_config(tmp_path / "small.ini", [
        "surface.tube_half_height = 5.0",
        "surface.resolution = 1",
        "region.antipodal_samples = 1000",
        "region.great_circles = 200",
        "flow.progress = false",
        *extra,
    ])


def test_cli_region_only(tmp_path, monkeypatch):
    """--checks region-only runs the region module and no flow."""
    monkeypatch.delenv("PROPELLER_CONFIG", raising=False)
    out = tmp_path / "out"
    status = cli_main(["--config", str(_small_run_file(tmp_path)), "--out", str(out),
                       "--checks", "region-only", "run"])
    assert status == 0
    assert (out / "region_checks.csv").exists()
    assert not (out / "flow_log.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] is True
    assert summary["criteria"]["sweepout_closed_circle_rejected"]["passed"]


def test_cli_build_mesh(tmp_path, monkeypatch):
    """build-mesh writes the mesh and u0 artifacts."""
    monkeypatch.delenv("PROPELLER_CONFIG", raising=False)
    out = tmp_path / "mesh"
    status = cli_main(["--config", str(_small_run_file(tmp_path)), "--out", str(out), "build-mesh"])
    assert status == 0
    for name in ("mesh.obj", "mesh.vtk", "u0.vtk", "summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["surface"]["euler_characteristic"] == -2
    assert summary["degree_initial"] == 0
    assert read_mesh_points(out / "mesh.obj").shape == (summary["surface"]["vertices"], 3)


def test_cli_flow_seed_drives_gradient_check(tmp_path, monkeypatch):
    """flow.seed picks the direction of the gradient check stored with the flow summary."""
    monkeypatch.delenv("PROPELLER_CONFIG", raising=False)
    path = _small_run_file(tmp_path, "flow.max_steps = 5", "flow.seed = 5")
    out = tmp_path / "flow"
    status = cli_main(["--config", str(path), "--out", str(out), "run-flow"])

    summary = json.loads((out / "summary.json").read_text())
    config = load_config(path, environ={})
    expected = gradient_check(build_u0(build_surface(config.surface), config.surface), seed=5)

    assert config.flow.seed == 5
    assert status == 2
    assert "converged" in summary["failing"]
    assert summary["flow"]["gradient_check"]["finite_difference"] == pytest.approx(
        expected["finite_difference"], rel=1e-12)
    assert summary["flow"]["gradient_check"]["relative_error"] < 1e-5


def test_cli_reports_config_errors(tmp_path, monkeypatch):
    """A bad config exits with status 1."""
    monkeypatch.delenv("PROPELLER_CONFIG", raising=False)
    bad = write_config(tmp_path / "bad.ini", ["surface.tube_radius = 2"])
    assert cli_main(["--config", str(bad), "--out", str(tmp_path / "x"), "build-mesh"]) == 1


# ---------------------------------------------------------------------------
# desk-scale runs
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_full_region_acceptance():
    """10^4 antipodal samples and 10^4 traced great circles."""
    region = PropellerRegion(epsilon=0.05)
    assert antipodal_obstruction_check(region, n_samples=10_000).passed
    assert great_circle_obstruction_check(region, n_circles=10_000, step=1e-3, workers=4).passed


@pytest.mark.slow
def test_flow_converges_to_contained_harmonic_map():
    """The flow from u0 converges to a degree-0 harmonic map inside the region."""
    print("🧪 Testing the heat flow to convergence...")
    u0 = initial_map(SMALL)
    region = PropellerRegion(epsilon=0.05)
    config = FlowConfig(max_steps=400_000, monitor_every=500, snapshot_every=20_000, **QUIET)

    report = run_flow(u0, config, region)

    assert report.converged
    assert report.energy_is_monotone()
    assert not report.alarms
    assert all(snap.equivariance_error < 1e-9 for snap in report.snapshots)
    assert all(map_degree(snap.field).degree == 0 for snap in report.snapshots)
    field = report.field
    assert harmonic_residual(field) < 1e-4
    assert containment(field, region).min_margin > 0.0
    points = find_equator_points(field)
    assert points.passed
    for p in points.points:
        assert check_courant_lebesgue(field, p, SMALL.tube_radius ** 2).passed
    print("✅ Heat flow converged")


@pytest.mark.slow
def test_reference_config_converges(tmp_path, monkeypatch):
    """propeller.ini runs to a converged degree-0 map that passes every check."""
    print("🧪 Testing the reference run...")
    monkeypatch.delenv("PROPELLER_CONFIG", raising=False)
    reference = Path(__file__).parent / "propeller.ini"
    out = tmp_path / "reference"

    status = cli_main(["--config", str(reference), "--out", str(out), "--checks", "flow,analysis", "run"])

    summary = json.loads((out / "summary.json").read_text())
    assert status == 0, summary["failing"]
    assert summary["converged"] is True
    assert summary["criteria"]["converged"]["passed"]
    assert summary["degree"] == 0
    assert summary["criteria"]["degree_initial"]["passed"]
    assert summary["flow"]["steps"] <= 100_000
    print("✅ Reference run converged")


def main():
    """Run all tests."""
    print("🌀 Propeller Lab - Running Tests")
    print("=" * 50)

    tests = [obj for name, obj in sorted(globals().items())
             if name.startswith("test_") and callable(obj)]
    quick = "--all" not in sys.argv

    passed = 0
    failed = 0
    skipped = 0

    for test in tests:
        marks = {mark.name for mark in getattr(test, "pytestmark", [])}
        if quick and "slow" in marks:
            skipped += 1
            continue
        kwargs = {}
        params = inspect.signature(test).parameters
        if "tmp_path" in params:
            kwargs["tmp_path"] = Path(tempfile.mkdtemp(prefix="propeller_test_"))
        if "monkeypatch" in params:
            kwargs["monkeypatch"] = pytest.MonkeyPatch()
        try:
            test(**kwargs)
            passed += 1
            print(f"✅ {test.__name__}")
        except Exception as e:
            print(f"❌ Test {test.__name__} failed with exception: {e!r}")
            failed += 1
        finally:
            if "monkeypatch" in kwargs:
                kwargs["monkeypatch"].undo()

    print("=" * 50)
    print(f"🧪 Test Results: {passed} passed, {failed} failed, {skipped} slow skipped (use --all)")

    if failed == 0:
        print("🎉 All tests passed! The lab is ready.")
        print("Run 'python app.py --config propeller.ini' for the reference run.")
    else:
        print("⚠️  Some tests failed. Please check the installation.")
        print("Try: pip install -r requirements.txt")

    return failed == 0


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
