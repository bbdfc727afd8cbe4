#!/usr/bin/env python3
"""
🌀 Propeller Lab - harmonic maps of degree 0 that avoid the propeller region

Builds a symmetric genus-2p surface, maps it to the sphere along tube
meridians and runs the harmonic map heat flow, then checks that the limit
map stays inside the sphere minus the bands around alternating Equator arcs.
"""

__version__ = "1.0.0"
__author__ = "Propeller Lab"
__description__ = "Numerical lab for equivariant harmonic maps into the propeller region"

from .errors import PropellerError
from .geometry import (SpherePoint, SurfaceParams, SurfaceMesh, build_surface, build_icosphere,
                       sphere_geodesic_distance, project_to_sphere, z3_rotate, z2_reflect)
from .region import (PropellerRegion, antipodal_obstruction_check, great_circle_obstruction_check,
                     check_sweepout_separation)
from .initmap import MapField, build_u0, dirichlet_energy, check_equivariance
from .flow import FlowConfig, FlowState, FlowReport, tension_field, flow_step, run_flow, detect_bubble
from .analysis import (harmonic_residual, map_degree, containment, find_equator_points,
                       courant_lebesgue_bound, check_courant_lebesgue, verify)
from .config import RunConfig, load_config
from .cli import LabRunner, main

__all__ = [
    "PropellerError",
    "SpherePoint",
    "SurfaceParams",
    "SurfaceMesh",
    "build_surface",
    "build_icosphere",
    "sphere_geodesic_distance",
    "project_to_sphere",
    "z3_rotate",
    "z2_reflect",
    "PropellerRegion",
    "antipodal_obstruction_check",
    "great_circle_obstruction_check",
    "check_sweepout_separation",
    "MapField",
    "build_u0",
    "dirichlet_energy",
    "check_equivariance",
    "FlowConfig",
    "FlowState",
    "FlowReport",
    "tension_field",
    "flow_step",
    "run_flow",
    "detect_bubble",
    "harmonic_residual",
    "map_degree",
    "containment",
    "find_equator_points",
    "courant_lebesgue_bound",
    "check_courant_lebesgue",
    "verify",
    "RunConfig",
    "load_config",
    "LabRunner",
    "main",
]
