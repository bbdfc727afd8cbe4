#!/usr/bin/env python3
"""
Propeller CLI Module
Run orchestration: parse the configuration, build the surface and u0, run
the flow and every requested check, and write the artifact tree.
"""

import argparse
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from .analysis import SnapshotAudit, map_degree, verify
from .config import RunConfig, load_config
from .errors import ConfigError, PropellerError, StiffnessError
from .exporters import write_csv, write_obj, write_summary, write_text, write_vtk
from .flow import FlowReport, Snapshot, gradient_check, load_checkpoint, run_flow, save_checkpoint
from .geometry import SurfaceMesh, build_surface, surface_summary
from .initmap import MapField, build_u0, dirichlet_energy, energy_table
from .region import (antipodal_obstruction_check, check_sweepout_separation, closed_great_circle,
                     great_circle_arc, great_circle_obstruction_check, knn_graph, region_check_frame,
                     sample_tube_region)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2
FOUR_PI = 4.0 * math.pi


def configure_logging(debug: bool = False):
    """Message-only console logging, DEBUG when asked for."""
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, format="%(message)s",
                        stream=sys.stdout, force=True)


class LabRunner:
    """Runs the lab for one configuration and collects named pass/fail criteria."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.criteria: Dict[str, Dict[str, Any]] = {}
        self.summary: Dict[str, Any] = {"config": config.flat()}
        self.region = config.propeller_region()
        self._mesh: Optional[SurfaceMesh] = None
        self._u0: Optional[MapField] = None

    # --- bookkeeping -------------------------------------------------------

    def prepare_output(self) -> Path:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from exc
        if not os.access(self.out, os.W_OK):
            raise ConfigError(f"output directory {self.out} is not writable")
        return self.out

    def record(self, name: str, passed: bool, value: Any = None):
        self.criteria[name] = {"passed": bool(passed), "value": value}
        if not passed:
            logger.warning("❌ Criterion failed: %s (%s)", name, value)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.criteria.values())

    def finish(self) -> int:
        self.summary["criteria"] = self.criteria
        self.summary["passed"] = self.passed
        self.summary["failing"] = [name for name, c in self.criteria.items() if not c["passed"]]
        write_summary(self.summary, self.out / "summary.json")
        if self.passed:
            logger.info("✅ All %d criteria passed", len(self.criteria))
            return EXIT_OK
        logger.error("❌ Failing criteria: %s", ", ".join(self.summary["failing"]))
        return EXIT_CHECK_FAILED

    # --- stages ------------------------------------------------------------

    @property
    def mesh(self) -> SurfaceMesh:
        if self._mesh is None:
            self._mesh = build_surface(self.config.surface)
        return self._mesh

    @property
    def u0(self) -> MapField:
        if self._u0 is None:
            self._u0 = build_u0(self.mesh, self.config.surface)
        return self._u0

    def build_mesh(self) -> SurfaceMesh:
        mesh = self.mesh
        write_obj(mesh, self.out / "mesh.obj")
        write_vtk(mesh, self.out / "mesh.vtk")
        self.summary["surface"] = surface_summary(mesh)
        self.record("topology", mesh.n_vertices - len(mesh.edges) + mesh.n_faces == 2 - 2 * mesh.genus,
                    self.summary["surface"]["euler_characteristic"])
        return mesh

    def build_initial(self) -> MapField:
        u0 = self.u0
        write_vtk(self.mesh, self.out / "u0.vtk", u0, self.region)
        table = energy_table(u0, self.config.surface)
        self.summary["initial_map"] = table
        energy = table["energy"]
        logger.info("🧭 E(u0) = %.8f (%.4f of the cylinder energy, bubble headroom x%.1f)",
                    energy, table["ratio_to_cylinder"], FOUR_PI / energy if energy else float("inf"))
        self.record("initial_energy_headroom", 10.0 * energy < FOUR_PI, energy)
        self.record("initial_differential", table["max_differential"] <= table["differential_limit"] * (1 + 1e-9),
                    table["max_differential"])
        return u0

    def region_checks(self) -> Dict[str, Any]:
        cfg = self.config.region
        seed = self.config.seed
        logger.info("🧭 Region checks: eps=%.4f, %d arcs", self.region.epsilon, self.region.arc_count)
        reports = {
            "antipodal": antipodal_obstruction_check(self.region, cfg.antipodal_samples, seed),
            "great_circles": great_circle_obstruction_check(self.region, cfg.great_circles, seed,
                                                            step=cfg.trace_step, workers=cfg.workers),
        }
        write_csv(region_check_frame(reports), self.out / "region_checks.csv")
        self.summary["region"] = {name: report.as_dict() for name, report in reports.items()}
        for name, report in reports.items():
            self.record(f"region_{name}", report.passed, report.as_dict().get("min_penetration"))
        return reports

    def sweepout_checks(self) -> Dict[str, Any]:
        cfg = self.config.sweepout
        seed = self.config.seed
        results = {}
        laps = max(1, int(round(2.0 * math.pi / cfg.arc_length)))
        controls = {
            "arc": (great_circle_arc(0.0, cfg.arc_length, cfg.curve_points), cfg.samples),
            "closed_circle": (closed_great_circle(cfg.curve_points * laps), cfg.samples * laps),
        }
        for name, (curve, count) in controls.items():
            radii = np.full(len(curve), cfg.radius)
            points = sample_tube_region(curve, radii, count, seed)
            report = check_sweepout_separation(knn_graph(points, cfg.neighbours), curve, radii,
                                               min_component_size=cfg.min_component_size,
                                               chord_checks=cfg.chord_checks)
            results[name] = report
            write_csv(report.frame(), self.out / f"sweepout_{name}.csv")
        self.summary["sweepout"] = {name: {"passed": r.passed, "failing_index": r.failing_index,
                                           "checked": len(r.checked), "skipped": len(r.skipped)}
                                    for name, r in results.items()}
        self.record("sweepout_arc_separates", results["arc"].passed, results["arc"].failing_index)
        self.record("sweepout_closed_circle_rejected", not results["closed_circle"].passed,
                    results["closed_circle"].failing_index)
        return results

    def run_flow(self, resume: Optional[Path] = None) -> FlowReport:
        mesh, u0 = self.mesh, self.u0
        state = load_checkpoint(resume, mesh) if resume is not None else None
        audit = SnapshotAudit(self.region)
        snapshots = self.out / "snapshots"

        def on_snapshot(snap: Snapshot):
            audit(snap)
            write_vtk(mesh, snapshots / f"step_{snap.step:07d}.vtk", snap.field, self.region)

        try:
            report = run_flow(u0, self.config.flow, self.region, state=state, on_snapshot=on_snapshot)
        except StiffnessError as exc:
            self.summary["stiffness"] = exc.diagnostics
            raise
        report.write_log(self.out / "flow_log.csv")
        write_csv(audit.frame(), self.out / "snapshot_audit.csv")
        save_checkpoint(report.final_state, self.out / "checkpoint.json")

        flow_cfg = self.config.flow
        self.summary["flow"] = {
            "steps": report.steps,
            "converged": report.converged,
            "dt": report.dt,
            "energy_initial": report.initial_energy,
            "energy_final": report.energy,
            "max_tension": report.max_tension,
            "alarms": [str(a) for a in report.alarms],
            "snapshot_margins": report.snapshot_margins(),
            "gradient_check": gradient_check(u0, seed=flow_cfg.seed),
        }
        self.record("converged", report.converged, report.max_tension)
        self.record("energy_monotone", report.energy_is_monotone(), report.energy)
        self.record("no_bubble_alarms", not report.alarms, len(report.alarms))
        self.record("snapshot_equivariance", audit.max_equivariance_error() < flow_cfg.equivariance_tol,
                    audit.max_equivariance_error())
        self.record("snapshot_degree_zero", audit.degrees_constant(0), [row["degree"] for row in audit.rows])
        return report

    def verify(self, field: MapField) -> None:
        flow_cfg = self.config.flow
        report = verify(field, self.region, self.config.surface, initial=self.u0,
                        tension_tol=flow_cfg.tension_tol, equivariance_tol=flow_cfg.equivariance_tol)
        write_text(report.to_text(), self.out / "analysis_report.txt")
        write_csv(report.frame(), self.out / "analysis_checks.csv")
        self.summary["analysis"] = report.quantities
        for name, check in report.checks.items():
            self.record(name, check.passed, check.value)
        self.summary["degree"] = report.checks["degree"].value
        self.summary["energy_final"] = dirichlet_energy(field)

    # --- commands ----------------------------------------------------------

    def run(self) -> int:
        self.prepare_output()
        if self.config.wants("region"):
            self.region_checks()
        if self.config.wants("sweepout"):
            self.sweepout_checks()
        if self.config.wants("flow") or self.config.wants("analysis"):
            self.build_mesh()
            self.build_initial()
            report = self.run_flow()
            self.summary["converged"] = report.converged
            if self.config.wants("analysis"):
                self.verify(report.field)
        return self.finish()

    def build_only(self) -> int:
        self.prepare_output()
        self.build_mesh()
        self.build_initial()
        self.summary["degree_initial"] = map_degree(self.u0).degree
        return self.finish()

    def flow_only(self, resume: Optional[Path] = None) -> int:
        self.prepare_output()
        self.build_mesh()
        self.build_initial()
        report = self.run_flow(resume)
        self.summary["converged"] = report.converged
        return self.finish()

    def verify_only(self, checkpoint: Optional[Path] = None) -> int:
        self.prepare_output()
        checkpoint = checkpoint or self.out / "checkpoint.json"
        state = load_checkpoint(checkpoint, self.mesh)
        self.verify(state.field)
        return self.finish()

    def region_only(self) -> int:
        self.prepare_output()
        self.region_checks()
        return self.finish()

    def sweepout_only(self) -> int:
        self.prepare_output()
        self.sweepout_checks()
        return self.finish()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propeller",
        description="🌀 Propeller Lab - harmonic maps avoiding the propeller region",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python app.py                                   # Full reference run
  python app.py --config propeller.ini run        # Run from a config file
  python app.py --checks region-only              # Region checks only, no flow
  python app.py --resolution 1 build-mesh         # Mesh and u0 only
  python app.py run-flow --resume out/checkpoint.json
  python app.py verify --checkpoint out/checkpoint.json

Environment Variables:
  PROPELLER_CONFIG             - Default run configuration file
  PROPELLER_DEBUG              - Verbose logging (true/false)
  PROPELLER_<SECTION>__<KEY>   - Override any config key, e.g. PROPELLER_FLOW__MAX_STEPS=5000

Exit status: 0 all checks passed, 1 error, 2 a check failed.
        """,
    )
    parser.add_argument("--config", default=os.getenv("PROPELLER_CONFIG"), help="Run configuration file")
    parser.add_argument("--out", default=None, help="Output directory (run.output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for sampled checks (run.seed)")
    parser.add_argument("--resolution", type=int, default=None, help="Mesh resolution level (surface.resolution)")
    parser.add_argument("--checks", default=None, help="Comma list of region,sweepout,flow,analysis or all/region-only")
    parser.add_argument("--max-steps", type=int, default=None, help="Flow step limit (flow.max_steps)")
    parser.add_argument("--debug", action="store_true",
                        default=os.getenv("PROPELLER_DEBUG", "false").lower() == "true", help="Enable debug logging")

    sub = parser.add_subparsers(dest="command")
    sub.add_parser("run", help="Everything the selected checks need (default)")
    sub.add_parser("build-mesh", help="Build the surface and u0, write mesh.obj and u0.vtk")
    flow = sub.add_parser("run-flow", help="Run the heat flow and write the log and checkpoint")
    flow.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")
    check = sub.add_parser("verify", help="Analyse a checkpointed field")
    check.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint file (default OUT/checkpoint.json)")
    sub.add_parser("region-check", help="Closed-geodesic obstruction checks")
    sub.add_parser("sweepout-check", help="Sweep-out separation controls")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "run.output_dir": args.out,
        "run.seed": args.seed,
        "run.checks": args.checks,
        "surface.resolution": args.resolution,
        "flow.max_steps": args.max_steps,
    }


def print_banner(config: RunConfig, command: str):
    s, f = config.surface, config.flow
    print("\n" + "=" * 60)
    print("🌀 Propeller Lab")
    print("=" * 60)
    print(f"🧭 Command: {command}")
    print(f"🍩 Surface: genus {s.genus} ({s.tube_count} tubes), r={s.tube_radius}, R={s.tube_half_height}, "
          f"resolution {s.resolution}")
    print(f"🚧 Region: eps={s.epsilon}, {s.tube_count} removed arcs")
    print(f"🌊 Flow: dt={f.dt}, tension_tol={f.tension_tol:g}, max_steps={f.max_steps}")
    print(f"✔️  Checks: {', '.join(config.checks)}")
    print(f"📁 Output: {config.output_dir}")
    print("=" * 60)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.debug)
    command = args.command or "run"

    try:
        config = load_config(args.config, overrides_from_args(args))
        print_banner(config, command)
        runner = LabRunner(config)
        if command == "build-mesh":
            return runner.build_only()
        if command == "run-flow":
            return runner.flow_only(args.resume)
        if command == "verify":
            return runner.verify_only(args.checkpoint)
        if command == "region-check":
            return runner.region_only()
        if command == "sweepout-check":
            return runner.sweepout_only()
        return runner.run()
    except StiffnessError as exc:
        logger.error("❌ %s", exc)
        for key, value in exc.diagnostics.items():
            logger.error("   %s = %s", key, value)
        return EXIT_ERROR
    except PropellerError as exc:
        logger.error("❌ %s", exc)
        if args.debug:
            logger.exception("Traceback")
        return EXIT_ERROR
    except KeyboardInterrupt:
        logger.info("\n🌙 Interrupted; partial artifacts are kept")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
