#!/usr/bin/env python3
"""
Propeller Flow Module
Sphere-constrained harmonic map heat flow on the surface mesh: tension
field, projected explicit Euler steps with energy-monotone step halving,
run monitors, bubble alarms and resumable checkpoints.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat
from tqdm import tqdm

from .errors import CheckpointError, DegenerateProjectionError, FlowBlowUpError, StiffnessError
from .geometry import SurfaceMesh, project_to_sphere
from .initmap import MapField, check_equivariance, dirichlet_energy, vertex_energy_density
from .region import PropellerRegion

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "propeller-checkpoint"
CHECKPOINT_VERSION = 1
MONOTONE_SLACK = 1e-8


class FlowConfig(BaseModel):
    """Step size, stopping rule and monitor settings of a flow run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dt: Union[Literal["auto"], PositiveFloat] = "auto"
    max_steps: int = Field(100_000, ge=0)
    tension_tol: float = Field(1e-4, gt=0.0)
    energy_drop_alarm: float = Field(2.0 * math.pi, gt=0.0)
    concentration_alarm: float = Field(0.25, gt=0.0, le=1.0)
    equivariance_tol: float = Field(1e-9, gt=0.0)
    snapshot_every: int = Field(1000, ge=0)
    monitor_every: int = Field(1, ge=1)
    deterministic_reduction: bool = True
    seed: int = 0
    dt_safety: float = Field(0.9, gt=0.0, le=1.0)
    max_halvings: int = Field(20, ge=0)
    progress: bool = True

    def resolve_dt(self, mesh: SurfaceMesh) -> float:
        if self.dt == "auto":
            return self.dt_safety * mesh.stable_step
        return float(self.dt)


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: float
    energy: float
    max_tension: float
    equivariance_error: float
    min_margin: float
    dt: float = 0.0
    halvings: int = 0
    max_ring_energy_fraction: float = 0.0


LOG_COLUMNS = ["step", "t", "energy", "max_tension", "equivariance_error", "min_margin",
               "dt", "halvings", "max_ring_energy_fraction"]


@dataclass
class FlowState:
    """
    Current field of a flow run.

    ``history`` is shared between a state and the state its step returns;
    the flow has a single writer.
    """

    field: MapField
    t: float
    step: int
    energy: float
    initial_energy: float
    dt: float
    tension: np.ndarray
    history: List[StepRecord] = field(default_factory=list)

    @property
    def max_tension(self) -> float:
        return float(np.max(np.linalg.norm(self.tension, axis=1))) if len(self.tension) else 0.0

    @classmethod
    def start(cls, u0: MapField, config: FlowConfig,
              region: Optional[PropellerRegion] = None) -> "FlowState":
        energy = dirichlet_energy(u0, config.deterministic_reduction)
        state = cls(field=u0, t=0.0, step=0, energy=energy, initial_energy=energy,
                    dt=config.resolve_dt(u0.mesh), tension=tension_field(u0))
        state.history.append(_record(state, config, region, 0))
        return state


@dataclass(frozen=True)
class Snapshot:
    step: int
    t: float
    energy: float
    field: MapField
    min_margin: float
    equivariance_error: float


@dataclass(frozen=True)
class BubbleAlarm:
    step: int
    kind: str
    value: float

    def __str__(self) -> str:
        return f"step {self.step}: {self.kind} ({self.value:.6g})"


@dataclass
class FlowReport:
    field: MapField
    history: List[StepRecord]
    converged: bool
    alarms: List[BubbleAlarm]
    snapshots: List[Snapshot]
    dt: float
    initial_energy: float
    final_state: Optional[FlowState] = None

    @property
    def steps(self) -> int:
        return self.history[-1].step if self.history else 0

    @property
    def energy(self) -> float:
        return self.history[-1].energy

    @property
    def max_tension(self) -> float:
        return self.history[-1].max_tension

    def history_frame(self) -> pd.DataFrame:
        return history_frame(self.history)

    def write_log(self, path: Union[str, Path]) -> Path:
        return write_flow_log(self.history, path)

    def snapshot_margins(self) -> List[float]:
        return [snap.min_margin for snap in self.snapshots]

    def energy_is_monotone(self) -> bool:
        energies = np.array([rec.energy for rec in self.history])
        slack = MONOTONE_SLACK * self.initial_energy
        return bool(np.all(np.diff(energies) <= slack))


def history_frame(history: Sequence[StepRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(rec) for rec in history], columns=LOG_COLUMNS)


def write_flow_log(history: Sequence[StepRecord], path: Union[str, Path]) -> Path:
    """CSV flow log, one row per step, floats written with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history_frame(history).to_csv(path, index=False, float_format="%.17g")
    return path


def tension_field(field: MapField) -> np.ndarray:
    """
    Discrete tension: tangential part of the mass-normalised cotangent Laplacian.

    tau_i = P_{u_i}(-(M^-1 L u)_i) with P_q = I - q q^T.
    """
    mesh = field.mesh
    u = field.values
    lap = -(mesh.stiffness @ u) / mesh.masses[:, None]
    radial = np.einsum("ij,ij->i", lap, u)
    return lap - radial[:, None] * u


def _record(state: FlowState, config: FlowConfig, region: Optional[PropellerRegion],
            halvings: int) -> StepRecord:
    monitor = state.step % config.monitor_every == 0
    equivariance = check_equivariance(state.field) if monitor else float("nan")
    if region is not None and monitor:
        margin = float(np.min(region.margin(state.field.values)))
    else:
        margin = float("nan")
    if monitor and state.energy > 0.0:
        ring = state.field.mesh.two_ring @ vertex_energy_density(state.field)
        concentration = float(np.max(ring) / state.energy)
    else:
        concentration = 0.0 if monitor else float("nan")
    return StepRecord(step=state.step, t=state.t, energy=state.energy, max_tension=state.max_tension,
                      equivariance_error=equivariance, min_margin=margin, dt=state.dt if state.step else 0.0,
                      halvings=halvings, max_ring_energy_fraction=concentration)


def flow_step(state: FlowState, config: FlowConfig,
              region: Optional[PropellerRegion] = None) -> FlowState:
    """
    One projected Euler step u <- (u + dt tau)/|u + dt tau|.

    A step that raises the energy by more than 1e-8 E(u0) is retried with
    half the time step; the reduced step is kept for later steps.
    """
    mesh = state.field.mesh
    u = state.field.values
    tau = state.tension
    dt = state.dt
    slack = MONOTONE_SLACK * state.initial_energy

    for halvings in range(config.max_halvings + 1):
        try:
            values = project_to_sphere(u + dt * tau)
        except DegenerateProjectionError as exc:
            raise FlowBlowUpError(f"flow blew up at step {state.step + 1} (dt={dt:.3e}): {exc}") from exc
        candidate = MapField(values, mesh)
        energy = dirichlet_energy(candidate, config.deterministic_reduction)
        if energy <= state.energy + slack:
            break
        logger.debug("energy rose %.3e -> %.3e at step %d, halving dt to %.3e",
                     state.energy, energy, state.step + 1, 0.5 * dt)
        dt *= 0.5
    else:
        raise StiffnessError(
            f"energy kept increasing after {config.max_halvings} halvings at step {state.step + 1}",
            diagnostics={
                "step": state.step + 1,
                "t": state.t,
                "dt_final": dt,
                "energy_before": state.energy,
                "energy_after": energy,
                "max_tension": state.max_tension,
                "max_dt_tension": float(dt * state.max_tension),
            },
        )
    if halvings:
        logger.warning("⚠️  Step %d needed %d dt halving(s); dt is now %.3e", state.step + 1, halvings, dt)

    nxt = FlowState(field=candidate, t=state.t + dt, step=state.step + 1, energy=energy,
                    initial_energy=state.initial_energy, dt=dt, tension=tension_field(candidate),
                    history=state.history)
    nxt.history.append(_record(nxt, config, region, halvings))
    return nxt


def run_flow(u0: MapField, config: FlowConfig, region: Optional[PropellerRegion] = None,
             state: Optional[FlowState] = None,
             on_snapshot: Optional[Callable[[Snapshot], None]] = None) -> FlowReport:
    """
    Flow until the sup-norm of the tension drops below ``tension_tol``.

    Non-convergence within ``max_steps`` is reported, not raised. Pass a
    loaded ``state`` to resume a checkpointed run; ``max_steps`` counts
    from the original start.
    """
    if state is None:
        state = FlowState.start(u0, config, region)
    mesh = state.field.mesh
    bound = state.dt * np.max(_row_sums(mesh) / mesh.masses)
    logger.info("🌊 Flow: V=%d, dt=%.4e (dt*max|L|/m = %.3f), tension_tol=%.1e, max_steps=%d, E0=%.8f",
                mesh.n_vertices, state.dt, bound, config.tension_tol, config.max_steps, state.initial_energy)
    if config.dt == "auto" and bound > 1.0 + 1e-12:
        logger.warning("⚠️  Resolved dt exceeds the explicit stability bound")

    snapshots: List[Snapshot] = []

    def take_snapshot(current: FlowState):
        margin = float(np.min(region.margin(current.field.values))) if region is not None else float("nan")
        snap = Snapshot(step=current.step, t=current.t, energy=current.energy, field=current.field,
                        min_margin=margin, equivariance_error=check_equivariance(current.field))
        snapshots.append(snap)
        if on_snapshot is not None:
            on_snapshot(snap)

    take_snapshot(state)
    converged = state.max_tension < config.tension_tol
    with tqdm(total=config.max_steps, initial=min(state.step, config.max_steps), desc="🌊 Flow",
              unit="step", disable=not config.progress) as bar:
        while not converged and state.step < config.max_steps:
            state = flow_step(state, config, region)
            converged = state.max_tension < config.tension_tol
            if config.snapshot_every and state.step % config.snapshot_every == 0:
                take_snapshot(state)
            bar.update(1)
            if state.step % 100 == 0:
                bar.set_postfix(E=f"{state.energy:.6f}", tau=f"{state.max_tension:.2e}")
    if not snapshots or snapshots[-1].step != state.step:
        take_snapshot(state)

    alarms = detect_bubble(state.history, config)
    report = FlowReport(field=state.field, history=state.history, converged=converged, alarms=alarms,
                        snapshots=snapshots, dt=state.dt, initial_energy=state.initial_energy,
                        final_state=state)
    if converged:
        logger.info("✅ Converged after %d steps: E=%.10f, max|tau|=%.3e", state.step, state.energy,
                    state.max_tension)
    else:
        logger.warning("⚠️  Not converged after %d steps: max|tau|=%.3e", state.step, state.max_tension)
    for alarm in alarms:
        logger.warning("🫧 Bubble alarm at %s", alarm)
    return report


def _row_sums(mesh: SurfaceMesh) -> np.ndarray:
    rows = np.zeros(mesh.n_vertices)
    w = np.abs(mesh.cotan_weights)
    np.add.at(rows, mesh.edges[:, 0], w)
    np.add.at(rows, mesh.edges[:, 1], w)
    return rows


def detect_bubble(history: Sequence[StepRecord], config: FlowConfig) -> List[BubbleAlarm]:
    """
    Flag single-step energy drops of at least ``energy_drop_alarm`` and steps
    where a vertex 2-ring holds more than ``concentration_alarm`` of the energy.
    """
    if not history:
        raise ValueError("history is empty")
    alarms = []
    for prev, cur in zip(history[:-1], history[1:]):
        drop = prev.energy - cur.energy
        if drop >= config.energy_drop_alarm:
            alarms.append(BubbleAlarm(cur.step, "energy drop", drop))
    for rec in history:
        fraction = rec.max_ring_energy_fraction
        if fraction == fraction and fraction > config.concentration_alarm:
            alarms.append(BubbleAlarm(rec.step, "energy concentration", fraction))
    alarms.sort(key=lambda a: a.step)
    return alarms


def gradient_check(field: MapField, seed: int = 0, h: float = 1e-5) -> Dict[str, float]:
    """
    Central finite difference of the energy along a random tangent direction
    against the mass-weighted pairing -sum_i m_i <tau_i, xi_i>.
    """
    rng = np.random.default_rng(seed)
    u = field.values
    xi = rng.normal(size=u.shape)
    xi -= np.einsum("ij,ij->i", xi, u)[:, None] * u
    analytic = -float(np.sum(field.mesh.masses * np.einsum("ij,ij->i", tension_field(field), xi)))
    plus = dirichlet_energy(field.with_values(project_to_sphere(u + h * xi)))
    minus = dirichlet_energy(field.with_values(project_to_sphere(u - h * xi)))
    numeric = (plus - minus) / (2.0 * h)
    return {
        "analytic": analytic,
        "finite_difference": numeric,
        "relative_error": abs(numeric - analytic) / max(abs(analytic), 1e-300),
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: FlowState, path: Union[str, Path]) -> Path:
    """Write a versioned JSON checkpoint with the full field and history."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh = state.field.mesh
    payload: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vertices": mesh.n_vertices,
        "params": mesh.params.model_dump() if mesh.params is not None else None,
        "step": state.step,
        "t": state.t,
        "dt": state.dt,
        "energy": state.energy,
        "initial_energy": state.initial_energy,
        "values": state.field.values.tolist(),
        "history": [asdict(rec) for rec in state.history],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    logger.info("💾 Saved checkpoint at step %d to %s", state.step, path)
    return path


def load_checkpoint(path: Union[str, Path], mesh: SurfaceMesh) -> FlowState:
    """Restore a flow state on ``mesh``, which must match the saved one."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a propeller checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    if payload.get("vertices") != mesh.n_vertices:
        raise CheckpointError(f"checkpoint has {payload.get('vertices')} vertices, mesh has {mesh.n_vertices}")
    if mesh.params is not None and payload.get("params") not in (None, mesh.params.model_dump()):
        raise CheckpointError("checkpoint was written for different surface parameters")

    field = MapField(np.array(payload["values"], dtype=float), mesh)
    history = [StepRecord(**rec) for rec in payload.get("history", [])]
    state = FlowState(field=field, t=float(payload["t"]), step=int(payload["step"]),
                      energy=float(payload["energy"]), initial_energy=float(payload["initial_energy"]),
                      dt=float(payload["dt"]), tension=tension_field(field), history=history)
    logger.info("📂 Loaded checkpoint at step %d from %s", state.step, path)
    return state
