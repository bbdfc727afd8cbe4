#!/usr/bin/env python3
"""
Propeller Errors Module
Exception hierarchy shared by the lab modules. Library code raises these;
only the command line turns them into exit codes.
"""

from typing import Any, Dict, List, Optional


class PropellerError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(PropellerError):
    """Run configuration could not be parsed or validated."""

    def __init__(self, message: str, problems: Optional[List[Dict[str, Any]]] = None,
                 source: Optional[str] = None):
        self.problems = problems or []
        self.source = source
        details = []
        for problem in self.problems:
            where = f"line {problem['line']}: " if problem.get("line") else ""
            details.append(f"  {where}{problem['field']}: {problem['message']}")
        text = message if not details else message + "\n" + "\n".join(details)
        super().__init__(text)


class SurfaceConstructionError(PropellerError, ValueError):
    """Surface parameters or the built mesh violate a construction constraint."""


class DegenerateProjectionError(PropellerError, ValueError):
    """A vector too close to zero was projected onto the sphere."""


class MapFieldError(PropellerError, ValueError):
    """A map field does not fit its mesh (wrong size, non-unit values)."""


class FlowBlowUpError(PropellerError):
    """The flow produced a state that cannot be projected back to the sphere."""


class StiffnessError(PropellerError):
    """Step halving could not restore energy monotonicity."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class DegreeUnreliableError(PropellerError):
    """Signed image area is too far from a multiple of 4*pi to round."""

    def __init__(self, message: str, raw_degree: float):
        self.raw_degree = raw_degree
        super().__init__(message)


class EquatorPointsError(PropellerError):
    """Waist images do not meet the Equator the way an equivariant map must."""


class CourantLebesgueDomainError(PropellerError, ValueError):
    """Courant-Lebesgue bound requested outside 0 < delta < 1 or with C < 0."""


class ResolutionError(PropellerError):
    """The mesh is too coarse for the requested discrete check."""


class SampleGraphError(PropellerError, ValueError):
    """Sweep-out sample graph or curve violates the checker's preconditions."""


class CheckpointError(PropellerError):
    """Checkpoint file is missing, malformed or belongs to another mesh."""
