#!/usr/bin/env python3
"""
Propeller Config Module
Run configuration: flat ``section.key = value`` run files, PROPELLER_*
environment overrides and command-line overrides, validated by pydantic.
"""

import logging
import math
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .flow import FlowConfig
from .geometry import SurfaceParams
from .region import PropellerRegion

logger = logging.getLogger(__name__)

ENV_PREFIX = "PROPELLER_"
ENV_SEPARATOR = "__"
CHECK_NAMES = ("region", "sweepout", "flow", "analysis")
CHECK_ALIASES = {
    "all": list(CHECK_NAMES),
    "region-only": ["region", "sweepout"],
}
_KEY_LINE = re.compile(r"^\s*(?:export\s+)?([A-Za-z_][\w.]*)\s*=")


class RegionConfig(BaseModel):
    """Arc layout and the settings of the closed-geodesic checks."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arc_phase: float = 0.0
    antipodal_samples: int = Field(10_000, ge=1)
    great_circles: int = Field(10_000, ge=1)
    trace_step: float = Field(1e-3, gt=0.0, lt=math.pi)
    workers: int = Field(1, ge=1)


class SweepoutConfig(BaseModel):
    """Positive and negative sweep-out controls."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arc_length: float = Field(math.pi / 2.0, gt=0.0, lt=2.0 * math.pi)
    curve_points: int = Field(48, ge=8)
    radius: float = Field(0.1, gt=0.0, lt=math.pi / 2.0)
    samples: int = Field(4000, ge=10)
    neighbours: int = Field(8, ge=2)
    min_component_size: int = Field(3, ge=1)
    chord_checks: int = Field(5, ge=1)


class RunSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    output_dir: Path = Path("propeller_output")
    checks: List[str] = Field(default_factory=lambda: list(CHECK_NAMES))
    seed: int = 0

    @field_validator("checks", mode="before")
    @classmethod
    def _expand_checks(cls, value: Union[str, List[str]]) -> List[str]:
        return expand_checks(value)


class RunConfig(BaseModel):
    """Everything a lab run needs, one nested model per section."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    surface: SurfaceParams = Field(default_factory=SurfaceParams)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    region: RegionConfig = Field(default_factory=RegionConfig)
    sweepout: SweepoutConfig = Field(default_factory=SweepoutConfig)
    run: RunSettings = Field(default_factory=RunSettings)

    @property
    def output_dir(self) -> Path:
        return self.run.output_dir

    @property
    def checks(self) -> List[str]:
        return list(self.run.checks)

    @property
    def seed(self) -> int:
        return self.run.seed

    def wants(self, check: str) -> bool:
        return check in self.run.checks

    def propeller_region(self) -> PropellerRegion:
        return PropellerRegion(epsilon=self.surface.epsilon, arc_count=self.surface.tube_count,
                               arc_phase=self.region.arc_phase)

    def flat(self) -> Dict[str, Any]:
        """Dotted key/value view, as written to the run summary."""
        flat = {}
        for section, values in self.model_dump(mode="json").items():
            for key, value in values.items():
                flat[f"{section}.{key}"] = value
        return flat


def expand_checks(value: Union[str, List[str], None]) -> List[str]:
    if value is None:
        return list(CHECK_NAMES)
    items = value.split(",") if isinstance(value, str) else list(value)
    names: List[str] = []
    for item in (str(i).strip() for i in items):
        if not item:
            continue
        expanded = CHECK_ALIASES.get(item, [item])
        for name in expanded:
            if name not in CHECK_NAMES:
                raise ValueError(f"unknown check '{name}' (choose from {', '.join(CHECK_NAMES)}, "
                                 f"{', '.join(CHECK_ALIASES)})")
            if name not in names:
                names.append(name)
    if not names:
        raise ValueError("no checks selected")
    return names


def _key_lines(path: Path) -> Dict[str, int]:
    lines = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            match = _KEY_LINE.match(line)
            if match:
                lines[match.group(1)] = number
    return lines


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """PROPELLER_<SECTION>__<KEY> variables as dotted keys."""
    environ = os.environ if environ is None else environ
    found = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or ENV_SEPARATOR not in name:
            continue
        section, _, key = name[len(ENV_PREFIX):].partition(ENV_SEPARATOR)
        found[f"{section.lower()}.{key.lower()}"] = value
    return found


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        section, dot, name = key.partition(".")
        if not dot:
            nested[key] = value
            continue
        bucket = nested.setdefault(section, {})
        if not isinstance(bucket, dict):
            nested[section] = bucket = {}
        bucket[name] = value
    return nested


def _line_of(field: str, lines: Dict[str, int]) -> Optional[int]:
    if field in lines:
        return lines[field]
    prefixed = [line for key, line in lines.items() if key.startswith(field + ".")]
    return min(prefixed) if prefixed else None


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Merge run file, environment and explicit overrides (in that order of
    increasing precedence) and validate the result.
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    source = None
    if path is not None:
        path = Path(path)
        source = str(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", source=source)
        raw = dotenv_values(path)
        lines = _key_lines(path)
        problems = [{"field": key, "line": lines.get(key), "message": "missing value"}
                    for key, value in raw.items() if value is None]
        if problems:
            raise ConfigError(f"invalid configuration in {path}", problems, source)
        values.update(raw)

    values.update(environment_overrides(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        config = RunConfig.model_validate(_nest(values))
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            field = ".".join(str(part) for part in err["loc"]) or "<root>"
            problems.append({"field": field, "line": _line_of(field, lines), "message": err["msg"]})
        raise ConfigError(f"invalid configuration{f' in {source}' if source else ''}", problems, source) from exc

    logger.debug("Loaded configuration from %s with %d keys", source or "defaults", len(values))
    return config
