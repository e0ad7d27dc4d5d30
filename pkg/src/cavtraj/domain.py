"""Core value types, parameter validation and the safe-distance law.

All quantities are SI floats: meters, seconds, m/s and m/s^2.  Positions are
measured from the control-zone entry along the lane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Optional

import numpy as np

if TYPE_CHECKING:
    from cavtraj.lead import LeadProfile


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class ScenarioError(ValueError):
    """Raised when a scenario fails validation; carries the violation list."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class Violation(NamedTuple):
    field: str
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class VehicleParams:
    """Physical and constraint parameters of one vehicle.

    Attributes:
        xi: dimensionless reaction constant scaling the headway state.
        gamma: standstill distance (m).
        rho: minimum time gap (s).
        u_min, u_max: acceleration bounds (m/s^2).
        v_min, v_max: speed bounds (m/s).
    """

    xi: float = 1.0
    gamma: float = 1.5
    rho: float = 1.2
    u_min: float = -1.0
    u_max: float = 1.0
    v_min: float = 0.1
    v_max: float = 25.0

    @property
    def k(self) -> float:
        """Relaxation rate xi/rho of speed on a safety-constrained arc (1/s)."""
        return self.xi / self.rho


@dataclass(frozen=True)
class VehicleState:
    t: float
    p: float
    v: float
    s: Optional[float] = None


@dataclass(frozen=True)
class BoundaryConditions:
    """Entry data and the assigned exit time/position of one vehicle.

    ``s0`` is the entry headway xi*(p_k - p0); leave it ``None`` to have it
    derived from the lead profile.
    """

    t0: float
    tf: float
    pf: float
    v0: float
    p0: float = 0.0
    s0: Optional[float] = None

    @property
    def horizon(self) -> float:
        return self.tf - self.t0


@dataclass(frozen=True)
class Scenario:
    params: VehicleParams
    bc: BoundaryConditions
    lead: Optional[LeadProfile] = None
    name: str = "scenario"

    @property
    def s0(self) -> Optional[float]:
        """Entry headway, taken from ``bc.s0`` or derived from the lead."""
        if self.bc.s0 is not None:
            return self.bc.s0
        if self.lead is None:
            return None
        return self.params.xi * (self.lead.p_init - self.bc.p0)

    def without_lead(self) -> Scenario:
        bc = BoundaryConditions(
            t0=self.bc.t0, tf=self.bc.tf, pf=self.bc.pf, v0=self.bc.v0, p0=self.bc.p0
        )
        return Scenario(params=self.params, bc=bc, lead=None, name=self.name)


def safe_distance(params: VehicleParams, v):
    """Minimum safe gap gamma + rho*v for speed ``v`` (scalar or array)."""
    if np.any(np.asarray(v) < 0):
        raise DomainError(f"speed must be nonnegative, got {v!r}")
    return params.gamma + params.rho * v


def _finite(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and math.isfinite(x)


def _check_params(p: VehicleParams) -> list[Violation]:
    out = []
    for name in ("xi", "gamma", "rho", "u_min", "u_max", "v_min", "v_max"):
        if not _finite(getattr(p, name)):
            out.append(Violation(name, f"{name} must be a finite number"))
    if out:
        return out
    if not p.u_min < 0:
        out.append(Violation("u_min", "u_min must be negative"))
    if not p.u_max > 0:
        out.append(Violation("u_max", "u_max must be positive"))
    if not p.v_min >= 0:
        out.append(Violation("v_min", "v_min must be nonnegative"))
    if not p.v_min < p.v_max:
        out.append(Violation("v_max", "v_max must exceed v_min"))
    if not p.gamma > 0:
        out.append(Violation("gamma", "gamma must be positive"))
    if not p.rho > 0:
        out.append(Violation("rho", "rho must be positive"))
    if not p.xi > 0:
        out.append(Violation("xi", "xi must be positive"))
    return out


def validate_scenario(s: Scenario) -> list[Violation]:
    """Check every invariant of ``s``; an empty list means the scenario is valid.

    Never raises: malformed values show up as violations naming the field.
    """
    out = _check_params(s.params)
    bc = s.bc
    for name in ("t0", "tf", "pf", "v0", "p0"):
        if not _finite(getattr(bc, name)):
            out.append(Violation(name, f"{name} must be a finite number"))
    if out:
        return out
    p = s.params
    if not bc.tf > bc.t0:
        out.append(Violation("tf", "tf must be later than t0"))
    if not bc.pf > bc.p0:
        out.append(Violation("pf", "pf must exceed p0"))
    if not p.v_min <= bc.v0 <= p.v_max:
        out.append(Violation("v0", "v0 must lie within [v_min, v_max]"))
    if bc.tf > bc.t0 and bc.pf > bc.p0:
        horizon, dist = bc.tf - bc.t0, bc.pf - bc.p0
        if p.v_max * horizon <= dist or p.v_min * horizon >= dist:
            out.append(Violation("pf", "terminal position unreachable"))

    if s.lead is None:
        if bc.s0 is not None:
            out.append(Violation("s0", "s0 given without a lead vehicle"))
        return out

    from cavtraj.lead import lead_violations

    out.extend(lead_violations(s.lead, bc.t0, bc.tf))
    if out:
        return out
    derived = p.xi * (s.lead.p_init - bc.p0)
    if bc.s0 is not None and not math.isclose(bc.s0, derived, rel_tol=1e-9, abs_tol=1e-9):
        out.append(Violation("s0", "s0 must equal xi*(lead p_init - p0)"))
    if derived < p.gamma + p.rho * max(bc.v0, 0.0):
        out.append(Violation("s0", "initial headway below safe distance"))
    return out


def require_valid(s: Scenario) -> Scenario:
    """Return ``s`` unchanged or raise :class:`ScenarioError`."""
    violations = validate_scenario(s)
    if violations:
        raise ScenarioError(violations)
    return s
