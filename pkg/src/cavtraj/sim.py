"""Case presets, single-case and queue runs, and run summaries."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from cavtraj.domain import BoundaryConditions, Scenario, VehicleParams, require_valid, validate_scenario
from cavtraj.lead import LeadProfile, LeadSegment, constant_speed, eval_lead, from_follower_trajectory
from cavtraj.oracle import run_oracle
from cavtraj.stitcher import SolverError, Trajectory, solve_trajectory

log = logging.getLogger(__name__)

HORIZON = 26.0
ZONE_LENGTH = 300.0
V0 = 14.0
LEAD_P0 = 20.0
LEAD_V0 = 11.5

PRESET_IDS = ("case1", "case2", "case3", "lead_free", "case1_accel")


@dataclass(frozen=True)
class CasePreset:
    id: str
    description: str
    scenario: Scenario


def _lead(preset_id: str) -> Optional[LeadProfile]:
    T = HORIZON
    if preset_id == "case1":
        return constant_speed(LEAD_P0, LEAD_V0, 0.0, T)
    if preset_id == "case1_accel":
        return LeadProfile(LEAD_P0, LEAD_V0, (LeadSegment(0.0, T, 0.1, 0.0),))
    if preset_id == "case2":
        # acceleration falls linearly through zero at 5 s, then the lead cruises
        return LeadProfile(LEAD_P0, LEAD_V0, (LeadSegment(0.0, 5.0, 0.05, -0.01), LeadSegment(5.0, T, 0.0, 0.0)))
    if preset_id == "case3":
        # braking that eases off linearly; speed bottoms out at 10 s
        return LeadProfile(LEAD_P0, LEAD_V0, (LeadSegment(0.0, T, -0.5, 0.05),))
    if preset_id == "lead_free":
        return None
    raise KeyError(f"unknown preset {preset_id!r}; choose from {', '.join(PRESET_IDS)}")


_DESCRIPTIONS = {
    "case1": "lead at constant speed",
    "case1_accel": "lead at constant acceleration",
    "case2": "lead with decreasing acceleration, positive at entry",
    "case3": "lead braking with increasing acceleration",
    "lead_free": "no preceding vehicle",
}


def preset(preset_id: str, **overrides) -> CasePreset:
    """A case preset; keyword overrides replace :class:`VehicleParams` fields."""
    lead = _lead(preset_id)
    params = replace(VehicleParams(), **overrides)
    bc = BoundaryConditions(t0=0.0, tf=HORIZON, pf=ZONE_LENGTH, v0=V0)
    return CasePreset(preset_id, _DESCRIPTIONS[preset_id], Scenario(params, bc, lead, name=preset_id))


@dataclass
class SummaryRecord:
    """Outcome of one run; ``status`` is ``optimal``, ``infeasible`` or ``failed``."""

    scenario: Scenario
    arcs: list[dict] = field(default_factory=list)
    junctions: list[dict] = field(default_factory=list)
    total_cost: float = math.nan
    min_margins: dict[str, float] = field(default_factory=dict)
    feasible: bool = False
    status: str = "failed"
    message: str = ""
    terminal_residual: float = math.nan
    oracle: Optional[dict] = None
    solve_seconds: float = 0.0

    @property
    def switching_times(self) -> list[float]:
        return [a["t_enter"] for a in self.arcs[1:]]


def min_margins(traj: Trajectory, dt: float = 1e-3) -> dict[str, float]:
    """Smallest constraint margin over a ``dt`` grid and both sides of each junction."""
    bc = traj.scenario.bc
    n = max(int(math.ceil((bc.tf - bc.t0) / dt)), 1)
    t = np.linspace(bc.t0, bc.tf, n + 1)
    out = {k: float(np.min(m)) for k, m in traj.margins(t).items()}
    jt = np.array([a.t_enter for a in traj.arcs[1:]])
    if jt.size:
        for k, m in traj.margins(jt, "left").items():
            out[k] = min(out[k], float(np.min(m)))
    return out


def summarize(scenario: Scenario, traj: Optional[Trajectory], status: str, message: str = "") -> SummaryRecord:
    rec = SummaryRecord(scenario=scenario, status=status, message=message)
    if traj is None:
        return rec
    rec.arcs = [{"kind": a.kind.value, "t_enter": a.t_enter, "t_exit": a.t_exit} for a in traj.arcs]
    rec.junctions = [
        {"time": j.time, "from_kind": j.from_kind.value, "to_kind": j.to_kind.value,
         "control_jump": j.control_jump, "pi": j.pi}
        for j in traj.junctions
    ]
    rec.total_cost = traj.total_cost
    rec.min_margins = min_margins(traj)
    rec.feasible = status == "optimal"
    rec.terminal_residual = traj.terminal_residual
    return rec


def run_scenario(scenario: Scenario, *, oracle: bool = False, oracle_n: int = 2600):
    """Solve ``scenario``; solver failures are recorded, not raised."""
    require_valid(scenario)
    start = time.perf_counter()
    try:
        traj = solve_trajectory(scenario)
        status, message = traj.status, traj.message
    except SolverError as exc:
        traj = exc.best_effort
        status, message = ("infeasible" if traj is not None else "failed"), str(exc)
    rec = summarize(scenario, traj, status, message)
    rec.solve_seconds = time.perf_counter() - start
    if oracle and traj is not None:
        report, sol = run_oracle(traj, oracle_n)
        rec.oracle = {**report.as_dict(), "status": sol.status}
    return traj, rec


def run_case(case: Union[str, CasePreset], *, oracle: bool = False, oracle_n: int = 2600, **overrides):
    """Run a preset (by id or object); returns ``(trajectory or best effort, summary)``."""
    if isinstance(case, str):
        case = preset(case, **overrides)
    return run_scenario(case.scenario, oracle=oracle, oracle_n=oracle_n)


def run_chain(queue: Sequence[Scenario], *, oracle: bool = False, oracle_n: int = 2600):
    """Solve vehicles in queue order, each following its predecessor's solution.

    The first scenario keeps its own lead (or none).  Every later scenario's
    lead is replaced by the previous vehicle's trajectory, cruising at its
    exit speed once that vehicle has left.  A vehicle whose predecessor has no
    trajectory keeps its own lead.
    """
    results = []
    prev: Optional[Trajectory] = None
    for k, sc in enumerate(queue):
        if k and prev is not None:
            lead = from_follower_trajectory(prev, t_start=sc.bc.t0, t_end=sc.bc.tf, extend=True)
            sc = replace(sc, lead=lead, bc=replace(sc.bc, s0=None))
        try:
            traj, rec = run_scenario(sc, oracle=oracle, oracle_n=oracle_n)
        except ValueError as exc:
            traj, rec = None, SummaryRecord(scenario=sc, status="failed", message=str(exc))
        results.append((traj, rec))
        prev = traj
    return results


def random_scenario(rng: np.random.Generator, *, max_tries: int = 1000) -> Scenario:
    """A random valid scenario with a lead whose motion the follower can match.

    Calibration, horizon, entry speed and a one-to-three-segment lead profile
    are drawn at random; the terminal position is placed behind where the
    lead ends up so that the problem has room to be feasible.
    """
    for _ in range(max_tries):
        prm = VehicleParams(
            xi=rng.uniform(0.8, 1.2), gamma=rng.uniform(1.0, 4.0), rho=rng.uniform(0.8, 1.6),
            u_min=-rng.uniform(1.0, 3.0), u_max=rng.uniform(1.0, 3.0),
            v_min=0.1, v_max=rng.uniform(20.0, 30.0),
        )
        T = rng.uniform(15.0, 35.0)
        v0 = rng.uniform(8.0, 18.0)
        vk = rng.uniform(8.0, 16.0)
        gap = (prm.gamma + prm.rho * v0) / prm.xi + rng.uniform(0.5, 20.0)
        knots = np.concatenate([[0.0], np.sort(rng.uniform(0.0, T, rng.integers(0, 3))), [T]])
        segs = []
        for a, b in zip(knots[:-1], knots[1:]):
            a0, beta = rng.uniform(-0.4, 0.4), rng.uniform(-0.05, 0.05)
            segs.append(LeadSegment(float(a), float(b), a0 - beta * a, beta))
        lead = LeadProfile(gap, vk, tuple(segs))
        pk, vk_end, _ = eval_lead(lead, T)
        room = pk - (prm.gamma + prm.rho * vk_end) / prm.xi
        pf = rng.uniform(0.7, 0.98) * room
        sc = Scenario(prm, BoundaryConditions(0.0, T, pf, v0), lead, name="random")
        if not validate_scenario(sc):
            return sc
    raise RuntimeError("could not draw a valid scenario")


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    rho: float
    status: str
    template: tuple[str, ...]
    switching_times: tuple[float, ...]


def calibration_sweep(preset_id: str, gammas: Sequence[float], rhos: Sequence[float], **overrides) -> list[SweepPoint]:
    """Solve a preset over a grid of standstill distances and time gaps.

    Grid points whose entry headway is already unsafe are kept with status
    ``"invalid"``.
    """
    out = []
    for g in gammas:
        for r in rhos:
            case = preset(preset_id, gamma=float(g), rho=float(r), **overrides)
            if validate_scenario(case.scenario):
                out.append(SweepPoint(float(g), float(r), "invalid", (), ()))
                continue
            _, rec = run_case(case)
            out.append(SweepPoint(float(g), float(r), rec.status, tuple(a["kind"] for a in rec.arcs),
                                  tuple(rec.switching_times)))
    return out
