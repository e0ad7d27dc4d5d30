"""Arc piecing: detect constraint violations, extend the arc template and
solve the junction equations for switching times and integration constants.

A template is an ordered tuple of :class:`ArcKind`.  Its unknowns are

* ``lambda_p`` (one constant for the whole horizon),
* ``lambda_v`` at the entry of every arc that is not a safety arc,
* every switching time,
* one junction multiplier per entry into a safety or speed-saturated arc.

Safety arcs carry no costate unknown of their own: their ``lambda_v`` is
integrated backwards from the exit, where the safety multiplier vanishes
(or where ``lambda_v(tf) = 0`` for a terminal safety arc).  ``lambda_s`` is
zero after the last safety entry and drops by the junction multiplier at
each safety entry going backwards.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from cavtraj.arcs import (
    Arc,
    ArcKind,
    CostateRecord,
    arc_cost,
    constraint_multiplier,
    eval_arc,
    safety_arc,
    safety_y,
    saturated_arc,
    solve_terminal_unconstrained,
    unconstrained_arc,
)
from cavtraj.domain import Scenario, require_valid
from cavtraj.lead import eval_lead

log = logging.getLogger(__name__)

U, S = ArcKind.UNCONSTRAINED, ArcKind.SAFETY

GRID_DT = 1e-3
BISECT_TOL = 1e-9
DETECT_TOL = 1e-7
NEWTON_TOL = 1e-9
MAX_EXTENSIONS = 8
RISE_TOL = 1e-8
MIN_STEP = 2.0 ** -12
MIN_ARC = 1e-6

# earlier in the list wins when violations fall in the same grid window
PRIORITY = ("safety", "u_min", "u_max", "v_min", "v_max")


class SolverError(RuntimeError):
    """The arc-piecing procedure failed; ``best_effort`` holds the last trajectory, if any."""

    def __init__(self, message: str, best_effort: Optional[Trajectory] = None, residual: float = math.nan):
        super().__init__(message)
        self.best_effort = best_effort
        self.residual = residual


@dataclass(frozen=True)
class JunctionRecord:
    time: float
    from_kind: ArcKind
    to_kind: ArcKind
    control_jump: float
    pi: Optional[float] = None


@dataclass(frozen=True)
class ViolationEvent:
    time: float
    constraint: str
    slope: float
    arc_index: int = 0
    window_end: float = math.nan
    t_worst: float = math.nan


@dataclass(frozen=True)
class Trajectory:
    """Arcs tiling ``[t0, tf]`` plus junction records.

    ``status`` is ``"optimal"`` for a violation-free solve and ``"infeasible"``
    for the best-effort trajectory returned when the terminal position cannot
    be met; ``terminal_residual`` is then ``p(tf) - pf``.
    """

    scenario: Scenario
    arcs: tuple[Arc, ...]
    junctions: tuple[JunctionRecord, ...] = ()
    total_cost: float = 0.0
    status: str = "optimal"
    message: str = ""
    terminal_residual: float = 0.0

    @property
    def t0(self) -> float:
        return self.arcs[0].t_enter

    @property
    def tf(self) -> float:
        return self.arcs[-1].t_exit

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"

    @property
    def template(self) -> tuple[ArcKind, ...]:
        return tuple(a.kind for a in self.arcs)

    def arc_index(self, t, side: str = "right") -> np.ndarray:
        starts = np.array([a.t_enter for a in self.arcs])
        idx = np.searchsorted(starts, np.asarray(t, dtype=float), side=side) - 1
        return np.clip(idx, 0, len(self.arcs) - 1)

    def eval(self, t, side: str = "right"):
        """(p, v, u) at ``t``; at a junction ``side="left"`` gives the t- values."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = self.arc_index(t, side)
        p, v, u = np.empty_like(t), np.empty_like(t), np.empty_like(t)
        sc = self.scenario
        for i in np.unique(idx):
            m = idx == i
            p[m], v[m], u[m] = eval_arc(self.arcs[i], sc.params, sc.lead, t[m])
        if scalar:
            return float(p[0]), float(v[0]), float(u[0])
        return p, v, u

    def margins(self, t, side: str = "right") -> dict[str, np.ndarray]:
        """Constraint margins (nonnegative when satisfied) at ``t``."""
        prm = self.scenario.params
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, u = self.eval(t, side)
        out = {
            "u_min": u - prm.u_min,
            "u_max": prm.u_max - u,
            "v_min": v - prm.v_min,
            "v_max": prm.v_max - v,
        }
        if self.scenario.lead is not None:
            pk, _, _ = eval_lead(self.scenario.lead, t)
            out["safety"] = prm.xi * (pk - p) - (prm.gamma + prm.rho * v)
        return out


# ---------------------------------------------------------------------------
# violation detection


def _arc_margins(arc: Arc, scenario: Scenario, t: np.ndarray) -> dict[str, np.ndarray]:
    prm, lead = scenario.params, scenario.lead
    p, v, u = eval_arc(arc, prm, lead, t)
    out = {}
    if not arc.kind.is_control_sat:
        out["u_min"] = u - prm.u_min
        out["u_max"] = prm.u_max - u
    if not arc.kind.is_speed_sat:
        out["v_min"] = v - prm.v_min
        out["v_max"] = prm.v_max - v
    if lead is not None and arc.kind is not S:
        pk, _, _ = eval_lead(lead, t)
        out["safety"] = prm.xi * (pk - p) - (prm.gamma + prm.rho * v)
    return out


def _grid(a: float, b: float, dt: float) -> np.ndarray:
    n = max(int(math.ceil((b - a) / dt - 1e-9)), 1)
    t = a + dt * np.arange(n + 1)
    t[-1] = b
    return t


def detect_first_violation(
    arcs: Sequence[Arc],
    scenario: Scenario,
    dt: float = GRID_DT,
    tol: float = DETECT_TOL,
) -> Optional[ViolationEvent]:
    """Earliest constraint violation of ``arcs``, refined by bisection.

    Margins a given arc enforces by construction (its own saturation or the
    safety gap on a safety arc) are not scanned on that arc.
    """
    for i, arc in enumerate(arcs):
        t = _grid(arc.t_enter, arc.t_exit, dt)
        margins = _arc_margins(arc, scenario, t)
        hits = {}
        for name, m in margins.items():
            bad = np.flatnonzero(m < -tol)
            if bad.size:
                hits[name] = int(bad[0])
        if not hits:
            continue
        first = min(hits.values())
        # every constraint breaking inside the same grid window competes on priority
        name = min((n for n, j in hits.items() if j <= first + 1), key=PRIORITY.index)
        j = hits[name]

        def f(tt, name=name):
            return float(_arc_margins(arc, scenario, np.array([tt]))[name][0])

        if j == 0:
            t_hit = arc.t_enter
        else:
            lo, hi = t[j - 1], t[j]
            while hi - lo > BISECT_TOL:
                mid = 0.5 * (lo + hi)
                if f(mid) < 0:
                    hi = mid
                else:
                    lo = mid
            t_hit = hi
        m = margins[name]
        ok_after = np.flatnonzero(m[j:] >= 0)
        window_end = float(t[j + ok_after[0]]) if ok_after.size else arc.t_exit
        stop = j + (ok_after[0] if ok_after.size else len(m) - j)
        t_worst = float(t[j + int(np.argmin(m[j:stop]))])
        h = 1e-6
        slope = (f(min(t_hit + h, arc.t_exit)) - f(max(t_hit - h, arc.t_enter))) / (2 * h)
        return ViolationEvent(float(t_hit), name, slope, i, window_end, t_worst)
    return None


def detect_multiplier_sign_error(
    traj: Trajectory,
    dt: float = GRID_DT,
    tol: float = DETECT_TOL,
) -> Optional[ViolationEvent]:
    """First stretch where a constrained arc breaks a multiplier sign condition.

    The problem is convex, so a stationary arc sequence is optimal exactly
    when every multiplier has the right sign: nonnegative on every
    constrained arc and at every junction, and in addition nonincreasing on
    state-constrained arcs (its negated rate is the multiplier of the
    directly adjoined constraint).  A failing stretch marks a constraint held
    active where the optimum leaves it.
    """
    sc = traj.scenario
    last = traj.arcs[-1]
    if last.kind.is_control_sat:
        # lambda_v(tf) = 0 leaves the bound multiplier at -|bound| at tf
        return ViolationEvent(last.t_exit, "multiplier", 0.0, len(traj.arcs) - 1, last.t_exit)
    for i, arc in enumerate(traj.arcs):
        if arc.kind is U:
            continue
        if arc.costates.pi is not None and arc.costates.pi < -tol:
            return ViolationEvent(arc.t_enter, "multiplier", 0.0, i, arc.t_enter)
        t = _grid(arc.t_enter, arc.t_exit, dt)
        mu = constraint_multiplier(arc, sc.params, sc.lead, t)
        bad = np.flatnonzero(mu < -tol)
        if bad.size:
            j = int(bad[0])
            ok_after = np.flatnonzero(mu[j:] >= 0)
            window_end = float(t[j + ok_after[0]]) if ok_after.size else arc.t_exit
            return ViolationEvent(float(t[j]), "multiplier", 0.0, i, window_end)
        if arc.kind.is_state_constrained and len(t) > 1:
            rise = np.diff(mu)
            up = np.flatnonzero(rise > RISE_TOL)
            if up.size:
                j = int(up[0])
                flat = np.flatnonzero(rise[j:] <= 0)
                end = j + int(flat[0]) if flat.size else len(t) - 1
                return ViolationEvent(float(t[j]), "multiplier", float(rise[j] / (t[j + 1] - t[j])),
                                      i, float(t[end]))
    return None


# ---------------------------------------------------------------------------
# junction system


def _jump_sign(kind: ArcKind) -> float:
    # d N / d v for the interior-point constraint at the entry of ``kind``
    return {ArcKind.V_MAX: 1.0, ArcKind.V_MIN: -1.0}.get(kind, 0.0)


@dataclass
class _Layout:
    template: tuple[ArcKind, ...]
    L: dict[int, int] = field(default_factory=dict)
    tau: dict[int, int] = field(default_factory=dict)
    pi: dict[int, int] = field(default_factory=dict)
    size: int = 0

    @classmethod
    def build(cls, template: Sequence[ArcKind]) -> _Layout:
        lay = cls(tuple(template))
        n = 1  # slot 0 is lambda_p
        for i, kind in enumerate(lay.template):
            if kind is not S:
                lay.L[i] = n
                n += 1
        for j in range(1, len(lay.template)):
            lay.tau[j] = n
            n += 1
        for j in range(1, len(lay.template)):
            if lay.template[j].is_state_constrained:
                lay.pi[j] = n
                n += 1
        lay.size = n
        return lay


def check_template(template: Sequence[ArcKind]) -> None:
    """Reject arc orderings the junction conditions do not cover."""
    if not template:
        raise ValueError("empty template")
    for prev, nxt in zip(template, template[1:]):
        if prev is nxt:
            raise ValueError(f"consecutive {prev.value} arcs")
        if nxt.is_control_sat and (prev.is_speed_sat or prev.is_control_sat):
            raise ValueError(f"{prev.value} -> {nxt.value} junction is not supported")
    if template[0] is S or template[0].is_speed_sat:
        raise ValueError("a template must start with an unconstrained or control-saturated arc")


@dataclass
class _Built:
    arcs: list[Arc]
    lam_enter: list[float]
    lam_exit: list[float]
    lam_s: list[float]
    sigma: list[float]
    residual: np.ndarray


class JunctionSystem:
    """Residual map of one arc template for one scenario.

    With ``free_terminal=True`` the terminal position condition is replaced
    by ``lambda_p = 0`` (terminal position left free); this is the
    relaxation used for best-effort trajectories.
    """

    def __init__(self, template: Sequence[ArcKind], scenario: Scenario, free_terminal: bool = False):
        check_template(template)
        self.template = tuple(template)
        self.scenario = scenario
        self.free_terminal = free_terminal
        self.layout = _Layout.build(self.template)

    @property
    def size(self) -> int:
        return self.layout.size

    def taus(self, x: np.ndarray) -> np.ndarray:
        bc = self.scenario.bc
        inner = [x[self.layout.tau[j]] for j in range(1, len(self.template))]
        return np.array([bc.t0, *inner, bc.tf])

    def ordered(self, x: np.ndarray) -> bool:
        return bool(np.all(np.diff(self.taus(x)) > MIN_ARC))

    def build(self, x: np.ndarray) -> _Built:
        sc, prm, lead, bc = self.scenario, self.scenario.params, self.scenario.lead, self.scenario.bc
        lay, tpl = self.layout, self.template
        m = len(tpl)
        taus = self.taus(x)
        a = x[0]
        pis = {j: x[i] for j, i in lay.pi.items()}

        lam_s = [0.0] * m
        acc = 0.0
        for i in range(m - 1, -1, -1):
            lam_s[i] = acc
            if i > 0 and tpl[i] is S:
                acc -= pis[i]
        sigma = [a - prm.xi * ls for ls in lam_s]

        arcs: list[Arc] = []
        p, v = bc.p0, bc.v0
        for i, kind in enumerate(tpl):
            ta, tb = float(taus[i]), float(taus[i + 1])
            if kind is U:
                arc = unconstrained_arc(ta, tb, p, v, sigma[i], -x[lay.L[i]])
            elif kind is S:
                arc = safety_arc(ta, tb, p, v, prm, lead)
            else:
                arc = saturated_arc(kind, prm, ta, tb, p, v)
            arcs.append(arc)
            p, v, _ = eval_arc(arc, prm, lead, tb)

        lam_enter, lam_exit = [0.0] * m, [0.0] * m
        u_exit = [eval_arc(arc, prm, lead, arc.t_exit)[2] for arc in arcs]
        for i, arc in enumerate(arcs):
            if tpl[i] is S:
                y_exit = u_exit[i] if i == m - 1 else 0.0
                lam_exit[i] = y_exit - u_exit[i]
                _, _, u_in = eval_arc(arc, prm, lead, arc.t_enter)
                lam_enter[i] = safety_y(arc, prm, lead, sigma[i], y_exit, arc.t_enter) - u_in
            else:
                lam_enter[i] = x[lay.L[i]]
                lam_exit[i] = lam_enter[i] - sigma[i] * arc.duration

        res = []
        for j in range(1, m):
            prev, nxt = tpl[j - 1], tpl[j]
            arc_prev = arcs[j - 1]
            tau = taus[j]
            p, v, u_minus = eval_arc(arc_prev, prm, lead, tau)
            jump = 0.0
            if nxt is S:
                jump = prm.rho * pis[j]
            elif nxt.is_speed_sat:
                jump = _jump_sign(nxt) * pis[j]
            res.append(lam_enter[j] - (lam_exit[j - 1] - jump))
            if nxt is S:
                pk, vk, _ = eval_lead(lead, tau)
                res.append(prm.gamma + prm.rho * v - prm.xi * (pk - p))
                res.append(u_minus - prm.k * (vk - v))
            elif nxt.is_control_sat:
                res.append(u_minus - nxt.bound(prm))
            elif nxt.is_speed_sat:
                res.append(v - nxt.bound(prm))
                if prev is U:
                    res.append(u_minus)
            elif prev is not S:
                res.append(u_minus + x[lay.L[j]])
        p_end, _, _ = eval_arc(arcs[-1], prm, lead, bc.tf)
        if self.free_terminal:
            res.append(a)
        else:
            res.append(p_end - bc.pf)
        if tpl[-1] is U or tpl[-1].is_speed_sat:
            res.append(lam_exit[-1])
        return _Built(arcs, lam_enter, lam_exit, lam_s, sigma, np.array(res, dtype=float))

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.build(x).residual

    def trajectory(self, x: np.ndarray, status: str = "optimal", message: str = "") -> Trajectory:
        built = self.build(x)
        return _assemble(self.scenario, built, self.layout, x, status, message)


def _assemble(scenario, built: _Built, layout: _Layout, x, status, message) -> Trajectory:
    prm, lead = scenario.params, scenario.lead
    arcs = []
    for i, arc in enumerate(built.arcs):
        pi = float(x[layout.pi[i]]) if i in layout.pi else None
        cs = CostateRecord(float(x[0]), float(built.lam_s[i]), float(built.lam_enter[i]),
                           float(built.lam_exit[i]), pi)
        arcs.append(arc.with_costates(cs))
    junctions = []
    for j in range(1, len(arcs)):
        _, _, u_minus = eval_arc(arcs[j - 1], prm, lead, arcs[j].t_enter)
        _, _, u_plus = eval_arc(arcs[j], prm, lead, arcs[j].t_enter)
        junctions.append(JunctionRecord(arcs[j].t_enter, arcs[j - 1].kind, arcs[j].kind,
                                        u_plus - u_minus, arcs[j].costates.pi))
    cost = sum(arc_cost(a, prm, lead) for a in arcs)
    p_end, _, _ = eval_arc(arcs[-1], prm, lead, scenario.bc.tf)
    return Trajectory(scenario, tuple(arcs), tuple(junctions), cost, status, message,
                      p_end - scenario.bc.pf)


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    message: str = ""


def damped_newton(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    *,
    tol: float = NEWTON_TOL,
    max_iter: int = 100,
    admissible: Callable[[np.ndarray], bool] = lambda x: True,
) -> NewtonResult:
    """Damped Newton iteration with a forward-difference Jacobian.

    Steps are halved until the residual norm decreases and the iterate stays
    admissible.  ``fun`` raising ``ValueError`` marks a point inadmissible.
    """

    def safe(x):
        if not admissible(x):
            return None
        try:
            r = fun(x)
        except ValueError:
            return None
        return r if np.all(np.isfinite(r)) else None

    x = np.array(x0, dtype=float)
    r = safe(x)
    if r is None:
        return NewtonResult(x, math.inf, 0, False, "inadmissible starting point")
    norm = float(np.linalg.norm(r))
    crawl = 0
    for it in range(max_iter):
        if norm < tol:
            return NewtonResult(x, norm, it, True)
        J = np.empty((r.size, x.size))
        for k in range(x.size):
            h = 1e-7 * max(1.0, abs(x[k]))
            xk = x.copy()
            xk[k] += h
            rk = safe(xk)
            if rk is None:
                xk[k] = x[k] - h
                rk = safe(xk)
                if rk is None:
                    return NewtonResult(x, norm, it, False, "jacobian undefined")
                h = -h
            J[:, k] = (rk - r) / h
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        step = 1.0
        while step >= MIN_STEP:
            xn = x + step * dx
            rn = safe(xn)
            if rn is not None:
                nn = float(np.linalg.norm(rn))
                if nn < (1 - 1e-4 * step) * norm or nn < tol:
                    x, r, norm = xn, rn, nn
                    break
            step *= 0.5
        else:
            return NewtonResult(x, norm, it, False, "line search stalled")
        # long runs of tiny steps mean a basin without a nearby root
        crawl = crawl + 1 if step < 0.05 else 0
        if crawl >= 12:
            return NewtonResult(x, norm, it + 1, False, "line search stalled")
    return NewtonResult(x, norm, max_iter, norm < tol, "" if norm < tol else "iteration limit")


def solve_junction_system(
    template: Sequence[ArcKind],
    scenario: Scenario,
    x0: Optional[np.ndarray] = None,
    *,
    free_terminal: bool = False,
    max_iter: int = 100,
) -> tuple[Trajectory, NewtonResult]:
    """Solve one template's junction and boundary equations from ``x0``.

    Returns the trajectory and the Newton record; raises :class:`SolverError`
    on divergence or when the switching times end up out of order.
    """
    system = JunctionSystem(template, scenario, free_terminal)
    if x0 is None:
        x0 = default_seed(system)
    res = damped_newton(system.residual, x0, admissible=system.ordered, max_iter=max_iter)
    if not res.converged:
        raise SolverError(f"Newton failed ({res.message}), residual {res.residual_norm:.3e}",
                          residual=res.residual_norm)
    if not system.ordered(res.x):
        raise SolverError("infeasible sequence", residual=res.residual_norm)
    return system.trajectory(res.x), res


def default_seed(system: JunctionSystem, taus: Optional[Sequence[float]] = None) -> np.ndarray:
    tpl, bc = system.template, system.scenario.bc
    m = len(tpl)
    if taus is None:
        taus = np.linspace(bc.t0, bc.tf, m + 1)[1:-1]
    x = np.zeros(system.size)
    for j, t in zip(range(1, m), taus):
        x[system.layout.tau[j]] = t
    prm = system.scenario.params
    for i, slot in system.layout.L.items():
        if tpl[i].is_control_sat:
            x[slot] = -tpl[i].bound(prm)
    return x


# ---------------------------------------------------------------------------
# iterative arc piecing


def _seed_from(system: JunctionSystem, prev: Trajectory, taus: Sequence[float]) -> np.ndarray:
    """Seed costates from a fewer-arc solution, switching times from ``taus``."""
    x = default_seed(system, taus)
    prm = system.scenario.params
    x[0] = prev.arcs[-1].costates.lambda_p if prev.arcs[-1].costates else 0.0
    full = [system.scenario.bc.t0, *taus]
    for i, slot in system.layout.L.items():
        kind = system.template[i]
        if kind is U:
            t = min(max(full[i], prev.t0), prev.tf)
            x[slot] = -prev.eval(t)[2]
        elif kind.is_control_sat:
            x[slot] = -kind.bound(prm)
    return x


def _lead_outlook(scenario: Scenario, t: float):
    """Extremes of the lead's asymptotic safety-arc control and of its speed over [t, tf]."""
    lead, prm = scenario.lead, scenario.params
    ts = np.linspace(t, scenario.bc.tf, 400)
    idx = lead.segment_index(ts)
    _, vk, uk = eval_lead(lead, ts)
    beta = np.array([lead.segments[i].beta for i in idx])
    return float(np.min(uk - beta / prm.k)), float(np.min(vk))


def _safety_exits(scenario: Scenario, t_v: float) -> list[tuple[ArcKind, ...]]:
    """Candidate exits after a new safety arc.

    A decelerating lead can force the follower onto ``u_min`` and then
    ``v_min``; otherwise the safety arc exits into a fresh unconstrained arc.
    Exits that the lead's motion cannot produce are screened out.
    """
    prm = scenario.params
    _, _, uk = eval_lead(scenario.lead, t_v)
    exits: list[tuple[ArcKind, ...]] = []
    if uk < 0:
        u_floor, v_floor = _lead_outlook(scenario, t_v)
        if u_floor < prm.u_min:
            exits += [(ArcKind.U_MIN,), (ArcKind.U_MIN, ArcKind.V_MIN)]
        if v_floor <= prm.v_min + 1e-6:
            exits.append((ArcKind.V_MIN,))
    exits.append((U,))
    return exits


def _candidates(traj: Trajectory, ev: ViolationEvent):
    """(template, seed switching-time lists) pairs extending ``traj`` at ``ev``."""
    sc = traj.scenario
    arcs = traj.arcs
    i = ev.arc_index
    arc = arcs[i]
    kinds = [a.kind for a in arcs]
    old_taus = [a.t_enter for a in arcs[1:]]
    head, tail = kinds[:i], kinds[i + 1:]
    head_t, tail_t = old_taus[:i], old_taus[i:]
    if ev.constraint == "multiplier":
        return _release_candidates(traj, ev)
    new_kind = {"safety": S, "u_min": ArcKind.U_MIN, "u_max": ArcKind.U_MAX,
                "v_min": ArcKind.V_MIN, "v_max": ArcKind.V_MAX}[ev.constraint]
    t_in = ev.time
    t_out = ev.window_end if ev.window_end < arc.t_exit - MIN_ARC else None
    at_start = t_in <= arc.t_enter + 1e-6
    terminal = i == len(arcs) - 1
    out = []

    def emit(middle: list[ArcKind], middle_t: list[float], alternatives=()):
        seeds = []
        for mt in (middle_t, *alternatives):
            got = _splice(head + middle + tail, head_t + list(mt) + tail_t, sc.bc.t0, sc.bc.tf)
            if got is not None:
                seeds.append(got[1])
                tpl = got[0]
        if seeds and all(tpl != o[0] for o in out):
            out.append((tpl, seeds))

    mid = 0.5 * (t_in + (t_out if t_out else arc.t_exit))
    if new_kind is S:
        if terminal:
            exits = _safety_exits(sc, t_in)
        else:
            exits = [(U,)]
        for ex in exits:
            n_ex = len(ex)
            exit_t = t_out if t_out else 0.5 * (t_in + arc.t_exit)
            rest_t = list(np.linspace(exit_t, arc.t_exit, n_ex + 1)[1:-1]) if n_ex > 1 else []
            prefix = [] if at_start else [arc.kind]
            prefix_t = [] if at_start else [t_in]
            if arc.kind is S:
                prefix, prefix_t = [], []
            # short touches sit around the deepest point of the violation
            alts = []
            span = exit_t - t_in
            if math.isfinite(ev.t_worst):
                for frac in (0.05, 0.25):
                    d = frac * span
                    a_in, a_out = ev.t_worst - d, ev.t_worst + d
                    if a_in > arc.t_enter and a_out < arc.t_exit:
                        r_t = list(np.linspace(a_out, arc.t_exit, n_ex + 1)[1:-1]) if n_ex > 1 else []
                        alts.append((([] if not prefix_t else [a_in]) + [a_out] + r_t))
            emit(prefix + [S, *ex], prefix_t + [exit_t] + rest_t, alts)
    else:
        body = [arc.kind] if not at_start else []
        body_t = [t_in] if not at_start else []
        if arc.kind is S:
            # a safety arc pushed past a bound hands over to the saturation
            emit([S, new_kind] + ([] if terminal or new_kind.is_control_sat else [U]),
                 [t_in] + ([] if terminal or new_kind.is_control_sat else [mid]))
            emit([S, new_kind], [t_in])
        elif new_kind.is_speed_sat and terminal:
            emit(body + [new_kind], body_t)
            emit(body + [new_kind, arc.kind], body_t + [mid])
        else:
            if t_out is None and not terminal:
                emit(body + [new_kind], body_t)
            emit(body + [new_kind, arc.kind], body_t + [t_out if t_out else mid])
    return out


def _splice(tpl: list, taus: list, t0: float, tf: float):
    """Merge repeated neighbours; ``None`` when the ordering is unusable."""
    tpl, taus = list(tpl), list(taus)
    k = 1
    while k < len(tpl):
        if tpl[k] is tpl[k - 1]:
            del tpl[k]
            del taus[k - 1]
        else:
            k += 1
    try:
        check_template(tpl)
    except ValueError:
        return None
    if len(taus) != len(tpl) - 1 or not np.all(np.diff([t0, *taus, tf]) > 0):
        return None
    return tuple(tpl), list(taus)


def _release_candidates(traj: Trajectory, ev: ViolationEvent):
    """Templates that release a constraint held active with a negative multiplier."""
    sc = traj.scenario
    t0, tf = sc.bc.t0, sc.bc.tf
    i = ev.arc_index
    arc = traj.arcs[i]
    kinds = list(traj.template)
    taus = [a.t_enter for a in traj.arcs[1:]]
    out = []

    def emit(tpl, tt, alternatives=()):
        seeds = []
        for cand in (tt, *alternatives):
            got = _splice(tpl, cand, t0, tf)
            if got is not None:
                seeds.append(got[1])
        if seeds and all(got[0] != o[0] for o in out):
            out.append((got[0], seeds))

    w0, w1 = ev.time, ev.window_end
    starts_inside = w0 > arc.t_enter + 1e-3
    ends_inside = w1 < arc.t_exit - 1e-3
    if starts_inside and ends_inside:
        width = w1 - w0
        # a near-zero middle arc is a spurious root next to the seed; widen mildly first
        alts = [[max(w0 - fl * width, arc.t_enter + 1e-3), min(w1 + fr * width, arc.t_exit - 1e-3)]
                for fl, fr in ((0.15, 0.15), (0.3, 0.3), (0.3, 0.1), (0.1, 0.3), (0.6, 0.6), (1.0, 1.0))]
        emit(kinds[:i] + [arc.kind, U, arc.kind] + kinds[i + 1:], taus[:i] + [w0, w1] + taus[i:],
             [taus[:i] + a + taus[i:] for a in alts])
    elif starts_inside:
        tail = kinds[i + 1:]
        if tail:
            emit(kinds, taus[:i] + [w0] + taus[i + 1:])
        else:
            emit(kinds + [U], taus + [w0])
    elif ends_inside:
        if i > 0:
            emit(kinds, taus[:i - 1] + [w1] + taus[i:])
        else:
            emit([U] + kinds, [w1] + taus)
    # dropping the arc altogether
    if i > 0:
        emit(kinds[:i] + kinds[i + 1:], taus[:i - 1] + taus[i:])
    elif len(kinds) > 1:
        emit([U] + kinds[1:], taus)
    return out


def _extra_seeds(seed_lists: list[list[float]], tpl, sc: Scenario, n: int = 6):
    """The given switching-time seeds, then scaled and random perturbations."""
    t0, tf = sc.bc.t0, sc.bc.tf
    m = len(seed_lists[0])
    rng = np.random.default_rng(len(tpl) * 7919 + m)
    yield from seed_lists
    base = np.array(seed_lists[0], dtype=float)
    for scale in (0.5, 1.5):
        cand = t0 + (base - t0) * scale
        yield list(np.sort(np.clip(cand, t0 + 1e-3, tf - 1e-3)))
    for width in (0.02, 0.02, 0.06, 0.06):
        cand = base + rng.normal(0.0, width * (tf - t0), size=m)
        yield list(np.sort(np.clip(cand, t0 + 1e-3, tf - 1e-3)))
    for _ in range(n):
        yield list(np.sort(rng.uniform(t0, tf, size=m)))


def _rank(traj: Trajectory, check_multipliers: bool = True) -> int:
    """0 when optimal; 1 primal violation only; 2 multiplier sign error."""
    if check_multipliers and detect_multiplier_sign_error(traj) is not None:
        return 2
    return 0 if detect_first_violation(traj.arcs, traj.scenario) is None else 1


def _try_template(tpl, seed_lists, prev: Trajectory, scenario: Scenario, free_terminal=False):
    """Best converged root of ``tpl`` over the seeds, with its rank.

    Stops at the first root passing every primal and multiplier check.
    """
    system = JunctionSystem(tpl, scenario, free_terminal)
    best = None
    for seed_t in _extra_seeds(seed_lists, tpl, scenario):
        x0 = _seed_from(system, prev, seed_t)
        res = damped_newton(system.residual, x0, admissible=system.ordered)
        if not (res.converged and system.ordered(res.x)):
            continue
        traj = system.trajectory(res.x)
        rank = _rank(traj, check_multipliers=not free_terminal)
        if rank == 0:
            return traj, 0
        if best is None or rank < best[1]:
            best = (traj, rank)
    return best


INFEASIBLE_MESSAGE = "terminal condition unreachable with active safety constraint"


def _piece(traj: Trajectory, scenario: Scenario, free_terminal: bool, budget: int):
    """Extend ``traj`` until it passes every check or the budget runs out.

    Returns ``(trajectory, optimal, history)``.
    """
    def first_issue(tr):
        ev = detect_first_violation(tr.arcs, scenario)
        if ev is None and not free_terminal:
            ev = detect_multiplier_sign_error(tr)
        return ev

    history = [traj]
    for _ in range(budget):
        ev = first_issue(traj)
        if ev is None:
            return traj, True, history
        log.debug("violation %s at %.4f in %s", ev.constraint, ev.time, traj.template)
        fallback = None
        for tpl, seeds in _candidates(traj, ev):
            got = _try_template(tpl, seeds, traj, scenario, free_terminal)
            if got is None:
                continue
            if got[1] == 0:
                return got[0], True, history + [got[0]]
            if fallback is None or got[1] < fallback[1]:
                fallback = got
        if fallback is None:
            break
        traj = fallback[0]
        history.append(traj)
    return traj, first_issue(traj) is None, history


def _best_effort(history: list[Trajectory], scenario: Scenario, budget: int) -> Optional[Trajectory]:
    """Ride the first safety arc to ``tf`` with the terminal position left free.

    The prefix up to that safety arc is re-solved and then repaired like any
    other template, so control and speed bounds still hold.
    """
    best = None
    for prev in reversed(history):
        kinds = list(prev.template)
        if S in kinds:
            cut = kinds.index(S)
            tpl, taus = tuple(kinds[:cut + 1]), [a.t_enter for a in prev.arcs[1:cut + 1]]
        else:
            ev = detect_first_violation(prev.arcs, scenario)
            if ev is None or ev.constraint != "safety":
                continue
            tpl = tuple(kinds[:ev.arc_index + 1]) + (S,)
            taus = [a.t_enter for a in prev.arcs[1:ev.arc_index + 1]] + [ev.time]
        try:
            check_template(tpl)
        except ValueError:
            continue
        got = _try_template(tpl, [taus], prev, scenario, free_terminal=True)
        if got is None:
            continue
        traj, ok, _ = _piece(got[0], scenario, True, budget)
        traj = replace(traj, status="infeasible", message=INFEASIBLE_MESSAGE)
        if ok:
            return traj
        best = best or traj
    return best


def solve_trajectory(scenario: Scenario, *, max_extensions: int = MAX_EXTENSIONS) -> Trajectory:
    """Energy-optimal trajectory by iterative arc piecing.

    Starts from the terminal unconstrained cubic; while a constraint is
    violated, splices in the arc of the violated constraint and re-solves the
    junction system.  When no template satisfies the terminal condition and a
    safety constraint is involved, returns a best-effort trajectory that rides
    the safety arc to ``tf`` with the terminal position left free
    (``status == "infeasible"``, ``terminal_residual = p(tf) - pf``).
    """
    require_valid(scenario)
    bc = scenario.bc
    arc = solve_terminal_unconstrained(bc.t0, bc.p0, bc.v0, bc.tf, bc.pf)
    system = JunctionSystem((U,), scenario)
    traj = system.trajectory(np.array([arc.coeffs[0], -arc.coeffs[1]]))
    traj, ok, history = _piece(traj, scenario, False, max_extensions)
    if ok:
        return traj
    if scenario.lead is not None:
        best = _best_effort(history, scenario, max_extensions)
        if best is not None:
            if detect_first_violation(best.arcs, scenario) is None:
                return best
            raise SolverError(INFEASIBLE_MESSAGE, best_effort=best, residual=best.terminal_residual)
    raise SolverError("arc piecing did not produce a violation-free trajectory",
                      best_effort=traj, residual=traj.terminal_residual)


def check_trajectory(
    traj: Trajectory,
    *,
    dt: float = GRID_DT,
    state_tol: float = 1e-9,
    constraint_tol: float = 1e-6,
) -> list[str]:
    """Invariant violations of a solved trajectory; empty when all hold.

    Checks state continuity at junctions, boundary conditions, every
    constraint on a ``dt`` grid, ``u(tf) = 0`` and that the control jumps
    only at junctions adjacent to a safety arc.
    """
    sc = traj.scenario
    prm, lead, bc = sc.params, sc.lead, sc.bc
    out = []
    arcs = traj.arcs
    if abs(arcs[0].t_enter - bc.t0) > state_tol or abs(arcs[-1].t_exit - bc.tf) > state_tol:
        out.append("arcs do not tile [t0, tf]")
    for a, b in zip(arcs, arcs[1:]):
        if abs(a.t_exit - b.t_enter) > state_tol:
            out.append(f"gap between arcs at t={a.t_exit:.6f}")
        p_m, v_m, u_m = eval_arc(a, prm, lead, a.t_exit)
        p_p, v_p, u_p = eval_arc(b, prm, lead, b.t_enter)
        if abs(p_m - p_p) > state_tol or abs(v_m - v_p) > state_tol:
            out.append(f"state discontinuity at t={b.t_enter:.6f}")
        if abs(u_m - u_p) > state_tol and S not in (a.kind, b.kind):
            out.append(f"control jump away from a safety corner at t={b.t_enter:.6f}")
    p0, v0, _ = traj.eval(bc.t0)
    p_end, _, u_end = traj.eval(bc.tf, side="left")
    if abs(p0 - bc.p0) > state_tol or abs(v0 - bc.v0) > state_tol:
        out.append("initial state mismatch")
    if abs(p_end - bc.pf) > state_tol:
        out.append(f"terminal position off by {p_end - bc.pf:.3e}")
    if abs(u_end) > state_tol:
        out.append(f"u(tf) = {u_end:.3e}")
    t = _grid(bc.t0, bc.tf, dt)
    junction_t = np.array([a.t_enter for a in arcs[1:]])
    for side, tt in (("right", t), ("left", junction_t)):
        if not tt.size:
            continue
        for name, m in traj.margins(tt, side).items():
            if np.min(m) < -constraint_tol:
                k = int(np.argmin(m))
                out.append(f"{name} violated by {-m[k]:.3e} at t={tt[k]:.6f}")
    return out
