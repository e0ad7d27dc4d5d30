"""Closed-form optimal arcs.

Every arc is parameterised in its own local time ``tau = t - t_enter`` and
carries its entry state, so evaluation never needs the neighbouring arcs.

* unconstrained: ``u = slope*tau + c`` (speed quadratic, position cubic)
* control-saturated: ``u`` pinned at ``u_min`` or ``u_max``
* speed-saturated: ``u = 0`` with speed pinned at ``v_min`` or ``v_max``
* safety: the gap sits on ``gamma + rho*v`` so ``rho*u = xi*(v_k - v)``; with
  ``k = xi/rho`` the speed relaxes towards the lead as
  ``v = v_k - u_k/k + beta/k**2 + C*exp(-k*tau)`` on each lead segment whose
  acceleration has slope ``beta``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from cavtraj.domain import DomainError, VehicleParams
from cavtraj.lead import LeadProfile

_TIME_EPS = 1e-9


class ArcKind(enum.Enum):
    UNCONSTRAINED = "unconstrained"
    SAFETY = "safety"
    U_MIN = "u_min"
    U_MAX = "u_max"
    V_MIN = "v_min"
    V_MAX = "v_max"

    @property
    def is_control_sat(self) -> bool:
        return self in (ArcKind.U_MIN, ArcKind.U_MAX)

    @property
    def is_speed_sat(self) -> bool:
        return self in (ArcKind.V_MIN, ArcKind.V_MAX)

    @property
    def is_state_constrained(self) -> bool:
        return self is ArcKind.SAFETY or self.is_speed_sat

    def bound(self, params: VehicleParams) -> float:
        return {
            ArcKind.U_MIN: params.u_min,
            ArcKind.U_MAX: params.u_max,
            ArcKind.V_MIN: params.v_min,
            ArcKind.V_MAX: params.v_max,
        }[self]


@dataclass(frozen=True)
class CostateRecord:
    """Influence functions on one arc.

    ``lambda_p`` and ``lambda_s`` are constant on the arc; ``lambda_v`` is
    affine with slope ``-(lambda_p - xi*lambda_s)`` except on safety arcs,
    where :func:`costate_v` evaluates it.  ``pi`` is the junction multiplier
    when the arc starts at a state-constraint entry.
    """

    lambda_p: float
    lambda_s: float
    lambda_v_enter: float
    lambda_v_exit: float
    pi: Optional[float] = None


@dataclass(frozen=True)
class SafetyPiece:
    """Part of a safety arc lying inside one lead segment."""

    t_a: float
    t_b: float
    p_a: float
    segment: int
    C: float


@dataclass(frozen=True)
class Arc:
    kind: ArcKind
    t_enter: float
    t_exit: float
    p_enter: float
    v_enter: float
    coeffs: tuple = ()
    costates: Optional[CostateRecord] = None
    pieces: tuple[SafetyPiece, ...] = field(default=(), repr=False)

    @property
    def duration(self) -> float:
        return self.t_exit - self.t_enter

    def with_costates(self, costates: CostateRecord) -> Arc:
        return Arc(self.kind, self.t_enter, self.t_exit, self.p_enter, self.v_enter,
                   self.coeffs, costates, self.pieces)


def unconstrained_arc(t_enter, t_exit, p_enter, v_enter, slope, c) -> Arc:
    return Arc(ArcKind.UNCONSTRAINED, t_enter, t_exit, p_enter, v_enter, (float(slope), float(c)))


def saturated_arc(kind: ArcKind, params: VehicleParams, t_enter, t_exit, p_enter, v_enter) -> Arc:
    if not (kind.is_control_sat or kind.is_speed_sat):
        raise ValueError(f"{kind} is not a saturation arc")
    return Arc(kind, t_enter, t_exit, p_enter, v_enter, (kind.bound(params),))


def safety_arc(t_enter, t_exit, p_enter, v_enter, params: VehicleParams, lead: LeadProfile) -> Arc:
    """Safety arc entered at ``(p_enter, v_enter)``, split at lead-segment joins."""
    if lead is None:
        raise DomainError("a safety arc needs a lead profile")
    k = params.k
    i0 = int(lead.segment_index(t_enter))
    i1 = int(lead.segment_index(max(t_enter, t_exit - 1e-12)))
    pieces = []
    t_a, p_a, v_a = float(t_enter), float(p_enter), float(v_enter)
    for i in range(i0, i1 + 1):
        seg = lead.segments[i]
        t_b = float(t_exit) if i == i1 else seg.t_end
        _, vk, uk = lead.eval_segment(i, t_a)
        beta = seg.beta
        C = v_a - (vk - uk / k + beta / k**2)
        piece = SafetyPiece(t_a, t_b, p_a, i, float(C))
        pieces.append(piece)
        if i < i1:
            p_a, v_a, _ = _eval_piece(piece, k, lead, t_b)
            p_a, v_a, t_a = float(p_a), float(v_a), t_b
    return Arc(ArcKind.SAFETY, float(t_enter), float(t_exit), float(p_enter), float(v_enter),
               (k,), None, tuple(pieces))


def _eval_piece(piece: SafetyPiece, k: float, lead: LeadProfile, t):
    beta = lead.segments[piece.segment].beta
    tau = np.asarray(t, dtype=float) - piece.t_a
    pk, vk, uk = lead.eval_segment(piece.segment, t)
    pk_a, vk_a, _ = lead.eval_segment(piece.segment, piece.t_a)
    decay = np.exp(-k * tau)
    v = vk - uk / k + beta / k**2 + piece.C * decay
    u = uk - beta / k - k * piece.C * decay
    p = (piece.p_a + (pk - pk_a) - (vk - vk_a) / k + beta * tau / k**2
         + piece.C * (-np.expm1(-k * tau)) / k)
    return p, v, u


def _eval_arc_scalar(arc: Arc, params: VehicleParams, lead: Optional[LeadProfile], t: float):
    # float-only path; the junction residuals evaluate arcs at single times
    if t < arc.t_enter - _TIME_EPS or t > arc.t_exit + _TIME_EPS:
        raise DomainError(f"time outside arc interval [{arc.t_enter}, {arc.t_exit}]")
    tau = t - arc.t_enter
    p0, v0 = arc.p_enter, arc.v_enter
    kind = arc.kind
    if kind is ArcKind.UNCONSTRAINED:
        slope, c = arc.coeffs
        return (p0 + v0 * tau + c * tau * tau / 2 + slope * tau**3 / 6,
                v0 + c * tau + slope * tau * tau / 2, slope * tau + c)
    if kind is ArcKind.U_MIN or kind is ArcKind.U_MAX:
        b = arc.coeffs[0]
        return p0 + v0 * tau + b * tau * tau / 2, v0 + b * tau, b
    if kind is ArcKind.V_MIN or kind is ArcKind.V_MAX:
        return p0 + v0 * tau, v0, 0.0
    if lead is None:
        raise DomainError("a safety arc needs a lead profile")
    piece = arc.pieces[0]
    for pc in arc.pieces[1:]:
        if t >= pc.t_a:
            piece = pc
    k = params.k
    beta = lead.segments[piece.segment].beta
    pk, vk, uk = _segment_scalar(lead, piece.segment, t)
    pk_a, vk_a, _ = _segment_scalar(lead, piece.segment, piece.t_a)
    tau = t - piece.t_a
    decay = math.exp(-k * tau)
    v = vk - uk / k + beta / k**2 + piece.C * decay
    u = uk - beta / k - k * piece.C * decay
    p = (piece.p_a + (pk - pk_a) - (vk - vk_a) / k + beta * tau / k**2
         + piece.C * (-math.expm1(-k * tau)) / k)
    return p, v, u


def _segment_scalar(lead: LeadProfile, i: int, t: float):
    seg = lead.segments[i]
    _, p0, v0 = lead._starts[i]
    tau = t - seg.t_start
    a0 = seg.accel_at_start()
    b = seg.beta
    return (float(p0 + v0 * tau + a0 * tau * tau / 2 + b * tau**3 / 6),
            float(v0 + a0 * tau + b * tau * tau / 2), a0 + b * tau)


def eval_arc(arc: Arc, params: VehicleParams, lead: Optional[LeadProfile], t):
    """Position, speed and control on ``arc`` at ``t`` (scalar or array)."""
    if isinstance(t, (float, int)):
        p, v, u = _eval_arc_scalar(arc, params, lead, float(t))
        return float(p), float(v), float(u)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < arc.t_enter - _TIME_EPS) or np.any(t > arc.t_exit + _TIME_EPS):
        raise DomainError(f"time outside arc interval [{arc.t_enter}, {arc.t_exit}]")
    tau = t - arc.t_enter
    p0, v0 = arc.p_enter, arc.v_enter
    if arc.kind is ArcKind.UNCONSTRAINED:
        slope, c = arc.coeffs
        u = slope * tau + c
        v = v0 + c * tau + slope * tau**2 / 2
        p = p0 + v0 * tau + c * tau**2 / 2 + slope * tau**3 / 6
    elif arc.kind.is_control_sat:
        b = arc.coeffs[0]
        u = np.full_like(tau, b)
        v = v0 + b * tau
        p = p0 + v0 * tau + b * tau**2 / 2
    elif arc.kind.is_speed_sat:
        u = np.zeros_like(tau)
        v = np.full_like(tau, v0)
        p = p0 + v0 * tau
    else:
        if lead is None:
            raise DomainError("a safety arc needs a lead profile")
        p, v, u = np.empty_like(t), np.empty_like(t), np.empty_like(t)
        starts = np.array([pc.t_a for pc in arc.pieces])
        which = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(starts) - 1)
        for j in np.unique(which):
            m = which == j
            p[m], v[m], u[m] = _eval_piece(arc.pieces[j], params.k, lead, t[m])
    if scalar:
        return float(p[0]), float(v[0]), float(u[0])
    return p, v, u


def safety_arc_entry_control(params: VehicleParams, v_k: float, v_i: float) -> float:
    """Control that keeps the gap on the safe-distance boundary."""
    return params.xi * (v_k - v_i) / params.rho


def solve_terminal_unconstrained(t_s: float, p_s: float, v_s: float, tf: float, pf: float) -> Arc:
    """The cubic arc from ``(t_s, p_s, v_s)`` reaching ``pf`` at ``tf`` with ``u(tf) = 0``."""
    T = tf - t_s
    if not T > 0:
        raise DomainError(f"degenerate horizon tf - t_s = {T}")
    D = pf - p_s
    slope = 3.0 * (v_s * T - D) / T**3
    return unconstrained_arc(t_s, tf, p_s, v_s, slope, -slope * T)


def safety_y(arc: Arc, params: VehicleParams, lead: LeadProfile, sigma: float, y_exit: float, t):
    """``lambda_v + u`` on a safety arc, integrated backwards from ``y_exit`` at the exit.

    Along the arc ``dy/dt = k*y - sigma + du/dt``; integrating from the exit
    keeps every exponential decaying.
    """
    k = params.k
    t = np.asarray(t, dtype=float)
    out = np.empty_like(np.atleast_1d(t))
    flat_t = np.atleast_1d(t)
    # y at the end of each piece, walking backwards
    y_end = [0.0] * len(arc.pieces)
    y = y_exit
    for j in range(len(arc.pieces) - 1, -1, -1):
        pc = arc.pieces[j]
        y_end[j] = y
        y = _piece_y(pc, k, lead.segments[pc.segment].beta, sigma, y, pc.t_a)
    starts = np.array([pc.t_a for pc in arc.pieces])
    which = np.clip(np.searchsorted(starts, flat_t, side="right") - 1, 0, len(starts) - 1)
    for j in np.unique(which):
        m = which == j
        pc = arc.pieces[j]
        out[m] = _piece_y(pc, k, lead.segments[pc.segment].beta, sigma, y_end[j], flat_t[m])
    return float(out[0]) if np.ndim(t) == 0 else out


def _piece_y(pc: SafetyPiece, k: float, beta: float, sigma: float, y_b: float, t):
    t = np.asarray(t, dtype=float)
    back = np.exp(-k * (pc.t_b - t))
    integral = ((beta - sigma) * (-np.expm1(-k * (pc.t_b - t))) / k
                + 0.5 * k * pc.C * (np.exp(-k * (t - pc.t_a)) - np.exp(-k * (2 * pc.t_b - t - pc.t_a))))
    return back * y_b - integral


def costate_v(arc: Arc, params: VehicleParams, lead: Optional[LeadProfile], t):
    """lambda_v on ``arc`` at ``t`` from its costate record."""
    cs = arc.costates
    if cs is None:
        raise ValueError("arc carries no costate record")
    sigma = cs.lambda_p - params.xi * cs.lambda_s
    if arc.kind is not ArcKind.SAFETY:
        return cs.lambda_v_enter - sigma * (np.asarray(t, dtype=float) - arc.t_enter)
    _, _, u_exit = eval_arc(arc, params, lead, arc.t_exit)
    y = safety_y(arc, params, lead, sigma, cs.lambda_v_exit + u_exit, t)
    _, _, u = eval_arc(arc, params, lead, t)
    return y - u


def safety_multiplier(arc: Arc, params: VehicleParams, lead: LeadProfile, t):
    """Multiplier of the safety constraint on a safety arc, ``-(u + lambda_v)/rho``."""
    _, _, u = eval_arc(arc, params, lead, t)
    return -(u + costate_v(arc, params, lead, t)) / params.rho


def constraint_multiplier(arc: Arc, params: VehicleParams, lead: Optional[LeadProfile], t):
    """Multiplier of the constraint active on ``arc``; nonnegative at an optimum.

    Returns ``None`` on unconstrained arcs.
    """
    if arc.kind is ArcKind.UNCONSTRAINED:
        return None
    if arc.kind is ArcKind.SAFETY:
        return safety_multiplier(arc, params, lead, t)
    lam = costate_v(arc, params, lead, t)
    if arc.kind is ArcKind.U_MIN:
        return params.u_min + lam
    if arc.kind is ArcKind.U_MAX:
        return -(params.u_max + lam)
    if arc.kind is ArcKind.V_MAX:
        return -lam
    return lam


def arc_cost(arc: Arc, params: VehicleParams, lead: Optional[LeadProfile] = None) -> float:
    """Control energy ``0.5 * integral of u^2`` over the arc."""
    T = arc.duration
    if arc.kind is ArcKind.UNCONSTRAINED:
        slope, c = arc.coeffs
        return 0.5 * (c * c * T + c * slope * T**2 + slope * slope * T**3 / 3)
    if arc.kind.is_control_sat:
        return 0.5 * arc.coeffs[0] ** 2 * T
    if arc.kind.is_speed_sat:
        return 0.0
    total = 0.0
    for pc in arc.pieces:
        if pc.t_b - pc.t_a <= 0:
            continue
        val, _ = integrate.quad(
            lambda s: _eval_piece(pc, params.k, lead, s)[2] ** 2,
            pc.t_a, pc.t_b, epsabs=1e-13, epsrel=1e-10, limit=200,
        )
        total += 0.5 * val
    return total


def arc_label(kind: ArcKind) -> str:
    return kind.value


def kind_from_label(label: str) -> ArcKind:
    try:
        return ArcKind(label)
    except ValueError:
        raise ValueError(f"unknown arc kind {label!r}") from None


def isclose_time(a: float, b: float) -> bool:
    return math.isclose(a, b, abs_tol=_TIME_EPS)
