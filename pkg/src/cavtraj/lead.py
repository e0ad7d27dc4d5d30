"""Preceding-vehicle motion from a piecewise-linear acceleration profile."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from cavtraj.domain import DomainError, VehicleParams, Violation

if TYPE_CHECKING:
    from cavtraj.stitcher import Trajectory

_TIME_EPS = 1e-9


@dataclass(frozen=True)
class LeadSegment:
    """Acceleration ``alpha + beta*t`` on ``[t_start, t_end]`` (absolute time)."""

    t_start: float
    t_end: float
    alpha: float = 0.0
    beta: float = 0.0

    def accel_at_start(self) -> float:
        return self.alpha + self.beta * self.t_start


@dataclass(frozen=True)
class LeadProfile:
    p_init: float
    v_init: float
    segments: tuple[LeadSegment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise DomainError("a lead profile needs at least one segment")

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    @cached_property
    def _starts(self) -> np.ndarray:
        # (t, p, v) at the start of every segment, integrated in closed form
        rows = []
        p, v = self.p_init, self.v_init
        for seg in self.segments:
            rows.append((seg.t_start, p, v))
            h = seg.t_end - seg.t_start
            a0 = seg.accel_at_start()
            p = p + v * h + a0 * h * h / 2 + seg.beta * h**3 / 6
            v = v + a0 * h + seg.beta * h * h / 2
        return np.array(rows)

    def segment_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_start - _TIME_EPS) or np.any(t > self.t_end + _TIME_EPS):
            raise DomainError(
                f"time outside lead horizon [{self.t_start}, {self.t_end}]"
            )
        idx = np.searchsorted(self._starts[:, 0], t, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def eval_segment(self, i: int, t):
        """Closed-form (p, v, u) of segment ``i`` at ``t``; no horizon check."""
        seg = self.segments[i]
        _, p0, v0 = self._starts[i]
        tau = np.asarray(t, dtype=float) - seg.t_start
        a0 = seg.accel_at_start()
        b = seg.beta
        u = a0 + b * tau
        v = v0 + a0 * tau + b * tau**2 / 2
        p = p0 + v0 * tau + a0 * tau**2 / 2 + b * tau**3 / 6
        return p, v, u

    def state_at_segment_start(self, i: int) -> tuple[float, float]:
        _, p0, v0 = self._starts[i]
        return float(p0), float(v0)


def eval_lead(profile: LeadProfile, t):
    """Position, speed and acceleration of the lead at ``t`` (scalar or array)."""
    if isinstance(t, (float, int)):
        t = float(t)
        if t < profile.t_start - _TIME_EPS or t > profile.t_end + _TIME_EPS:
            raise DomainError(f"time outside lead horizon [{profile.t_start}, {profile.t_end}]")
        i = 0
        for j, seg in enumerate(profile.segments):
            if t >= seg.t_start:
                i = j
        p, v, u = profile.eval_segment(i, t)
        return float(p), float(v), float(u)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    idx = profile.segment_index(t)
    p = np.empty_like(t)
    v = np.empty_like(t)
    u = np.empty_like(t)
    for i in np.unique(idx):
        m = idx == i
        p[m], v[m], u[m] = profile.eval_segment(int(i), t[m])
    if scalar:
        return float(p[0]), float(v[0]), float(u[0])
    return p, v, u


def constant_speed(p_init: float, v_init: float, t0: float, tf: float) -> LeadProfile:
    return LeadProfile(p_init, v_init, (LeadSegment(t0, tf, 0.0, 0.0),))


def lead_violations(profile: LeadProfile, t0: float, tf: float) -> list[Violation]:
    """Invariant violations of ``profile`` over the horizon ``[t0, tf]``."""
    out = []
    segs = profile.segments
    for i, seg in enumerate(segs):
        if not seg.t_end > seg.t_start:
            out.append(Violation("lead.segments", f"segment {i} has nonpositive length"))
        if i and not math.isclose(seg.t_start, segs[i - 1].t_end, abs_tol=_TIME_EPS):
            out.append(Violation("lead.segments", f"segment {i} does not start where segment {i - 1} ends"))
    if out:
        return out
    if profile.t_start > t0 + _TIME_EPS or profile.t_end < tf - _TIME_EPS:
        out.append(Violation("lead.segments", "lead profile does not cover [t0, tf]"))
    if profile.v_init < 0:
        out.append(Violation("lead.v_init", "lead speed must be nonnegative"))
    for i, seg in enumerate(segs):
        ts = [seg.t_start, seg.t_end]
        if seg.beta != 0:
            t_star = -seg.alpha / seg.beta
            if seg.t_start < t_star < seg.t_end:
                ts.append(t_star)
        _, v, _ = profile.eval_segment(i, np.array(ts))
        if np.min(v) < -1e-12:
            out.append(Violation("lead.segments", f"lead speed becomes negative in segment {i}"))
            break
    return out


def _exact_linear_accel(h: float, dv: float, dp: float) -> tuple[float, float]:
    # linear accel a0 + b*tau on [0, h] reproducing both the speed gain dv and
    # the position gain dp beyond the initial-speed drift
    b = (6.0 * dv * h - 12.0 * dp) / h**3
    a0 = (dv - b * h * h / 2) / h
    return a0, b


def from_follower_trajectory(
    traj: Trajectory,
    params: Optional[VehicleParams] = None,
    t_start: Optional[float] = None,
    t_end: Optional[float] = None,
    *,
    extend: bool = False,
    speed_tol: float = 1e-3,
) -> LeadProfile:
    """Re-express a solved trajectory as a lead profile for its successor.

    Polynomial arcs map to one segment each.  Safety arcs have exponential
    speed and are cut into sub-segments whose linear acceleration reproduces
    the exact speed and position at both sub-segment ends; sub-segments are
    halved until the speed error inside stays below ``speed_tol``.

    With ``extend=True`` the horizon may run past the trajectory's exit time;
    the vehicle then cruises at its exit speed.
    """
    del params  # the arcs already carry everything needed
    t0, tf = traj.t0, traj.tf
    t_start = t0 if t_start is None else t_start
    t_end = tf if t_end is None else t_end
    if t_start < t0 - _TIME_EPS or t_start >= t_end:
        raise DomainError("requested horizon does not start inside the trajectory")
    if t_end > tf + _TIME_EPS and not extend:
        raise DomainError("requested horizon extends past the trajectory exit time")

    from cavtraj.arcs import ArcKind

    segments: list[LeadSegment] = []

    def add(ta: float, tb: float, a0: float, b: float) -> None:
        segments.append(LeadSegment(ta, tb, a0 - b * ta, b))

    for arc in traj.arcs:
        ta, tb = max(arc.t_enter, t_start), min(arc.t_exit, t_end)
        if tb - ta <= _TIME_EPS:
            continue
        if arc.kind is ArcKind.UNCONSTRAINED:
            slope, c = arc.coeffs
            add(ta, tb, c + slope * (ta - arc.t_enter), slope)
        elif arc.kind.is_control_sat:
            add(ta, tb, arc.coeffs[0], 0.0)
        elif arc.kind.is_speed_sat:
            add(ta, tb, 0.0, 0.0)
        else:
            segments.extend(_approximate_safety(traj, ta, tb, speed_tol))

    if t_end > tf + _TIME_EPS:
        segments.append(LeadSegment(tf, t_end, 0.0, 0.0))
    p_init, v_init, _ = traj.eval(t_start)
    return LeadProfile(float(p_init), float(v_init), tuple(segments))


def _approximate_safety(traj, ta: float, tb: float, speed_tol: float) -> list[LeadSegment]:
    pieces = 1
    while True:
        knots = np.linspace(ta, tb, pieces + 1)
        p_k, v_k, _ = traj.eval(knots)
        segs, worst = [], 0.0
        for j in range(pieces):
            h = knots[j + 1] - knots[j]
            a0, b = _exact_linear_accel(h, v_k[j + 1] - v_k[j], p_k[j + 1] - p_k[j] - v_k[j] * h)
            tau = np.linspace(0.0, h, 17)
            _, v_true, _ = traj.eval(knots[j] + tau)
            v_lin = v_k[j] + a0 * tau + b * tau**2 / 2
            worst = max(worst, float(np.max(np.abs(v_true - v_lin))))
            segs.append(LeadSegment(knots[j], knots[j + 1], a0 - b * knots[j], b))
        if worst < speed_tol / 2 or pieces >= 4096:
            return segs
        pieces *= 2
