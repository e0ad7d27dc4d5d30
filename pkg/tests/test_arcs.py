from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from cavtraj.arcs import (
    ArcKind, arc_cost, eval_arc, kind_from_label, safety_arc, safety_arc_entry_control,
    saturated_arc, solve_terminal_unconstrained, unconstrained_arc,
)
from cavtraj.domain import DomainError, VehicleParams
from cavtraj.lead import LeadProfile, LeadSegment, eval_lead
from rk4 import rk4_speed


def test_terminal_cubic_values():
    arc = solve_terminal_unconstrained(0.0, 0.0, 14.0, 26.0, 300.0)
    p, v, u = eval_arc(arc, VehicleParams(), None, np.array([0.0, 26.0]))
    assert u[0] == pytest.approx(3 * (300.0 - 14.0 * 26.0) / 26.0**2, abs=1e-12)
    assert u[0] == pytest.approx(-0.28402, abs=1e-5)
    assert u[1] == 0.0
    assert p[1] == pytest.approx(300.0, abs=1e-9)


@given(st.floats(1.0, 40.0), st.floats(0.0, 25.0), st.floats(10.0, 600.0))
def test_terminal_cubic_meets_boundary(T, v0, D):
    arc = solve_terminal_unconstrained(0.0, 0.0, v0, T, D)
    p, _, u = eval_arc(arc, VehicleParams(), None, T)
    assert p == pytest.approx(D, abs=1e-9 * max(1.0, D))
    assert abs(u) < 1e-12


def test_terminal_cubic_degenerate_horizon():
    with pytest.raises(DomainError):
        solve_terminal_unconstrained(5.0, 0.0, 10.0, 5.0, 100.0)


def test_unconstrained_derivatives_by_finite_difference():
    arc = unconstrained_arc(1.0, 6.0, 3.0, 12.0, -0.07, 0.4)
    t = np.linspace(1.2, 5.8, 9)
    h = 1e-5
    p_hi, v_hi, _ = eval_arc(arc, VehicleParams(), None, t + h)
    p_lo, v_lo, _ = eval_arc(arc, VehicleParams(), None, t - h)
    _, v, u = eval_arc(arc, VehicleParams(), None, t)
    assert np.allclose((p_hi - p_lo) / (2 * h), v, atol=1e-8)
    assert np.allclose((v_hi - v_lo) / (2 * h), u, atol=1e-8)


def test_saturated_arcs():
    prm = VehicleParams()
    arc = saturated_arc(ArcKind.U_MIN, prm, 0.0, 2.0, 0.0, 10.0)
    assert eval_arc(arc, prm, None, 2.0) == pytest.approx((18.0, 8.0, -1.0))
    arc = saturated_arc(ArcKind.V_MAX, prm, 0.0, 2.0, 0.0, 25.0)
    assert eval_arc(arc, prm, None, 2.0) == pytest.approx((50.0, 25.0, 0.0))
    with pytest.raises(ValueError):
        saturated_arc(ArcKind.SAFETY, prm, 0.0, 1.0, 0.0, 1.0)


def test_outside_arc_raises():
    arc = unconstrained_arc(0.0, 1.0, 0.0, 1.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        eval_arc(arc, VehicleParams(), None, 1.5)


def _safety_case(alpha, beta, xi, rho, gap_extra=0.0, segments=None):
    prm = VehicleParams(xi=xi, rho=rho)
    segs = segments or (LeadSegment(0.0, 12.0, alpha, beta),)
    lead = LeadProfile(30.0, 12.0, segs)
    v0 = 11.0
    p0 = 30.0 - (prm.gamma + prm.rho * v0) / prm.xi - gap_extra
    return prm, lead, p0, v0


@pytest.mark.parametrize("alpha,beta,xi,rho", [
    (0.0, 0.0, 1.0, 1.2), (0.3, -0.05, 1.0, 1.2), (-0.5, 0.05, 0.8, 1.6), (0.1, 0.02, 1.2, 0.8),
])
def test_safety_arc_matches_rk4(alpha, beta, xi, rho):
    prm, lead, p0, v0 = _safety_case(alpha, beta, xi, rho)
    arc = safety_arc(0.0, 10.0, p0, v0, prm, lead)
    t, v_rk = rk4_speed(lambda s: eval_lead(lead, s)[1], prm.k, 0.0, v0, 10.0)
    idx = np.arange(0, t.size, 997)
    _, v, _ = eval_arc(arc, prm, lead, t[idx])
    assert np.max(np.abs(v - v_rk[idx])) < 1e-8


def test_safety_arc_across_lead_segments_matches_rk4():
    segs = (LeadSegment(0.0, 3.0, 0.2, -0.05), LeadSegment(3.0, 12.0, -0.4, 0.04))
    prm, lead, p0, v0 = _safety_case(0, 0, 1.0, 1.2, segments=segs)
    arc = safety_arc(0.0, 10.0, p0, v0, prm, lead)
    assert len(arc.pieces) == 2
    t, v_rk = rk4_speed(lambda s: eval_lead(lead, s)[1], prm.k, 0.0, v0, 10.0)
    idx = np.arange(0, t.size, 1013)
    _, v, _ = eval_arc(arc, prm, lead, t[idx])
    assert np.max(np.abs(v - v_rk[idx])) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.05, 0.05), st.floats(0.8, 1.2), st.floats(0.8, 1.6),
       st.floats(0.0, 5.0))
def test_safety_arc_holds_boundary_and_integrates(alpha, beta, xi, rho, t_entry):
    prm, lead, _, _ = _safety_case(alpha, beta, xi, rho)
    pk, vk, _ = eval_lead(lead, t_entry)
    v0 = max(vk - 0.5, 0.5)
    p0 = pk - (prm.gamma + prm.rho * v0) / prm.xi
    arc = safety_arc(t_entry, 12.0, p0, v0, prm, lead)
    t = np.linspace(t_entry, 12.0, 40)
    p, v, u = eval_arc(arc, prm, lead, t)
    pk, vk, _ = eval_lead(lead, t)
    # the safe-distance boundary is held exactly
    assert np.allclose(prm.xi * (pk - p), prm.gamma + prm.rho * v, atol=1e-9)
    # control follows the boundary-keeping law
    assert np.allclose(u, safety_arc_entry_control(prm, vk, v), atol=1e-9)
    # position integrates speed
    pos = p0 + integrate.cumulative_trapezoid(eval_arc(arc, prm, lead, np.linspace(t_entry, 12.0, 20001))[1],
                                             np.linspace(t_entry, 12.0, 20001), initial=0.0)
    assert pos[-1] == pytest.approx(p[-1], abs=1e-6)


def test_safety_arc_needs_lead():
    with pytest.raises(DomainError):
        safety_arc(0.0, 1.0, 0.0, 10.0, VehicleParams(), None)


@pytest.mark.parametrize("kind", [ArcKind.UNCONSTRAINED, ArcKind.U_MAX, ArcKind.V_MIN])
def test_arc_cost_matches_quadrature(kind):
    prm, lead, p0, v0 = _safety_case(0.2, -0.03, 1.0, 1.2)
    if kind is ArcKind.UNCONSTRAINED:
        arc = unconstrained_arc(0.5, 7.0, p0, v0, 0.05, -0.3)
    elif kind is ArcKind.SAFETY:
        arc = safety_arc(0.5, 7.0, p0, v0, prm, lead)
    else:
        arc = saturated_arc(kind, prm, 0.5, 7.0, p0, v0)
    ref, _ = integrate.quad(lambda s: 0.5 * eval_arc(arc, prm, lead, s)[2] ** 2, 0.5, 7.0,
                            epsabs=1e-13, epsrel=1e-12)
    assert arc_cost(arc, prm, lead) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_labels_round_trip():
    for kind in ArcKind:
        assert kind_from_label(kind.value) is kind
    with pytest.raises(ValueError):
        kind_from_label("coasting")


def test_closed_form_speed_formula():
    # constant-speed lead: speed relaxes exponentially at rate xi/rho
    prm = VehicleParams(xi=1.0, rho=1.25)
    lead = LeadProfile(30.0, 12.0, (LeadSegment(0.0, 12.0),))
    arc = safety_arc(0.0, 10.0, 0.0, 9.0, prm, lead)
    _, v, _ = eval_arc(arc, prm, lead, 4.0)
    assert v == pytest.approx(12.0 - 3.0 * math.exp(-0.8 * 4.0), abs=1e-12)


def test_zero_control_cruise():
    arc = unconstrained_arc(0.0, 10.0, 0.0, 14.0, 0.0, 0.0)
    assert eval_arc(arc, VehicleParams(), None, 3.0) == (42.0, 14.0, 0.0)


def test_entry_control_values():
    assert safety_arc_entry_control(VehicleParams(xi=1.0, rho=1.2), 11.5, 14.0) == pytest.approx(-2.5 / 1.2)
    assert safety_arc_entry_control(VehicleParams(xi=2.0, rho=1.2), 11.5, 14.0) == pytest.approx(-5.0 / 1.2)


def test_relaxation_example_against_rk4():
    prm = VehicleParams(xi=1.0, rho=1.2)
    lead = LeadProfile(40.0, 11.5, (LeadSegment(0.0, 5.0),))
    arc = safety_arc(0.0, 5.0, 40.0 - prm.gamma - prm.rho * 13.0, 13.0, prm, lead)
    _, v, _ = eval_arc(arc, prm, lead, 1.2)
    assert v == pytest.approx(11.5 + 1.5 * math.exp(-1.0), abs=1e-12)
    t, v_rk = rk4_speed(lambda s: np.full_like(s, 11.5), prm.k, 0.0, 13.0, 1.2)
    assert abs(v_rk[-1] - v) < 1e-8


def test_safety_arc_cost_from_rk4_trajectory():
    prm, lead, p0, v0 = _safety_case(0.2, -0.03, 1.0, 1.2)
    arc = safety_arc(0.5, 7.0, p0, v0, prm, lead)
    t, v_rk = rk4_speed(lambda s: eval_lead(lead, s)[1], prm.k, 0.5, v0, 6.5, h=1e-4)
    u = prm.k * (eval_lead(lead, t)[1] - v_rk)
    ref = 0.5 * integrate.simpson(u * u, x=t)
    assert arc_cost(arc, prm, lead) == pytest.approx(ref, rel=1e-9)
