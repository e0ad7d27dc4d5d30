from __future__ import annotations

import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from cavtraj.domain import (
    BoundaryConditions, DomainError, Scenario, ScenarioError, VehicleParams,
    require_valid, safe_distance, validate_scenario,
)
from cavtraj.lead import constant_speed
from cavtraj.sim import PRESET_IDS, preset


def _base() -> Scenario:
    return Scenario(VehicleParams(), BoundaryConditions(0.0, 26.0, 300.0, 14.0),
                    constant_speed(20.0, 11.5, 0.0, 26.0))


def test_presets_are_valid():
    for pid in PRESET_IDS:
        assert validate_scenario(preset(pid).scenario) == []


def test_safe_distance_values():
    prm = VehicleParams(gamma=2.0, rho=1.2)
    assert safe_distance(prm, 0.0) == 2.0
    assert safe_distance(prm, 10.0) == pytest.approx(14.0)
    with pytest.raises(DomainError):
        safe_distance(prm, -1.0)


def test_k_is_xi_over_rho():
    assert VehicleParams(xi=0.9, rho=1.5).k == pytest.approx(0.6)


def test_s0_derived_from_lead():
    sc = _base()
    assert sc.s0 == pytest.approx(20.0)
    assert sc.without_lead().s0 is None


def test_require_valid_raises_with_violation_list():
    bad = replace(_base(), params=replace(VehicleParams(), u_min=0.5))
    with pytest.raises(ScenarioError) as exc:
        require_valid(bad)
    assert [v.field for v in exc.value.violations] == ["u_min"]


def test_nonfinite_fields_are_reported_not_raised():
    bad = replace(_base(), bc=replace(_base().bc, tf=math.nan))
    assert any(v.field == "tf" for v in validate_scenario(bad))


def test_unreachable_terminal_position():
    bad = replace(_base(), bc=replace(_base().bc, pf=26.0 * 25.0 + 1.0))
    assert any(v.field == "pf" for v in validate_scenario(bad))


def test_initial_headway_below_safe_distance():
    bad = replace(_base(), params=replace(VehicleParams(), gamma=5.0))
    assert any(v.field == "s0" for v in validate_scenario(bad))


_BREAKERS = {
    "u_min": lambda sc, x: replace(sc, params=replace(sc.params, u_min=x)),
    "u_max": lambda sc, x: replace(sc, params=replace(sc.params, u_max=-x)),
    "gamma": lambda sc, x: replace(sc, params=replace(sc.params, gamma=-x)),
    "rho": lambda sc, x: replace(sc, params=replace(sc.params, rho=-x)),
    "xi": lambda sc, x: replace(sc, params=replace(sc.params, xi=-x)),
    "v_min": lambda sc, x: replace(sc, params=replace(sc.params, v_min=-x)),
    "tf": lambda sc, x: replace(sc, bc=replace(sc.bc, tf=-x)),
    "pf": lambda sc, x: replace(sc, bc=replace(sc.bc, pf=-x)),
    "v0": lambda sc, x: replace(sc, bc=replace(sc.bc, v0=30.0 + x)),
}


@given(st.sampled_from(sorted(_BREAKERS)), st.floats(0.01, 100.0))
def test_breaking_one_field_flips_acceptance(field, x):
    sc = _base()
    assert validate_scenario(sc) == []
    assert validate_scenario(_BREAKERS[field](sc, x)) != []


@given(st.floats(-0.5, 0.5), st.floats(0.0, 2.0))
def test_small_valid_perturbations_stay_valid(dv0, dgamma):
    sc = _base()
    sc = replace(sc, bc=replace(sc.bc, v0=sc.bc.v0 + dv0),
                 params=replace(sc.params, gamma=1.0 + dgamma * 0.5))
    assert validate_scenario(sc) == []
