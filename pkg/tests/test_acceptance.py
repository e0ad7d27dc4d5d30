"""Acceptance criteria, each at its stated tolerance, one verdict line per criterion."""
from __future__ import annotations

import time

import numpy as np

from cavtraj.arcs import ArcKind, eval_arc, safety_arc
from cavtraj.domain import VehicleParams
from cavtraj.lead import LeadProfile, LeadSegment, eval_lead
from cavtraj.oracle import run_oracle
from cavtraj.sim import calibration_sweep, preset, random_scenario, run_case
from cavtraj.stitcher import SolverError, check_trajectory, solve_trajectory
from rk4 import rk4_speed

U, S = ArcKind.UNCONSTRAINED, ArcKind.SAFETY
GAMMAS = np.arange(1.0, 4.01, 0.5)
RHOS = np.round(np.arange(0.8, 1.61, 0.1), 2)


def _hits(points, t1, tol1, t2, tol2):
    return [p for p in points
            if p.status == "optimal" and p.template == ("unconstrained", "safety", "unconstrained")
            and abs(p.switching_times[0] - t1) <= tol1 and abs(p.switching_times[1] - t2) <= tol2]


def test_criterion_1_lead_free(report):
    start = time.perf_counter()
    sc = preset("lead_free").scenario
    traj = solve_trajectory(sc)
    T, D, v0 = 26.0, 300.0, 14.0
    u0_ref = 3 * (D - v0 * T) / T**2
    _, _, u0 = traj.eval(traj.t0)
    _, _, uf = traj.eval(traj.tf, "left")
    rep, sol = run_oracle(traj, 2600)
    elapsed = time.perf_counter() - start
    ok = (traj.template == (U,) and abs(u0 - u0_ref) < 1e-12 and abs(u0 + 0.284) < 5e-4 and uf == 0.0
          and sol.converged and rep.cost_gap_rel < 0.01 and rep.max_pos_dev < 0.1 and elapsed < 5.0)
    report("criterion 1: lead-free cubic", ok,
           f"u(t0)={u0:.6f}, u(tf)={uf}, gap={rep.cost_gap_rel:.2e}, pos_dev={rep.max_pos_dev:.2e} m, "
           f"{elapsed:.2f} s")
    assert ok


def test_criterion_2_case1(report):
    start = time.perf_counter()
    _, rec = run_case("case1")
    structure = [a["kind"] for a in rec.arcs] == ["unconstrained", "safety", "unconstrained"]
    hits = _hits(calibration_sweep("case1", GAMMAS, RHOS), 3.1, 0.3, 6.5, 0.5)
    elapsed = time.perf_counter() - start
    ok = structure and bool(hits) and elapsed < 30.0
    best = hits[0] if hits else None
    report("criterion 2: case 1 switching times", ok,
           f"default {['%.3f' % t for t in rec.switching_times]}; "
           + (f"gamma={best.gamma}, rho={best.rho}: t1={best.switching_times[0]:.3f}, "
              f"t2={best.switching_times[1]:.3f}; " if best else "no sweep hit; ")
           + f"{len(hits)} hit(s), {elapsed:.1f} s")
    assert ok


def test_criterion_3_case2(report):
    start = time.perf_counter()
    hits = _hits(calibration_sweep("case2", GAMMAS, RHOS), 2.9, 0.3, 5.3, 0.5)
    elapsed = time.perf_counter() - start
    ok = bool(hits) and elapsed < 30.0
    best = hits[0] if hits else None
    report("criterion 3: case 2 switching times", ok,
           (f"gamma={best.gamma}, rho={best.rho}: t1={best.switching_times[0]:.3f}, "
            f"t2={best.switching_times[1]:.3f}; " if best else "no sweep hit; ")
           + f"{len(hits)} hit(s), {elapsed:.1f} s")
    assert ok


def test_criterion_4_case3(report):
    traj, rec = run_case("case3")
    safety = [a for a in rec.arcs if a["kind"] == "safety"]
    entry = safety[0]["t_enter"] if safety else float("nan")
    ok = (bool(safety) and abs(entry - 3.0) <= 0.3 and rec.arcs[-1]["kind"] == "safety"
          and rec.arcs[-1]["t_exit"] == 26.0 and not rec.feasible and rec.terminal_residual < 0)
    report("criterion 4: case 3 stays on the safety arc", ok,
           f"entry {entry:.3f} s, status {rec.status}, terminal residual {rec.terminal_residual:.3f} m")
    assert ok


def test_criterion_5_invariants(report):
    rng = np.random.default_rng(20240501)
    solved, failed, issues = 0, 0, []
    for k in range(1000):
        sc = random_scenario(rng)
        try:
            traj = solve_trajectory(sc)
        except SolverError:
            failed += 1
            continue
        if not traj.feasible:
            failed += 1
            continue
        solved += 1
        found = check_trajectory(traj, dt=1e-3, state_tol=1e-9, constraint_tol=1e-6)
        if found:
            issues.append((k, found))
    ok = not issues
    report("criterion 5: invariant suite", ok,
           f"{solved} solved, {failed} infeasible or unsolved, {len(issues)} with violations")
    assert ok, issues[:5]


def test_criterion_6_oracle_equivalence(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    both, drawn, bad = 0, 0, []
    gaps, agreements = [], []
    while both < 100:
        drawn += 1
        sc = random_scenario(rng)
        try:
            traj = solve_trajectory(sc)
        except SolverError:
            continue
        if not traj.feasible:
            continue
        rep, sol = run_oracle(traj, 2600)
        if not sol.converged:
            continue
        both += 1
        gaps.append(rep.cost_gap_rel)
        agreements.append(rep.active_set_agreement)
        if not (rep.cost_gap_rel < 0.01 and rep.active_set_agreement > 0.95):
            bad.append((drawn, rep))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 600.0
    report("criterion 6: oracle equivalence", ok,
           f"{both} of {drawn} drawn converged in both; max gap {max(gaps):.2e}, "
           f"min agreement {min(agreements):.4f}, {len(bad)} outside tolerance, {elapsed:.0f} s")
    assert ok, bad[:5]


def test_criterion_7_safety_arc_rk4(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(6):
        prm = VehicleParams(xi=rng.uniform(0.8, 1.2), gamma=rng.uniform(1.0, 4.0), rho=rng.uniform(0.8, 1.6))
        # lead speed of degree <= 2: acceleration alpha + beta*t
        lead = LeadProfile(40.0, rng.uniform(8.0, 16.0),
                           (LeadSegment(0.0, 10.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.05, 0.05)),))
        v0 = rng.uniform(6.0, 18.0)
        p0 = 40.0 - (prm.gamma + prm.rho * v0) / prm.xi
        arc = safety_arc(0.0, 10.0, p0, v0, prm, lead)
        t, v_rk = rk4_speed(lambda s: eval_lead(lead, s)[1], prm.k, 0.0, v0, 10.0, h=1e-5)
        _, v, _ = eval_arc(arc, prm, lead, t)
        worst = max(worst, float(np.max(np.abs(v - v_rk))))
    ok = worst < 1e-8
    report("criterion 7: safety arc vs RK4", ok, f"max speed error {worst:.2e} m/s")
    assert ok
