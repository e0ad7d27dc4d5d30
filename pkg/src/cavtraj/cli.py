"""Command-line front end: scenario files, case runs, CSV and JSON output.

Scenario files are JSON documents::

    {
      "name": "case1",
      "params": {"xi": 1.0, "gamma": 1.5, "rho": 1.2, "u_min": -1.0,
                 "u_max": 1.0, "v_min": 0.1, "v_max": 25.0},
      "boundary": {"t0": 0.0, "tf": 26.0, "pf": 300.0, "v0": 14.0,
                   "p0": 0.0, "s0": null},
      "lead": {"p_init": 20.0, "v_init": 11.5,
               "segments": [{"t_start": 0.0, "t_end": 26.0,
                             "alpha": 0.0, "beta": 0.0}]}
    }

``params`` entries, ``p0``, ``s0`` and ``name`` are optional; ``lead`` may be
``null`` or absent.  A lead segment accelerates as ``alpha + beta*t``.

Exit codes: 0 optimal, 1 infeasible or failed solve, 2 input error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cavtraj.domain import BoundaryConditions, Scenario, ScenarioError, VehicleParams, validate_scenario
from cavtraj.lead import LeadProfile, LeadSegment, eval_lead
from cavtraj.sim import PRESET_IDS, SummaryRecord, preset, run_scenario
from cavtraj.stitcher import Trajectory

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_IO = 0, 1, 2, 3
CSV_HEADER = ("t", "p", "v", "u", "s", "delta", "arc_kind", "lead_p", "lead_v")
NA = "NA"
_BOUNDARY_REQUIRED = ("t0", "tf", "pf", "v0")
_OVERRIDES = {"gamma": "gamma", "rho": "rho", "xi": "xi", "vmin": "v_min", "vmax": "v_max"}


class InputError(ValueError):
    """Malformed or invalid scenario input."""


@dataclass(frozen=True)
class RunConfig:
    input: str
    out: Path = Path("out")
    sample_dt: float = 0.01
    oracle: bool = False
    oracle_n: int = 2600
    overrides: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not self.sample_dt > 0:
            raise InputError("--dt must be positive")
        if self.oracle_n < 2:
            raise InputError("--oracle-n must be at least 2")


# ---------------------------------------------------------------------------
# scenario files


def scenario_to_dict(sc: Scenario) -> dict:
    lead = None
    if sc.lead is not None:
        lead = {
            "p_init": float(sc.lead.p_init),
            "v_init": float(sc.lead.v_init),
            "segments": [{k: float(v) for k, v in asdict(s).items()} for s in sc.lead.segments],
        }
    bc = {k: (None if v is None else float(v)) for k, v in asdict(sc.bc).items()}
    return {
        "name": sc.name,
        "params": {k: float(v) for k, v in asdict(sc.params).items()},
        "boundary": bc,
        "lead": lead,
    }


def _number(obj: dict, key: str, where: str, required: bool = True, default=None):
    if key not in obj:
        if required:
            raise InputError(f"{where}: missing required field {key!r}")
        return default
    val = obj[key]
    if val is None and not required:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise InputError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def _section(doc: dict, key: str, required: bool) -> Optional[dict]:
    val = doc.get(key)
    if val is None:
        if required:
            raise InputError(f"missing required field {key!r}")
        return None
    if not isinstance(val, dict):
        raise InputError(f"{key}: expected an object")
    return val


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a validated :class:`Scenario`; raises :class:`InputError` or :class:`ScenarioError`."""
    if not isinstance(doc, dict):
        raise InputError("scenario document must be a JSON object")
    prm_doc = _section(doc, "params", required=False) or {}
    known = {f.name for f in fields(VehicleParams)}
    unknown = set(prm_doc) - known
    if unknown:
        raise InputError(f"params: unknown field(s) {', '.join(sorted(unknown))}")
    prm = VehicleParams(**{k: _number(prm_doc, k, "params") for k in prm_doc})
    bc_doc = _section(doc, "boundary", required=True)
    bc = BoundaryConditions(
        **{k: _number(bc_doc, k, "boundary") for k in _BOUNDARY_REQUIRED},
        p0=_number(bc_doc, "p0", "boundary", required=False, default=0.0),
        s0=_number(bc_doc, "s0", "boundary", required=False),
    )
    lead = None
    lead_doc = _section(doc, "lead", required=False)
    if lead_doc is not None:
        segs_doc = lead_doc.get("segments")
        if not isinstance(segs_doc, list) or not segs_doc:
            raise InputError("lead.segments: expected a nonempty list")
        segs = []
        for i, sd in enumerate(segs_doc):
            where = f"lead.segments[{i}]"
            if not isinstance(sd, dict):
                raise InputError(f"{where}: expected an object")
            segs.append(LeadSegment(
                _number(sd, "t_start", where), _number(sd, "t_end", where),
                _number(sd, "alpha", where, required=False, default=0.0),
                _number(sd, "beta", where, required=False, default=0.0),
            ))
        try:
            lead = LeadProfile(_number(lead_doc, "p_init", "lead"), _number(lead_doc, "v_init", "lead"),
                               tuple(segs))
        except ValueError as exc:
            raise InputError(f"lead: {exc}") from exc
    name = doc.get("name", "scenario")
    if not isinstance(name, str):
        raise InputError("name: expected a string")
    sc = Scenario(prm, bc, lead, name=name)
    violations = validate_scenario(sc)
    if violations:
        raise ScenarioError(violations)
    return sc


def load_scenario(path) -> Scenario:
    """Read a scenario file; parse errors report the line, schema errors the field."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


def resolve_input(target: str, overrides: Sequence[tuple[str, float]] = ()) -> Scenario:
    """A preset id or a scenario file path, with calibration overrides applied."""
    if target in PRESET_IDS:
        sc = preset(target).scenario
    else:
        path = Path(target)
        if not path.is_file():
            raise InputError(f"{target!r} is neither a preset ({', '.join(PRESET_IDS)}) nor a file")
        sc = load_scenario(path)
    if overrides:
        sc = replace(sc, params=replace(sc.params, **dict(overrides)))
        violations = validate_scenario(sc)
        if violations:
            raise ScenarioError(violations)
    return sc


# ---------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    return repr(float(x))


def sample_times(traj: Trajectory, dt: float) -> list[tuple[float, str]]:
    """Grid times plus each junction twice (left then right limit), increasing."""
    t0, tf = traj.t0, traj.tf
    n = int(math.floor((tf - t0) / dt + 1e-9))
    grid = t0 + dt * np.arange(n + 1)
    if tf - grid[-1] > 1e-9 * max(1.0, abs(tf)):
        grid = np.append(grid, tf)
    grid[-1] = tf
    junctions = np.array([a.t_enter for a in traj.arcs[1:]])
    if junctions.size:
        near = np.min(np.abs(grid[:, None] - junctions[None, :]), axis=1) <= 1e-12
        grid = grid[~near]
    rows = [(float(t), "right") for t in grid]
    rows += [(float(t), side) for t in junctions for side in ("left", "right")]
    order = {"left": 0, "right": 1}
    return sorted(rows, key=lambda r: (r[0], order[r[1]]))


def export_trajectory(traj: Trajectory, sample_dt: float, path) -> int:
    """Write the sampled trajectory as CSV; returns the number of data rows."""
    sc = traj.scenario
    prm = sc.params
    rows = sample_times(traj, sample_dt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for t, side in rows:
            p, v, u = traj.eval(t, side)
            kind = traj.arcs[int(traj.arc_index(t, side))].kind.value
            delta = prm.gamma + prm.rho * v
            if sc.lead is None:
                s_val = delta_val = lp = lv = NA
            else:
                pk, vk, _ = eval_lead(sc.lead, t)
                s_val, delta_val = _fmt(prm.xi * (pk - p)), _fmt(delta)
                lp, lv = _fmt(pk), _fmt(vk)
            w.writerow([_fmt(t), _fmt(p), _fmt(v), _fmt(u), s_val, delta_val, kind, lp, lv])
    return len(rows)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def summary_dict(rec: SummaryRecord) -> dict:
    return _jsonable({
        "scenario": scenario_to_dict(rec.scenario),
        "status": rec.status,
        "message": rec.message,
        "feasible": rec.feasible,
        "arcs": rec.arcs,
        "junctions": rec.junctions,
        "total_cost": rec.total_cost,
        "min_margins": rec.min_margins,
        "terminal_residual": rec.terminal_residual,
        "solve_seconds": rec.solve_seconds,
        "oracle": rec.oracle,
    })


def emit_summary(rec: SummaryRecord, path) -> None:
    Path(path).write_text(json.dumps(summary_dict(rec), indent=2) + "\n")


# ---------------------------------------------------------------------------
# runs


def run(cfg: RunConfig) -> int:
    """Solve one scenario and write ``trajectory.csv`` and ``summary.json``."""
    try:
        sc = resolve_input(cfg.input, cfg.overrides)
    except OSError as exc:
        print(f"error: cannot read {cfg.input}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ScenarioError as exc:
        print("error: invalid scenario:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v.field}: {v.message}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    traj, rec = run_scenario(sc, oracle=cfg.oracle, oracle_n=cfg.oracle_n)
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        if traj is not None:
            export_trajectory(traj, cfg.sample_dt, cfg.out / "trajectory.csv")
        emit_summary(rec, cfg.out / "summary.json")
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    arcs = ", ".join(f"{a['kind']} [{a['t_enter']:.3f}, {a['t_exit']:.3f}]" for a in rec.arcs)
    print(f"{sc.name}: {rec.status}; cost {rec.total_cost:.6g}; {arcs}")
    if rec.status != "optimal":
        print(f"  {rec.message}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _run_batch_item(cfg: RunConfig) -> int:
    return run(cfg)


def run_batch(directory: Path, base: RunConfig, workers: Optional[int] = None) -> int:
    """Run every ``*.json`` in ``directory`` concurrently; returns the worst exit code."""
    if not directory.is_dir():
        print(f"error: {directory} is not a directory", file=sys.stderr)
        return EXIT_INPUT
    files = sorted(directory.glob("*.json"))
    if not files:
        print(f"error: no *.json scenarios in {directory}", file=sys.stderr)
        return EXIT_INPUT
    cfgs = [replace(base, input=str(f), out=base.out / f.stem) for f in files]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        codes = list(pool.map(_run_batch_item, cfgs))
    return max(codes)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cavtraj", description="Energy-optimal trajectories under a safety constraint.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve a preset or scenario file")
    solve.add_argument("target", nargs="?", help=f"preset id ({', '.join(PRESET_IDS)}) or scenario JSON file")
    solve.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    solve.add_argument("--dt", type=float, default=0.01, help="CSV sampling step in s (default: 0.01)")
    solve.add_argument("--oracle", action="store_true", help="compare against the transcribed QP")
    solve.add_argument("--oracle-n", type=int, default=2600, help="QP grid size (default: 2600)")
    for flag in _OVERRIDES:
        solve.add_argument(f"--{flag}", type=float, help=f"override {_OVERRIDES[flag]}")
    solve.add_argument("--batch", type=Path, metavar="DIR", help="solve every *.json in DIR")
    solve.add_argument("--workers", type=int, help="processes for --batch")

    dump = sub.add_parser("scenario", help="write a preset as a scenario file")
    dump.add_argument("preset", choices=PRESET_IDS)
    dump.add_argument("-o", "--output", type=Path, help="file to write (default: stdout)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "scenario":
        text = json.dumps(scenario_to_dict(preset(args.preset).scenario), indent=2) + "\n"
        if args.output is None:
            sys.stdout.write(text)
            return EXIT_OK
        try:
            args.output.write_text(text)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        return EXIT_OK

    overrides = tuple((_OVERRIDES[k], getattr(args, k)) for k in _OVERRIDES if getattr(args, k) is not None)
    if (args.target is None) == (args.batch is None):
        ap.error("give exactly one of a target or --batch DIR")
    try:
        cfg = RunConfig(args.target or "", args.out, args.dt, args.oracle, args.oracle_n, overrides)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.batch is not None:
        return run_batch(args.batch, cfg, args.workers)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
