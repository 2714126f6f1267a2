"""``btweave`` command line: verify | simulate | emit-smv | render.

Input paths may use the ``builtin:`` prefix to read files shipped with the
package (for example ``builtin:inspection.bt`` or ``builtin:mutants/no_failsafe.bt``).
Exit codes: 0 ok, 1 property or metric failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from html import escape

from . import __version__
from .bt_core import BTError
from .bt_dsl import DslError, load_resource, parse
from .expr import ParseError
from .formal_model import (ModelError, check_invariant, jointly_satisfiable, literal_properties, parse_env,
                           parse_property_file, state_cap_from_env, translate)
from .geo import GeoPoint
from .mission import MissionConfig, MissionError, parse_mission_config
from .smv import emit_smv
from .world_sim import (ScenarioError, Trace, coverage_metrics, parse_scenario, simulate, stored_points,
                        trace_header)

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
BUILTIN = "builtin:"

PHASE_COLORS = {
    "m_search": "#d4a017",  # rows / search
    "m_steering": "#2e8b57",  # goto
    "m_tracking": "#c0392b",
    "m_surface": "#2874a6",
    "m_station": "#6c3483",
}


class InputError(Exception):
    pass


@dataclass
class RunReport:
    verdicts: list[dict] = field(default_factory=list)
    metrics: dict | None = None
    written: list[str] = field(default_factory=list)
    exit_code: int = EXIT_OK


def read_input(path: str) -> str:
    try:
        if path.startswith(BUILTIN):
            return load_resource(path[len(BUILTIN):])
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path!r}: {getattr(exc, 'strerror', None) or exc}") from exc


def atomic_write(path: str, text: str) -> str:
    """Write via a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _load_tree(path: str):
    try:
        return parse(read_input(path))
    except DslError as exc:
        raise InputError(f"{path}: invalid behavior tree\n" + "\n".join(f"  {d}" for d in exc.diagnostics)) from exc


def _load_env(path: str):
    try:
        return parse_env(read_input(path))
    except ParseError as exc:
        raise InputError(f"{path}:{exc}") from exc


def _load_props(path: str):
    try:
        return parse_property_file(read_input(path))
    except ParseError as exc:
        raise InputError(f"{path}:{exc}") from exc


def _mission_defaults(args) -> MissionConfig | None:
    if not args.config:
        return None
    try:
        return parse_mission_config(read_input(args.config))
    except (MissionError, ValueError) as exc:
        raise InputError(f"{args.config}: {exc}") from exc


# -- verify -----------------------------------------------------------------


def cmd_verify(args) -> RunReport:
    report = RunReport()
    tree = _load_tree(args.tree)
    env = _load_env(args.env)
    props = _load_props(args.props) if args.props else _load_props("builtin:builtin.props")
    ts = translate(tree, env)
    if args.literal_eqs:
        props = [p for p in props if p.name.startswith("P0")] + literal_properties()
        if not jointly_satisfiable(ts, literal_properties()):
            print("warning: the literal progress invariants are mutually inconsistent: "
                  "no valuation outside m_surface/m_station satisfies all three", file=sys.stderr)
    cap = state_cap_from_env()
    for prop in props:
        verdict = check_invariant(ts, prop, cap)
        entry = {"property": prop.name, "formula": prop.text, "holds": verdict.holds,
                 "states_explored": verdict.states_explored}
        if verdict.holds:
            print(f"{prop.name}: holds ({verdict.states_explored} states)")
        else:
            path = os.path.join(args.cex_dir, f"{prop.name}.cex.json")
            atomic_write(path, json.dumps({"property": prop.name, "formula": prop.text,
                                           "states": verdict.counterexample}, indent=2) + "\n")
            report.written.append(path)
            entry["counterexample"] = path
            print(f"{prop.name}: FAILS, counterexample of {len(verdict.counterexample)} states in {path}")
            report.exit_code = EXIT_FAIL
        report.verdicts.append(entry)
    held = sum(v["holds"] for v in report.verdicts)
    print(f"{held}/{len(report.verdicts)} properties hold")
    return report


# -- simulate ---------------------------------------------------------------


def _trajectory_csv(trace: Trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "east", "north", "phase"])
    for r in trace.records:
        writer.writerow([r["t"], r["vehicle"]["east"], r["vehicle"]["north"], r["phase"]])
    return buf.getvalue()


def _geojson(trace: Trace, scenario) -> str:
    frame = scenario.frame

    def lonlat(p) -> list[float]:
        lat, lon = frame.to_latlon(GeoPoint(*p))
        return [lon, lat]

    features = []
    for i, pipe in enumerate(scenario.pipelines):
        features.append({"type": "Feature", "properties": {"kind": "pipeline", "index": i,
                                                           "buried": [list(b) for b in pipe.buried]},
                         "geometry": {"type": "LineString", "coordinates": [lonlat(p) for p in pipe.points]}})
    for k, p in enumerate(stored_points(trace)):
        features.append({"type": "Feature", "properties": {"kind": "stored", "order": k},
                         "geometry": {"type": "Point", "coordinates": lonlat(p)}})
    if trace.records:
        track = [lonlat((r["vehicle"]["east"], r["vehicle"]["north"])) for r in trace.records]
        features.append({"type": "Feature", "properties": {"kind": "track"},
                         "geometry": {"type": "LineString", "coordinates": track}})
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=1) + "\n"


def cmd_simulate(args) -> RunReport:
    report = RunReport()
    try:
        scenario = parse_scenario(read_input(args.scenario), _mission_defaults(args))
    except ScenarioError as exc:
        raise InputError(f"{args.scenario}: {exc}") from exc
    tree = _load_tree(args.tree)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    max_time = scenario.max_time if args.max_time is None else args.max_time
    dt = scenario.dt if args.dt is None else args.dt
    if max_time < 0 or dt <= 0:
        raise InputError("--max-time must be >= 0 and --dt > 0")
    if max_time == 0:
        trace = Trace(trace_header(scenario, tree, dt))
    else:
        trace = simulate(scenario, tree, max_time, dt)
    metrics = coverage_metrics(trace, scenario) if trace.records else {"steps": 0}
    report.metrics = metrics
    out = args.out
    outputs = {
        "trace.jsonl": trace.to_jsonl(),
        "trajectory.csv": _trajectory_csv(trace),
        "map.geojson": _geojson(trace, scenario),
        "metrics.json": json.dumps(metrics, indent=2, sort_keys=True) + "\n",
    }
    for name, text in outputs.items():
        report.written.append(atomic_write(os.path.join(out, name), text))
    for key in sorted(metrics):
        print(f"{key}: {metrics[key]}")
    if args.strict and not metrics.get("mission_complete"):
        report.exit_code = EXIT_FAIL
    return report


# -- emit-smv ---------------------------------------------------------------


def cmd_emit_smv(args) -> RunReport:
    report = RunReport()
    tree = _load_tree(args.tree)
    env = _load_env(args.env)
    if args.props:
        props = _load_props(args.props)
    elif args.builtin_props:
        props = _load_props("builtin:builtin.props")
    else:
        props = []
    ts = translate(tree, env)
    text = emit_smv(ts, props, state_cap_from_env())
    if args.out == "-":
        sys.stdout.write(text)
    else:
        report.written.append(atomic_write(args.out, text))
        print(f"wrote {args.out} ({len(ts.names)} variables, {len(props)} specs)")
    return report


# -- render -----------------------------------------------------------------


def render_svg(trace: Trace, width: int = 800, margin: float = 20.0) -> str:
    pipes = trace.header.get("pipelines", [])
    xs, ys = [], []
    for pipe in pipes:
        for e, n in pipe["points"]:
            xs.append(e)
            ys.append(n)
    for r in trace.records:
        xs.append(r["vehicle"]["east"])
        ys.append(r["vehicle"]["north"])
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    span = max(x1 - x0, y1 - y0, 1e-6)
    scale = (width - 2 * margin) / span
    height = int(round((y1 - y0) * scale + 2 * margin))

    def xy(e, n) -> str:
        return f"{margin + (e - x0) * scale:.2f},{height - margin - (n - y0) * scale:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for pipe in pipes:
        pts = " ".join(xy(e, n) for e, n in pipe["points"])
        out.append(f'<polyline class="pipeline" points="{pts}" fill="none" stroke="#888" stroke-width="4"/>')
    # one polyline per run of equal phase; consecutive runs share an endpoint
    runs: list[tuple[str, list]] = []
    for r in trace.records:
        p = (r["vehicle"]["east"], r["vehicle"]["north"])
        if runs and runs[-1][0] == r["phase"]:
            runs[-1][1].append(p)
        else:
            start = [runs[-1][1][-1]] if runs else []
            runs.append((r["phase"], start + [p]))
    for phase, pts in runs:
        color = PHASE_COLORS.get(phase, "#000")
        coords = " ".join(xy(e, n) for e, n in pts)
        out.append(f'<polyline class="path {escape(phase)}" points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
    for r in trace.records:
        if r.get("stored"):
            cx, cy = xy(*r["stored"]).split(",")
            out.append(f'<circle class="stored" cx="{cx}" cy="{cy}" r="1.5" fill="#111"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_render(args) -> RunReport:
    report = RunReport()
    text = read_input(args.trace)
    try:
        trace = Trace.from_jsonl(text)
        svg = render_svg(trace)
    except (ValueError, KeyError, TypeError, ScenarioError) as exc:
        raise InputError(f"{args.trace}: malformed trace ({exc})") from exc
    report.written.append(atomic_write(args.out, svg))
    print(f"wrote {args.out}")
    return report


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btweave", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="mission defaults (key = value file)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check invariants on the tree's transition system")
    p.add_argument("--tree", default="builtin:inspection.bt")
    p.add_argument("--env", default="builtin:default.env")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--props", help="property file, one 'NAME: G (...)' per line")
    group.add_argument("--builtin", action="store_true", help="use the builtin properties (default)")
    p.add_argument("--literal-eqs", action="store_true",
                   help="check the unconditioned progress invariants instead of the phase-conditioned ones")
    p.add_argument("--cex-dir", default="counterexamples", help="where counterexample files go")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="run the closed-loop simulation")
    p.add_argument("--scenario", default="builtin:gap_crossing.scenario")
    p.add_argument("--tree", default="builtin:inspection.bt")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-time", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--out", default="sim_out", help="output directory")
    p.add_argument("--strict", action="store_true", help="exit 1 unless the mission completes")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("emit-smv", help="write the transition system as an SMV model")
    p.add_argument("--tree", default="builtin:inspection.bt")
    p.add_argument("--env", default="builtin:default.env")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--props")
    group.add_argument("--builtin-props", action="store_true")
    p.add_argument("--out", default="-", help="output file ('-' for stdout)")
    p.set_defaults(func=cmd_emit_smv)

    p = sub.add_parser("render", help="draw a trace as SVG")
    p.add_argument("trace")
    p.add_argument("--out", default="trace.svg")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelError, BTError, MissionError, ScenarioError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
