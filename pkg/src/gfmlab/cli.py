"""Configuration-driven front end: scenario files in, CSV datasets out.

Each command backs one family of workbench artifacts: analytic impedance
and torque profiles, net-damping verdicts, closed-loop pole maps,
reference-step trajectories, raw time-domain traces, and measured
frequency scans. The CSV schemas are the stable contract; SVG plots are
a convenience behind --svg. Every successful run also writes
manifest.toml, a scenario file with all defaults resolved, so any output
directory can be reproduced from the manifest alone.
"""

import argparse
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback, same parser lineage
    import tomli as tomllib

from .closedloop import (
    assemble_model,
    closed_loop_poles,
    damping_ratio,
    step_response,
)
from .converter import (
    CircuitParams,
    InnerLoopParams,
    OuterLoopParams,
    derive_equivalent_impedance,
    solve_operating_point,
)
from .errors import ConfigError, NumericalError
from .sim import SimScenario, TRACE_COLUMNS, scan_impedance, scan_torque, simulate
from .torque import (
    complex_torque_profile,
    default_torque_grid,
    dq_components,
    embed_dq,
    grid_impedance_dq,
    linearized_power_angle,
    net_damping_verdict,
    power_angle_with_avc,
)

try:
    from importlib.metadata import PackageNotFoundError, version

    VERSION = version("gfmlab")
except PackageNotFoundError:  # running from a bare checkout
    VERSION = "0+unknown"

_SECTION_TYPES = {
    "circuit": CircuitParams,
    "outer": OuterLoopParams,
    "inner": InnerLoopParams,
}
_SECTION_KEYS = {
    name: {f.name for f in dataclasses.fields(cls)}
    for name, cls in _SECTION_TYPES.items()
}
_ANALYSIS_DEFAULTS = {
    "case": None,
    "f_min": 1.0,
    "f_max": 100.0,
    "n_points": 200,
    "avc": "active",
    "step_amplitude": 0.1,
    "t_end": 2.0,
    "duration": 1.0,
    "time_step": 5e-5,
    "theta_kick": 0.0,
    "start": "equilibrium",
    "events": [],
    "frequencies": [],
    "amplitude": None,
    "settle": None,
    "window": None,
}


def load_scenario_file(path):
    """Parse and validate a TOML scenario file into section dicts."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    for section in doc:
        if section not in ("circuit", "outer", "inner", "analysis"):
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
    for section, allowed in _SECTION_KEYS.items():
        for key in doc.get(section, {}):
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
    for key in doc.get("analysis", {}):
        if key not in _ANALYSIS_DEFAULTS:
            raise ConfigError(f"{path}: unknown key {key!r} in [analysis]")
    out = {s: dict(doc.get(s, {})) for s in ("circuit", "outer", "inner")}
    out["analysis"] = dict(_ANALYSIS_DEFAULTS, **doc.get("analysis", {}))
    if out["analysis"]["case"] is None:
        out["analysis"]["case"] = p.stem
    return out


def _build_bench(doc):
    """Instantiate the parameter layers; validation errors carry location."""
    built = {}
    for section, cls in _SECTION_TYPES.items():
        try:
            built[section] = cls(**doc[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}")
    circ = built["circuit"]
    outer = built["outer"]
    params = built["inner"]
    try:
        cfg = params.build(circ.omega1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[inner]: {exc}")
    return circ, outer, params, cfg


def _torque_routes(circ, outer, cfg, analysis):
    """Electrical/mechanical torque pair for the configured realization."""
    zeq, _ = derive_equivalent_impedance(cfg, circ.Lf)
    if cfg.frame == "rotating":
        Z = dq_components(zeq)
    else:
        Z = embed_dq(zeq, cfg.omega1)
    Zg = grid_impedance_dq(circ.Lg, cfg.omega1)
    op = solve_operating_point(circ, outer, zeq, frame=cfg.frame)
    if analysis["avc"] == "active":
        elec = power_angle_with_avc(op, Z, Zg, outer.Kiv)
    elif analysis["avc"] == "frozen":
        elec = linearized_power_angle(op, Z, Zg)
    else:
        raise ConfigError(f"[analysis]: unknown avc mode {analysis['avc']!r}")
    return elec, outer.psc_controller(cfg.omega1)


def _frequency_grid(analysis):
    lo, hi, n = analysis["f_min"], analysis["f_max"], analysis["n_points"]
    if not 0.0 < lo < hi:
        raise ConfigError("[analysis]: need 0 < f_min < f_max")
    if int(n) < 2:
        raise ConfigError("[analysis]: n_points must be at least 2")
    return np.geomspace(lo, hi, int(n))


def _scan_kwargs(analysis):
    kw = {}
    for key in ("amplitude", "settle", "window"):
        if analysis[key] is not None:
            kw[key] = analysis[key]
    return kw


def _scan_scenario(circ, outer, cfg, analysis):
    return SimScenario(circ, outer, cfg, time_step=analysis["time_step"])


# each command maps a validated scenario to (columns, rows, plotspec);
# plotspec drives the optional SVG and is None when a plot adds nothing

def _cmd_impedance(doc):
    circ, outer, params, cfg = _build_bench(doc)
    zeq, _ = derive_equivalent_impedance(cfg, circ.Lf)
    rows = []
    for f in _frequency_grid(doc["analysis"]):
        z = complex(zeq(2j * math.pi * f))
        rows.append((f, z.real, z.imag))
    return ("f_hz", "re_pu", "im_pu"), rows, {"ys": (1, 2), "logx": True}


def _cmd_torque(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    elec, gpsc = _torque_routes(circ, outer, cfg, analysis)
    grid = 2.0 * math.pi * _frequency_grid(analysis)
    prof = complex_torque_profile(elec, gpsc, grid)
    rows = [
        (w / (2.0 * math.pi), ke, de, km, dm)
        for w, ke, de, km, dm in zip(prof.omega, prof.Ke, prof.De, prof.Km, prof.Dm)
    ]
    return ("f_hz", "Ke", "De", "Km", "Dm"), rows, {"ys": (1, 2, 3, 4), "logx": True}


def _cmd_verdict(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    elec, gpsc = _torque_routes(circ, outer, cfg, analysis)
    # the verdict grid is pinned to the full band regardless of f_min/f_max
    grid = default_torque_grid(max(400, int(analysis["n_points"])))
    verdict = net_damping_verdict(
        complex_torque_profile(elec, gpsc, grid), cfg.omega1
    )
    if verdict.critical_modes:
        worst = min(verdict.critical_modes, key=lambda m: m.net_damping)
        row = (
            analysis["case"],
            verdict.stable,
            worst.label,
            worst.omega_star / (2.0 * math.pi),
            worst.net_damping,
        )
    else:
        row = (analysis["case"], verdict.stable, "none", "", "")
    return ("case", "stable", "mode", "f_star_hz", "net_damping"), [row], None


def _cmd_poles(doc):
    circ, outer, params, cfg = _build_bench(doc)
    zeq, geq = derive_equivalent_impedance(cfg, circ.Lf)
    op = solve_operating_point(circ, outer, zeq, geq=geq, frame=cfg.frame)
    poles = closed_loop_poles(assemble_model(circ, outer, cfg, op))
    order = np.lexsort((-poles.imag, -poles.real))
    rows = [
        (cfg.frame, p.real, p.imag, damping_ratio(p)) for p in poles[order]
    ]
    return ("realization", "re", "im", "zeta"), rows, {
        "x": 1, "ys": (2,), "scatter": True}


def _cmd_step(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    zeq, geq = derive_equivalent_impedance(cfg, circ.Lf)
    op = solve_operating_point(circ, outer, zeq, geq=geq, frame=cfg.frame)
    model = assemble_model(circ, outer, cfg, op)
    res = step_response(
        model, amplitude=analysis["step_amplitude"], t_end=analysis["t_end"]
    )
    rows = list(zip(res.t, res.y))
    return ("t_s", "dP_pu"), rows, {"ys": (1,)}


def _sim_scenario(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    events = tuple(tuple(ev) for ev in analysis["events"])
    return SimScenario(
        circ,
        outer,
        cfg,
        time_step=analysis["time_step"],
        duration=analysis["duration"],
        events=events,
        start=analysis["start"],
        theta_kick=analysis["theta_kick"],
    )


def _cmd_simulate(doc):
    trace = simulate(_sim_scenario(doc))
    cols = [trace.t, trace.i_alpha, trace.i_beta, trace.v_alpha,
            trace.v_beta, trace.P, trace.Q, trace.theta, trace.E]
    rows = list(zip(*cols))
    return TRACE_COLUMNS, rows, {"ys": (5,)}


def _scan_frequencies(analysis, command):
    freqs = analysis["frequencies"]
    if not freqs:
        raise ConfigError(
            f"[analysis]: frequencies is required for {command}"
        )
    return [float(f) for f in freqs]


def _cmd_scan_z(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    res = scan_impedance(
        _scan_scenario(circ, outer, cfg, analysis),
        _scan_frequencies(analysis, "scan-z"),
        **_scan_kwargs(analysis),
    )
    rows = [(f, z.real, z.imag) for f, z in zip(res.frequencies, res.values)]
    return ("f_hz", "re_pu", "im_pu"), rows, {"ys": (1, 2), "logx": True}


def _cmd_scan_t(doc):
    analysis = doc["analysis"]
    circ, outer, params, cfg = _build_bench(doc)
    if analysis["avc"] not in ("active", "frozen"):
        raise ConfigError(f"[analysis]: unknown avc mode {analysis['avc']!r}")
    res = scan_torque(
        _scan_scenario(circ, outer, cfg, analysis),
        _scan_frequencies(analysis, "scan-t"),
        avc=analysis["avc"],
        **_scan_kwargs(analysis),
    )
    gpsc = outer.psc_controller(cfg.omega1)
    rows = []
    for f, g in zip(res.frequencies, res.values):
        w = 2.0 * math.pi * f
        inv = 1.0 / complex(gpsc(1j * w))
        rows.append((f, g.real, g.imag / w, inv.real, inv.imag / w))
    return ("f_hz", "Ke", "De", "Km", "Dm"), rows, {"ys": (1, 2, 3, 4), "logx": True}


COMMANDS = {
    "impedance": _cmd_impedance,
    "torque": _cmd_torque,
    "verdict": _cmd_verdict,
    "poles": _cmd_poles,
    "step": _cmd_step,
    "simulate": _cmd_simulate,
    "scan-z": _cmd_scan_z,
    "scan-t": _cmd_scan_t,
}


# -- sweep plumbing

def parse_sweep(spec):
    key, eq, rest = spec.partition("=")
    values = [v.strip() for v in rest.split(",") if v.strip()]
    if not eq or not key.strip() or not values:
        raise ConfigError("sweep spec must look like key=v1,v2,...")
    return key.strip(), values


def resolve_sweep_key(key):
    """Map a sweep key to (section, field), accepting bare unique names."""
    if "." in key:
        section, _, field = key.partition(".")
        if section not in _SECTION_KEYS or field not in _SECTION_KEYS[section]:
            raise ConfigError(f"invalid parameter path {key!r}")
        return section, field
    hits = [
        (section, key)
        for section, allowed in _SECTION_KEYS.items()
        if key in allowed
    ]
    if not hits:
        raise ConfigError(f"invalid parameter path {key!r}")
    if len(hits) > 1:
        names = ", ".join(f"{s}.{key}" for s, _ in hits)
        raise ConfigError(f"ambiguous sweep key {key!r}; use one of {names}")
    return hits[0]


def _cast_sweep_values(section, field, raw):
    caster = type(getattr(_SECTION_TYPES[section](), field))
    out = []
    for v in raw:
        try:
            out.append(caster(v))
        except ValueError:
            raise ConfigError(
                f"sweep value {v!r} is not a valid {section}.{field}"
            )
    return out


def _with_override(doc, section, field, value):
    out = {s: dict(doc[s]) for s in doc}
    out[section][field] = value
    return out


# -- formatting

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest digits that parse back exactly
    return str(v)


def render_csv(columns, rows):
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r} into the manifest")


def render_manifest(command, config_path, doc, sweep_spec):
    """A reproduction recipe that is itself a valid scenario file."""
    lines = [
        f"# gfmlab {VERSION}",
        f"# command: {command}",
        f"# source config: {config_path}",
    ]
    if sweep_spec:
        lines.append(f"# sweep: --sweep {sweep_spec}")
    for section in ("circuit", "outer", "inner"):
        lines.append("")
        lines.append(f"[{section}]")
        resolved = dataclasses.asdict(_SECTION_TYPES[section](**doc[section]))
        for key, value in resolved.items():
            lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    lines.append("[analysis]")
    for key in _ANALYSIS_DEFAULTS:
        value = doc["analysis"][key]
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


# -- minimal SVG line plots; the CSV stays the contract

_PALETTE = ("#268bd2", "#dc322f", "#859900", "#b58900", "#6c71c4", "#2aa198")


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def render_svg(columns, rows, plot, title):
    x_idx = plot.get("x", 0)
    scatter = plot.get("scatter", False)
    logx = plot.get("logx", False)
    series = []
    groups = {}
    has_sweep = columns[-1] == "sweep" and "sweep" not in (columns[x_idx],)
    if has_sweep:
        for row in rows:
            groups.setdefault(row[-1], []).append(row)
        y_idx = plot["ys"][0]
        for label, rws in groups.items():
            series.append((f"{columns[y_idx]} @ sweep={_fmt(label)}", rws, y_idx))
    else:
        for y_idx in plot["ys"]:
            series.append((columns[y_idx], rows, y_idx))

    def xval(row):
        x = float(row[x_idx])
        return math.log10(x) if logx else x

    xs_all = [xval(r) for _, rws, _ in series for r in rws]
    ys_all = [float(r[y]) for _, rws, y in series for r in rws]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 - x0 < 1e-12:
        x1 = x0 + 1.0
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    width, height, ml, mr, mt, mb = 640, 400, 70, 15, 30, 45

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for xt in _ticks(x0, x1):
        X = px(xt)
        label = f"{10 ** xt:.3g}" if logx else f"{xt:.3g}"
        parts.append(
            f'<line x1="{X:.1f}" y1="{mt}" x2="{X:.1f}" y2="{height - mb}" '
            f'stroke="#dddddd"/>'
            f'<text x="{X:.1f}" y="{height - mb + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{label}</text>'
        )
    for yt in _ticks(y0, y1):
        Y = py(yt)
        parts.append(
            f'<line x1="{ml}" y1="{Y:.1f}" x2="{width - mr}" y2="{Y:.1f}" '
            f'stroke="#dddddd"/>'
            f'<text x="{ml - 6}" y="{Y + 3:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{yt:.3g}</text>'
        )
    parts.append(
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" '
        f'height="{height - mt - mb}" fill="none" stroke="#333333"/>'
    )
    for k, (label, rws, y_idx) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        pts = [(px(xval(r)), py(float(r[y_idx]))) for r in rws]
        if scatter:
            parts.extend(
                f'<circle cx="{X:.1f}" cy="{Y:.1f}" r="3" fill="{color}"/>'
                for X, Y in pts
            )
        else:
            path = " ".join(f"{X:.1f},{Y:.1f}" for X, Y in pts)
            parts.append(
                f'<polyline points="{path}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>'
            )
        ly = mt + 16 + 14 * k
        parts.append(
            f'<line x1="{width - mr - 130}" y1="{ly - 4}" '
            f'x2="{width - mr - 110}" y2="{ly - 4}" stroke="{color}" '
            f'stroke-width="2"/>'
            f'<text x="{width - mr - 105}" y="{ly}" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- orchestration

def run(command, config_path, sweep_spec=None, svg=False, jobs=1):
    """Execute one command, returning {filename: text} ready to write."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    doc = load_scenario_file(config_path)
    fn = COMMANDS[command]
    if sweep_spec is None:
        columns, rows, plot = fn(doc)
    else:
        key, raw = parse_sweep(sweep_spec)
        section, field = resolve_sweep_key(key)
        values = _cast_sweep_values(section, field, raw)
        docs = [_with_override(doc, section, field, v) for v in values]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(fn, docs))
        else:
            results = [fn(d) for d in docs]
        columns, _, plot = results[0]
        columns = tuple(columns) + ("sweep",)
        rows = [
            tuple(row) + (v,)
            for v, (_, point_rows, _) in zip(values, results)
            for row in point_rows
        ]
    name = command.replace("-", "_")
    files = {f"{name}.csv": render_csv(columns, rows)}
    if svg and plot is not None:
        files[f"{name}.svg"] = render_svg(columns, rows, plot, command)
    files["manifest.toml"] = render_manifest(command, config_path, doc, sweep_spec)
    return files


def write_outputs(out_dir, files):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for name, text in files.items():
            path = out / name
            path.write_text(text)
            written.append(path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return [str(p) for p in written]


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gfmlab",
        description="Small-signal stability workbench for grid-forming "
        "converters: analytic impedance and torque profiles, stability "
        "verdicts, pole maps, and time-domain scans from one scenario file.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="TOML scenario file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument(
        "--sweep", metavar="KEY=V1,V2,...",
        help="repeat the command over parameter values, long-format output",
    )
    parser.add_argument("--svg", action="store_true", help="also write a plot")
    parser.add_argument("--jobs", type=int, default=1,
                        help="concurrent sweep evaluations")
    args = parser.parse_args(argv)
    try:
        files = run(args.command, args.config, sweep_spec=args.sweep,
                    svg=args.svg, jobs=args.jobs)
        write_outputs(args.out, files)
    except (ConfigError, ValueError) as exc:
        print(f"gfmlab: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"gfmlab: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"gfmlab: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
