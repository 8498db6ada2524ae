"""Command-line front end: ``dcroa <command> --network FILE [options]``.

Commands
--------
certify      certificate file plus report (beta, voltage floor, timings)
synthesize   stability-constrained setpoints (reuses ``--certificate`` when given)
simulate     simulate from the operating-box vertices around the synthesized point
roa2d        2-D region-of-attraction grid for a two-state network
sensitivity  re-run the design over a parameter sweep

Exit codes: 0 success, 2 input/parse error, 3 infeasible, 4 solver or
integrator failure, 5 falsification (a certified point failed in simulation).

Numeric reports (``report.json``) are deterministic for identical inputs;
wall-clock timings go to a separate ``timings.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from . import conic
from .certify import Certificate, CertificationError, EquilibriumTooClose, certify
from .netmodel import NetworkError, NetworkSpec, build_dynamics, fingerprint, halfwidth_vector, load_network, working_model
from .sim import (BorderlineError, SimOptions, SimulationError, Units, borderline_design, box_vertices,
                  relative_difference, roa_grid_2d, sweep_starts)
from .steadystate import PowerFlowError, SynthesisInfeasible, SynthesisSpec, power_flow, run_pipeline, solve_synthesis

log = logging.getLogger("dcroa")

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_FALSIFIED = 0, 2, 3, 4, 5

TOL_PROFILES = {
    "default": conic.DEFAULT_TOL,
    "tight": conic.Tolerances(residual=1e-9, check_residual=1e-8, psd=1e-8, bisection=1e-4),
    "loose": conic.Tolerances(residual=1e-7, check_residual=1e-6, psd=1e-6, bisection=1e-2),
}
SWEEP_PARAMETERS = ("cpl", "shunt", "inductance", "capacitance", "range")


class Falsified(RuntimeError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - source checkout
        return "0"


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_box(text: str, spec: NetworkSpec) -> dict:
    """``--box``: ``I,V`` pair, a full per-state vector, or a JSON file."""
    p = Path(text)
    if p.suffix == ".json" or p.is_file():
        try:
            doc = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read box file {text}: {exc}") from exc
        if isinstance(doc, dict):
            doc = doc.get("operating_halfwidth", doc)
            return {k: doc[k] for k in ("current", "voltage", "states") if k in doc}
        values = doc
    else:
        try:
            values = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
        except ValueError as exc:
            raise InputError(f"bad --box value {text!r}") from exc
    values = [float(v) for v in values]
    if len(values) == 2 and spec.n != 2:
        return {"current": values[0], "voltage": values[1]}
    if len(values) == spec.n:
        return {"states": values}
    if len(values) == 2:
        return {"current": values[0], "voltage": values[1]}
    raise InputError(f"--box needs 2 or {spec.n} values, got {len(values)}")


def _load(args) -> tuple[NetworkSpec, NetworkSpec]:
    """Returns ``(document spec, working spec)`` after applying ``--box``/``--per-unit``."""
    try:
        spec = load_network(args.network)
    except OSError as exc:
        raise InputError(f"cannot read {args.network}: {exc}") from exc
    if getattr(args, "box", None):
        spec = dataclasses.replace(spec, halfwidth=_parse_box(args.box, spec))
    if getattr(args, "per_unit", False):
        spec = dataclasses.replace(spec, per_unit=True)
    work = working_model(spec)
    halfwidth_vector(work)  # validate the box early
    return spec, work


def _manifest(args, spec: NetworkSpec, work: NetworkSpec, extra_inputs=()) -> dict:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    inputs = {"network": {"path": str(args.network), "sha256": _file_hash(args.network)}}
    for name, path in extra_inputs:
        inputs[name] = {"path": str(path), "sha256": _file_hash(path)}
    return {
        "command": args.command,
        "inputs": inputs,
        "network_hash": fingerprint(work),
        "options": opts,
        "units": "per-unit" if work.normalized else "SI",
        "tool_version": _version(),
    }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _volts(work: NetworkSpec, values) -> list:
    values = np.asarray(values, dtype=float)
    return (values * work.base_voltage if work.normalized else values).tolist()


def _sim_options(args) -> SimOptions:
    return SimOptions(integrator=args.integrator, t_max=args.t_max)


# ---------------------------------------------------------------------------
# commands


def cmd_certify(args) -> int:
    spec, work = _load(args)
    M = build_dynamics(work)
    cert = certify(work, TOL_PROFILES[args.tol], matrices=M)
    cert.network_hash = fingerprint(work)
    out = _out(args)
    cdoc = cert.to_dict()
    timings = cdoc.pop("timings")
    _write_json(out / "certificate.json", cdoc)
    report = {
        "manifest": _manifest(args, spec, work),
        "beta": cert.lpv.beta,
        "beta_unbounded": cert.lpv.unbounded,
        "voltage_floor": cert.floor.tolist(),
        "voltage_floor_volts": _volts(work, cert.floor),
        "dx_inf": cert.dx_inf.tolist(),
        "load_states": cdoc["load_states"],
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", timings)
    for k, v in timings.items():
        log.info("certify %s: %.4g", k, v)
    print(f"beta={cert.lpv.beta:.6g} floor(V)={np.round(_volts(work, cert.floor), 4).tolist()}")
    return EXIT_OK


def _certificate_for(args, work: NetworkSpec, M):
    if getattr(args, "certificate", None):
        try:
            doc = json.loads(Path(args.certificate).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read certificate {args.certificate}: {exc}") from exc
        if doc.get("network_hash") != fingerprint(work):
            raise InputError("certificate was produced for a different network (hash mismatch)")
        try:
            return Certificate.from_dict(doc, M)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed certificate: {exc}") from exc
    cert = certify(work, TOL_PROFILES[args.tol], matrices=M)
    cert.network_hash = fingerprint(work)
    return cert


def _synthesize(args, work):
    M = build_dynamics(work)
    cert = _certificate_for(args, work, M)
    result = solve_synthesis(SynthesisSpec(work, M, cert.floor, args.objective), cert, TOL_PROFILES[args.tol])
    if not result.verdict:
        raise Falsified("synthesized point fails its own certificate")
    return M, cert, result


def cmd_synthesize(args) -> int:
    spec, work = _load(args)
    M, cert, result = _synthesize(args, work)
    out = _out(args)
    extra = [("certificate", args.certificate)] if args.certificate else []
    rdoc = result.to_dict(M)
    timings = {**cert.timings, **rdoc.pop("timings")}
    report = {
        "manifest": _manifest(args, spec, work, extra),
        "setpoints": result.point.u.tolist(),
        "setpoints_volts": _volts(work, result.point.u),
        "source_buses": [b.id for b in work.sources],
        "voltage_floor": cert.floor.tolist(),
        "load_voltages": result.point.v_load.tolist(),
        "result": rdoc,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", timings)
    print(f"setpoints={np.round(result.point.u, 6).tolist()} relaxation={result.relaxation}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec, work = _load(args)
    M = build_dynamics(work)
    cert = None
    if args.u:
        u = np.array([float(v) for v in args.u.split(",")])
        if work.normalized and not args.u_per_unit:
            u = u / work.base_voltage
        xe = power_flow(M, u).x
    else:
        M, cert, result = _synthesize(args, work)
        u, xe = result.point.u, result.point.x
    hw = halfwidth_vector(work)
    starts = box_vertices(xe, hw) if M.n <= args.max_vertices else _sample_vertices(xe, hw, args)
    units = Units.of(work, M)
    trajs = sweep_starts(M, u, starts, xe, _sim_options(args), units=units)
    out = _out(args)
    with open(out / "vertices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "classification", "final_distance", "min_load_voltage"])
        for k, tr in enumerate(trajs):
            w.writerow([k, tr.classification, repr(tr.final_distance), repr(tr.min_load_voltage)])
    counts = {c: sum(tr.classification == c for tr in trajs) for c in ("converged", "diverged", "undecided")}
    report = {
        "manifest": _manifest(args, spec, work),
        "u": u.tolist(),
        "equilibrium": xe.tolist(),
        "starts": len(trajs),
        "exhaustive": bool(M.n <= args.max_vertices),
        "counts": counts,
    }
    _write_json(out / "report.json", report)
    print(f"{counts}")
    if cert is not None and counts["converged"] != len(trajs):
        raise Falsified(f"{len(trajs) - counts['converged']} certified vertex starts did not converge")
    return EXIT_OK


def _sample_vertices(xe, hw, args) -> np.ndarray:
    rng = np.random.default_rng(args.seed)
    signs = rng.choice([-1.0, 1.0], size=(args.samples, len(xe)))
    return xe + signs * hw


def cmd_roa2d(args) -> int:
    spec, work = _load(args)
    M = build_dynamics(work)
    if M.n != 2:
        raise InputError("roa2d needs a two-state network")
    hw = halfwidth_vector(work)
    window = args.window_factor * hw
    units = Units.of(work, M)
    u = float(args.u) / (work.base_voltage if work.normalized else 1.0)
    opts = dataclasses.replace(_sim_options(args), samples=201)
    roa = roa_grid_2d(M, u, window, points=args.points, opts=opts, units=units)
    out = _out(args)
    labels = [M.layout.labels[0], M.layout.labels[1]]
    roa.to_csv(out / "grid.csv", labels)
    with open(out / "boundary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in roa.boundary])
    report = {"manifest": _manifest(args, spec, work), **roa.summary(), "box_inside": roa.contains_box(hw)}
    report.pop("boundary")
    _write_json(out / "report.json", report)
    print(f"converged={report['converged']} box_inside={report['box_inside']}")
    return EXIT_OK


def _variant(spec: NetworkSpec, parameter: str, value: str) -> NetworkSpec:
    rep = dataclasses.replace
    if parameter == "range":
        cur, volt = (float(v) for v in value.split(":"))
        return rep(spec, halfwidth={"current": cur, "voltage": volt})
    x = float(value)
    if parameter == "cpl":
        buses = tuple(rep(b, cpl_power=-abs(x)) if b.has_cpl else b for b in spec.buses)
        return rep(spec, buses=buses)
    if parameter == "shunt":
        return rep(spec, buses=tuple(rep(b, shunt_resistance=x) if b.has_cpl else b for b in spec.buses))
    if parameter == "capacitance":
        return rep(spec, buses=tuple(rep(b, capacitance=x) for b in spec.buses))
    if parameter == "inductance":
        buses = tuple(rep(b, source_inductance=x) if b.source_inductance is not None else b for b in spec.buses)
        return rep(spec, buses=buses, lines=tuple(rep(l, inductance=x) for l in spec.lines))
    raise InputError(f"unknown sweep parameter {parameter!r}")


def _sweep_row(job):
    spec, parameter, value, objective, tol, borderline, t_max = job
    variant = _variant(spec, parameter, value)
    work = working_model(variant)
    row = {"parameter": parameter, "value": value}
    try:
        cert, result, _ = run_pipeline(variant, objective, TOL_PROFILES[tol])
    except (CertificationError, SynthesisInfeasible, EquilibriumTooClose) as exc:
        row["status"] = f"infeasible: {exc}"
        return row
    row.update(status="ok", beta=cert.lpv.beta, floor=_volts(work, cert.floor), u=_volts(work, result.point.u))
    if borderline:
        M = build_dynamics(work)
        bl = borderline_design(M, halfwidth_vector(work), opts=SimOptions(t_max=t_max), units=Units.of(work, M))
        u_b = _volts(work, [bl.u_min])[0]
        row.update(u_border=u_b, rd=relative_difference(row["u"][0], u_b))
    return row


def cmd_sensitivity(args) -> int:
    spec, work = _load(args)
    if args.parameter not in SWEEP_PARAMETERS:
        raise InputError(f"--parameter must be one of {SWEEP_PARAMETERS}")
    values = [v for v in args.values.split(",") if v.strip()]
    for v in values:
        _variant(spec, args.parameter, v)  # fail fast on bad values
    jobs = [(spec, args.parameter, v, args.objective, args.tol, args.borderline, args.t_max) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    out = _out(args)
    with open(out / "sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "status", "beta", "u", "floor", "u_border", "rd"])
        for r in rows:
            w.writerow([r["value"], r["status"].split(":")[0], r.get("beta", ""),
                        ";".join(repr(x) for x in r.get("u", [])), ";".join(repr(x) for x in r.get("floor", [])),
                        r.get("u_border", ""), r.get("rd", "")])
    _write_json(out / "report.json", {"manifest": _manifest(args, spec, work), "rows": rows})
    for r in rows:
        print(f"{args.parameter}={r['value']}: {r['status']} u={r.get('u')}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_INFEASIBLE


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcroa", description="Guaranteed-ROA setpoint design for DC microgrids.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, box=True):
        p.add_argument("--network", required=True, help="network JSON document")
        if box:
            p.add_argument("--box", help="operating half-widths: 'I,V', a per-state vector, or a JSON file")
        p.add_argument("--per-unit", action="store_true", help="work in per-unit regardless of the document flag")
        p.add_argument("--tol", choices=sorted(TOL_PROFILES), default="default")
        p.add_argument("--out", default="dcroa-out", help="output directory")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--objective", choices=["auto", "cost", "min_setpoint"], default="auto")

    def simflags(p):
        p.add_argument("--integrator", choices=["adaptive", "rk4"], default="adaptive")
        p.add_argument("--t-max", type=float, default=0.5, help="simulation horizon in seconds")

    p = sub.add_parser("certify", help="steps 1-3: certificate and voltage floor")
    common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("synthesize", help="step 4: stability-constrained setpoints")
    common(p)
    p.add_argument("--certificate", help="certificate.json from a previous certify run")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="simulate from the operating-box vertices")
    common(p)
    simflags(p)
    p.add_argument("--certificate")
    p.add_argument("--u", help="comma-separated setpoints in volts (skip synthesis)")
    p.add_argument("--u-per-unit", action="store_true", help="--u is already in per-unit")
    p.add_argument("--max-vertices", type=int, default=14, help="exhaustive sweep up to this many states")
    p.add_argument("--samples", type=int, default=4096, help="random vertices above the exhaustive limit")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("roa2d", help="2-D region-of-attraction grid")
    common(p)
    simflags(p)
    p.add_argument("--u", required=True, type=float, help="source setpoint in volts")
    p.add_argument("--points", type=int, default=301)
    p.add_argument("--window-factor", type=float, default=3.0, help="grid half-width in box half-widths")
    p.set_defaults(func=cmd_roa2d)

    p = sub.add_parser("sensitivity", help="re-run the design over a parameter sweep")
    common(p)
    simflags(p)
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", required=True,
                   help="comma-separated values (W, ohm, H, F; 'I:V' pairs for range)")
    p.add_argument("--borderline", action="store_true", help="also compute the simulated borderline input and RD")
    p.set_defaults(func=cmd_sensitivity)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_PARSE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NetworkError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SynthesisInfeasible as exc:
        print(f"infeasible ({exc.kind}): {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CertificationError, EquilibriumTooClose, BorderlineError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (conic.ConicError, SimulationError, PowerFlowError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except Falsified as exc:
        print(f"falsified: {exc}", file=sys.stderr)
        return EXIT_FALSIFIED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
