"""Command line front end: run, verify and sweep.

Configs are JSON documents.  Every time quantity (delta, Delta, delays, durations,
windows) is in the same abstract time unit; rates are dimensionless.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .adversary import (FaultSpec, Scenario, corrupt_initial_state, scenario_cycle_asymmetric,
                        scenario_external, scenario_uniform)
from .analysis import BoundReport, Levels, VerifyOptions, nominal_offsets, verify_trace
from .engine import S_POST, S_TICK, Trace, simulate
from .protocol import ProtocolParams
from .topology import VIRTUAL, node_label

log = logging.getLogger("gcslab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ configs

BASE_CONFIG: Dict[str, Any] = {
    "scenario": {"kind": "uniform", "shape": "line", "D": 4, "Delta": 1.0, "delta": 0.05,
                 "delay": 0.5, "rate_law": "random-walk", "rate_period": 25.0, "duration": 400.0,
                 "T": None, "c": 1.0, "n": 8, "f": 4.0, "zeta": None, "refs": [0], "spread": 0.0},
    "params": {"mu": 0.04, "theta": 1.01},
    "fault": None,
    "seed": 1,
    "sample_interval": None,
    "verify": {"enabled": True, "windows": None, "expect_reset": None, "mutation": "",
               "levels": 3, "epsilon": 1.0, "reset_K": 5.0, "stab_multiple": 4.0},
    "sweep": {"axis": None, "values": []},
    "outputs": {"trace": "trace.csv", "report": "report.json"},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "uniform-line-d4": {},
    "uniform-line-d4-invert-fast": {"params": {"mutation": "invert-fast"}},
    "uniform-line-d4-skip-reset": {
        "params": {"stabilize": True, "mutation": "skip-reset"},
        "fault": {"spread": 100.0, "garbage": True, "seed": 3},
        "verify": {"expect_reset": True}},
    "stabilizing-line-d8": {
        "scenario": {"D": 8, "duration": 1500.0},
        "params": {"stabilize": True},
        "fault": {"spread_W": 100.0, "garbage": True, "seed": 11},
        "verify": {"expect_reset": True}},
    "cycle-asymmetric-n8": {
        "scenario": {"kind": "cycle", "n": 8, "f": 4.0, "delta": 0.001, "delay": 0.1,
                     "duration": 400.0},
        "params": {"mu": 0.004, "theta": 1.001}},
    "external-line-d7": {
        "scenario": {"kind": "external", "D": 7, "zeta": 1.02, "duration": 2000.0, "spread": 5.0},
        "params": {"mu": 0.08, "theta": 1.01}},
}

_PARAM_FIELDS = {f.name for f in dataclasses.fields(ProtocolParams)}
_FAULT_FIELDS = {"at", "spread", "spread_W", "garbage", "tree_only", "seed"}


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in out and path not in ("params", "fault"):
            raise ConfigError(f"{where}: unknown field")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return resolve_config(raw)


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, path)


def resolve_config(raw: dict) -> dict:
    raw = dict(raw)
    preset = raw.pop("preset", None)
    cfg = copy.deepcopy(BASE_CONFIG)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (known: {', '.join(sorted(PRESETS))})")
        cfg = deep_merge(cfg, PRESETS[preset])
        cfg["preset"] = preset
    cfg = deep_merge(cfg, raw)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    sc = cfg["scenario"]
    if sc["kind"] not in ("uniform", "cycle", "external"):
        raise ConfigError(f"scenario.kind: expected uniform, cycle or external, got {sc['kind']!r}")
    for key in ("D", "n"):
        if not isinstance(sc[key], int) or sc[key] < 1:
            raise ConfigError(f"scenario.{key}: expected a positive integer")
    for key in ("Delta", "delta", "delay", "duration"):
        if not isinstance(sc[key], (int, float)) or sc[key] <= 0:
            raise ConfigError(f"scenario.{key}: expected a positive number")
    for k in cfg["params"]:
        if k not in _PARAM_FIELDS:
            raise ConfigError(f"params.{k}: unknown field")
    if cfg["fault"] is not None:
        for k in cfg["fault"]:
            if k not in _FAULT_FIELDS:
                raise ConfigError(f"fault.{k}: unknown field")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: expected an integer")
    si = cfg["sample_interval"]
    if si is not None and (not isinstance(si, (int, float)) or si <= 0):
        raise ConfigError("sample_interval: expected a positive number or null")
    ver = cfg["verify"]
    if ver["enabled"]:
        for i, w in enumerate(windows_of(cfg)):
            if len(w) != 2 or w[1] <= 0:
                raise ConfigError(f"verify.windows[{i}]: expected [start, length] with length > 0")
            if w[1] > sc["duration"] + 1e-9:
                raise ConfigError(f"verify.windows[{i}]: window length {w[1]} exceeds the horizon "
                                  f"{sc['duration']}")


def windows_of(cfg: dict) -> List[Tuple[float, float]]:
    ws = cfg["verify"].get("windows")
    if not ws:
        return [(0.0, float(cfg["scenario"]["duration"]))]
    return [tuple(float(x) for x in w) for w in ws]


def config_fingerprint(cfg: dict) -> str:
    """Identifies the version and every input that shapes the trace."""
    keep = {k: cfg[k] for k in ("scenario", "params", "fault", "seed", "sample_interval")}
    blob = json.dumps({"version": __version__, "config": keep}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_scenario(cfg: dict) -> Scenario:
    s = cfg["scenario"]
    try:
        params = ProtocolParams(**cfg["params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params: {exc}") from None
    seed = cfg["seed"]
    dur = float(s["duration"])
    T = s["T"] if s["T"] is not None else dur
    try:
        if s["kind"] == "uniform":
            sc = scenario_uniform(s["shape"], s["D"], s["Delta"], s["delta"], params, seed, dur,
                                  s["delay"], s["rate_law"], s["rate_period"], s["c"], T)
        elif s["kind"] == "cycle":
            sc = scenario_cycle_asymmetric(s["n"], s["f"], s["delta"], params, seed, dur, s["delay"],
                                           s["rate_law"])
        else:
            zeta = s["zeta"] if s["zeta"] is not None else 1 + 2 * (params.theta - 1)
            sc = scenario_external(s["D"], s["Delta"], s["delta"], params, zeta, tuple(s["refs"]),
                                   seed, dur, s["delay"], s["rate_law"], s["spread"], T)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None
    f = cfg.get("fault")
    if f:
        f = dict(f)
        spread = float(f.pop("spread", 0.0))
        if "spread_W" in f:
            lv = Levels(sc.topology, nominal_offsets(sc.errors, 0.0, T), sc.topology.nodes)
            spread = float(f.pop("spread_W")) * lv.W(lv.s0 + 1)
        spec = FaultSpec(spread=spread, **f)
        if spec.at > 0:
            sc = dataclasses.replace(sc, faults=list(sc.faults) + [spec])
        else:
            sc = corrupt_initial_state(sc, spec)
    return sc


def verify_options(cfg: dict) -> VerifyOptions:
    v = cfg["verify"]
    return VerifyOptions(levels=v["levels"], epsilon=v["epsilon"], mutation=v["mutation"],
                         expect_reset=v["expect_reset"], reset_K=v["reset_K"],
                         stab_multiple=v["stab_multiple"])


# -------------------------------------------------------------- trace files


def _thin(tr: Trace, interval: Optional[float]) -> np.ndarray:
    """Row indices kept in the trace file; jump rows are always kept."""
    n = len(tr.t)
    if not interval:
        return np.arange(n)
    bucket = np.floor(tr.t / interval + 1e-9)
    keep = np.ones(n, bool)
    keep[1:] = bucket[1:] != bucket[:-1]
    keep |= tr.kind >= 2
    keep[-1] = True
    return np.nonzero(keep)[0]


def _held_offsets(tr: Trace) -> np.ndarray:
    ref = np.searchsorted(tr.refresh_sample, np.arange(len(tr.t)), side="right") - 1
    out = np.full((len(tr.t), len(tr.arcs)), np.nan)
    ok = ref >= 0
    out[ok] = tr.offsets[ref[ok]]
    return out


def trace_header(tr: Trace) -> List[str]:
    head = ["t"]
    for v in tr.nodes:
        lab = node_label(v)
        head += [f"L_{lab}", f"H_{lab}", f"mode_{lab}"]
    for v, w in tr.arcs:
        head += [f"o_{node_label(v)}_{node_label(w)}", f"e_{node_label(v)}_{node_label(w)}"]
    head.append("kind")
    return head


def _events_json(events: Sequence[dict]) -> list:
    out = []
    for e in events:
        e = dict(e)
        for k in ("offsets", "ell"):
            if k in e and isinstance(e[k], dict):
                e[k] = [[w, o] for w, o in e[k].items()]
        out.append(e)
    return out


def _events_from_json(events: Sequence[dict]) -> list:
    out = []
    for e in events:
        e = dict(e)
        for k in ("offsets", "ell"):
            if k in e and isinstance(e[k], list):
                e[k] = {int(w): o for w, o in e[k]}
        out.append(e)
    return out


def write_trace(tr: Trace, path: str, fingerprint: str, interval: Optional[float] = None) -> None:
    rows = _thin(tr, interval)
    held = _held_offsets(tr)
    col = {v: i for i, v in enumerate(tr.nodes)}
    ai = np.array([col[v] for v, _ in tr.arcs], dtype=int)
    aj = np.array([col[w] for _, w in tr.arcs], dtype=int)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(trace_header(tr))
    for i in rows:
        line = [repr(float(tr.t[i]))]
        for j in range(len(tr.nodes)):
            line += [repr(float(tr.L[i, j])), repr(float(tr.H[i, j])), "fast" if tr.fast[i, j] else "slow"]
        eff = tr.L[i, ai] - tr.L[i, aj] - held[i]
        for k in range(len(tr.arcs)):
            line += [repr(float(held[i, k])), repr(float(eff[k]))]
        line.append(int(tr.kind[i]))
        wr.writerow(line)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    meta = {"version": __version__, "fingerprint": fingerprint, "scenario": tr.scenario.name,
            "nodes": tr.nodes, "arcs": [list(a) for a in tr.arcs],
            "final_parents": [[v, p] for v, p in sorted(tr.parents().items())],
            "events": _events_json(tr.events), "n_messages": tr.n_messages}
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def read_trace(path: str, sc: Scenario, fingerprint: Optional[str] = None) -> Trace:
    """Rebuild a Trace from a trace file and its metadata sidecar."""
    try:
        with open(path + ".meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}.meta.json: cannot read ({exc.strerror})") from None
    if fingerprint is not None and meta.get("fingerprint") != fingerprint:
        raise ConfigError(f"{path}: fingerprint mismatch (trace {str(meta.get('fingerprint'))[:12]}, "
                          f"config {fingerprint[:12]})")
    nodes = [int(v) for v in meta["nodes"]]
    arcs = [(int(a), int(b)) for a, b in meta["arcs"]]
    with open(path, encoding="utf-8") as fh:
        rd = csv.reader(fh)
        head = next(rd)
        if head != _header_for(nodes, arcs):
            raise ConfigError(f"{path}: header does not match the metadata")
        data = [r for r in rd]
    n, m = len(nodes), len(arcs)
    t = np.array([float(r[0]) for r in data])
    L = np.array([[float(r[1 + 3 * j]) for j in range(n)] for r in data]).reshape(len(data), n)
    H = np.array([[float(r[2 + 3 * j]) for j in range(n)] for r in data]).reshape(len(data), n)
    fast = np.array([[r[3 + 3 * j] == "fast" for j in range(n)] for r in data]).reshape(len(data), n)
    base = 1 + 3 * n
    o = np.array([[float(r[base + 2 * k]) for k in range(m)] for r in data]).reshape(len(data), m)
    kind = np.array([int(r[-1]) for r in data], dtype=np.int8)
    refresh = np.nonzero(((kind == S_TICK) | (kind == S_POST)) & ~np.isnan(o).any(axis=1))[0]
    return Trace(sc, nodes, t, L, H, fast, kind, arcs, t[refresh], np.zeros(len(refresh), np.int64),
                 o[refresh], refresh, _events_from_json(meta["events"]), int(meta.get("n_messages", 0)),
                 0, {}, None, {int(v): (None if p is None else int(p)) for v, p in meta["final_parents"]})


def _header_for(nodes, arcs) -> List[str]:
    class _T:
        pass
    fake = _T()
    fake.nodes, fake.arcs = nodes, arcs
    return trace_header(fake)


# ----------------------------------------------------------------- commands


def analyse(tr: Trace, cfg: dict) -> List[BoundReport]:
    opts = verify_options(cfg)
    return [verify_trace(tr, w, opts) for w in windows_of(cfg)]


def report_document(reports: Sequence[BoundReport], fingerprint: str) -> dict:
    return {"version": __version__, "fingerprint": fingerprint,
            "passed": all(r.passed for r in reports), "reports": [r.to_dict() for r in reports]}


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _print_failures(reports: Sequence[BoundReport], out=None) -> None:
    for r in reports:
        for c in r.failures():
            print(f"FAIL {c.name} window={list(r.window)} lhs={c.lhs} rhs={c.rhs} witness={c.witness}",
                  file=out or sys.stdout)


def cmd_run(cfg: dict, out_dir: str) -> Tuple[int, dict]:
    os.makedirs(out_dir, exist_ok=True)
    fp = config_fingerprint(cfg)
    sc = build_scenario(cfg)
    tr = simulate(sc)
    tpath = os.path.join(out_dir, cfg["outputs"]["trace"])
    write_trace(tr, tpath, fp, cfg["sample_interval"])
    doc = {"version": __version__, "fingerprint": fp, "passed": True, "reports": []}
    if cfg["verify"]["enabled"]:
        # analyse the file just written so a later verify reproduces this report
        reports = analyse(read_trace(tpath, sc, fp), cfg)
        doc = report_document(reports, fp)
        _print_failures(reports)
    _write_json(os.path.join(out_dir, cfg["outputs"]["report"]), doc)
    return (EXIT_OK if doc["passed"] else EXIT_FAIL), doc


def cmd_verify(trace_path: str, cfg: dict, out_path: Optional[str] = None) -> Tuple[int, dict]:
    fp = config_fingerprint(cfg)
    sc = build_scenario(cfg)
    reports = analyse(read_trace(trace_path, sc, fp), cfg)
    doc = report_document(reports, fp)
    _print_failures(reports)
    if out_path:
        _write_json(out_path, doc)
    return (EXIT_OK if doc["passed"] else EXIT_FAIL), doc


SWEEP_AXES = {"D", "n", "Delta", "delta", "delay", "duration", "f", "zeta", "spread", "c",
              "mu", "theta", "epsilon", "seed"}


def summary_row(value, reports: Sequence[BoundReport]) -> dict:
    """One sweep row; depends on the reports only."""
    metas = [r.meta for r in reports]

    def mx(key):
        vals = [m[key] for m in metas if key in m]
        return max(vals) if vals else None
    return {"value": value, "max_G": mx("max_G"), "max_L": mx("max_L"), "max_T": mx("max_T"),
            "t_stab": mx("t_stab"), "local_formula": mx("local_formula"), "W": mx("W_level"),
            "passed": all(r.passed for r in reports)}


def sweep_config(cfg: dict, axis: str, value) -> dict:
    c = copy.deepcopy(cfg)
    if axis == "seed":
        c["seed"] = int(value)
    elif axis in ("mu", "theta"):
        c["params"][axis] = float(value)
    elif axis == "epsilon":
        c["verify"]["epsilon"] = float(value)
    else:
        c["scenario"][axis] = int(value) if axis in ("D", "n") else float(value)
    _validate(c)
    return c


def cmd_sweep(cfg: dict, axis: str, values: Sequence, jobs: int = 1) -> List[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis: {axis!r} is not a numeric scenario parameter "
                          f"(choose from {', '.join(sorted(SWEEP_AXES))})")
    cfgs = [sweep_config(cfg, axis, v) for v in values]

    def one(c):
        return analyse(simulate(build_scenario(c)), c)

    if jobs > 1 and len(cfgs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(one, cfgs))
    else:
        reports = [one(c) for c in cfgs]
    return [summary_row(v, r) for v, r in zip(values, reports)]


def format_table(rows: Sequence[dict]) -> str:
    cols = ["value", "max_G", "max_L", "max_T", "t_stab", "local_formula", "passed"]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join("-" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                               for c in cols))
    return "\n".join(lines)


# --------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcslab", description="gradient clock synchronization lab")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help=f"named preset ({', '.join(sorted(PRESETS))})")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--sample-interval", type=float)

    r = sub.add_parser("run", help="simulate, write trace and report")
    common(r)
    v = sub.add_parser("verify", help="re-run the analysis on a trace file")
    v.add_argument("trace")
    common(v)
    v.add_argument("--window", nargs=2, type=float, action="append", metavar=("START", "LENGTH"))
    s = sub.add_parser("sweep", help="one run per parameter value")
    common(s)
    s.add_argument("--axis")
    s.add_argument("--values", help="comma separated values")
    s.add_argument("--jobs", type=int, default=1)
    return ap


def _gather_config(args) -> dict:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = resolve_config({"preset": args.preset})
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.preset and args.config:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.sample_interval is not None:
        cfg["sample_interval"] = args.sample_interval
    _validate(cfg)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("GCSLAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = _gather_config(args)
        if args.cmd == "run":
            code, doc = cmd_run(cfg, args.out_dir)
            print(f"{'PASS' if doc['passed'] else 'FAIL'} report={os.path.join(args.out_dir, cfg['outputs']['report'])}")
            return code
        if args.cmd == "verify":
            if args.window:
                cfg["verify"]["windows"] = [list(w) for w in args.window]
            os.makedirs(args.out_dir, exist_ok=True)
            code, doc = cmd_verify(args.trace, cfg, os.path.join(args.out_dir, "verify_report.json"))
            print("PASS" if doc["passed"] else "FAIL")
            return code
        axis = args.axis or cfg["sweep"]["axis"]
        if args.values is not None:
            values = [float(x) for x in args.values.split(",") if x.strip()]
        else:
            values = list(cfg["sweep"]["values"])
        if axis is None:
            raise ConfigError("sweep.axis: missing")
        rows = cmd_sweep(cfg, axis, values, args.jobs)
        print(format_table(rows))
        os.makedirs(args.out_dir, exist_ok=True)
        _write_json(os.path.join(args.out_dir, "sweep.json"), {"axis": axis, "rows": rows})
        return EXIT_OK if all(r["passed"] for r in rows) else EXIT_FAIL
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
