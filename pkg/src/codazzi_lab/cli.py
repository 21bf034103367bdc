"""Command-line driver and JSON/CSV reports.

Exit codes: 0 when every gating check passes, 1 when a verification fails,
2 for configuration, parse or domain errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .brinkmann import detect_warped, verify_candidate
from .codazzi import (LEMMAS, ResidualReport, char_conditions, codazzi_defect, codazzi_residual,
                      eigen_structure, eta_and_warp_extract, lemma_residual, local_frame)
from .config import RunConfig, export_example, load, set_tolerance
from .errors import (BadParams, CodazziLabError, ConfigError, DegenerateMetric, DomainError,
                     EigenvalueCollision, ExprSyntaxError, GridTooCoarse, MisalignedFrame,
                     NotWarpedEvidence, SingularJacobian, UnknownVariable)
from .exprlang import parse
from .gallery import characteristics_residual, parameter_sweep, polar_pullback_residual
from .geometry import GridSpec

SCHEMA_VERSION = "1.0"
COMMANDS = ("verify-codazzi", "analyze-eigen", "check-conditions", "detect-warped",
            "characteristics", "reproduce-paper")
USER_ERRORS = (ConfigError, DomainError, DegenerateMetric, EigenvalueCollision, BadParams,
               GridTooCoarse, ExprSyntaxError, UnknownVariable, SingularJacobian)
THREADS_ENV = "CODAZZI_LAB_THREADS"

_check = {
    "type": "object",
    "required": ["name", "max", "mean", "argmax", "n_points", "excluded", "tolerance",
                 "passed", "gate"],
    "properties": {
        "name": {"type": "string"},
        "grid": {"type": ["array", "null"], "items": {"type": "integer"}},
        "max": {"type": ["number", "null"]},
        "mean": {"type": ["number", "null"]},
        "argmax": {"type": ["array", "null"], "items": {"type": "number"}},
        "n_points": {"type": "integer", "minimum": 0},
        "excluded": {"type": "integer", "minimum": 0},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "passed": {"type": "boolean"},
        "gate": {"type": "boolean"},
        "expect_pass": {"type": "boolean"},
        "notes": {"type": "string"},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "codazzi-lab report",
    "type": "object",
    "required": ["schema_version", "tool", "command", "config", "checks", "results",
                 "excluded_points", "passed", "exit_code", "messages", "wall_time"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "tool": {"type": "object", "required": ["name", "version"]},
        "command": {"enum": list(COMMANDS)},
        "config": {"type": ["object", "null"]},
        "checks": {"type": "array", "items": _check},
        "results": {"type": "object"},
        "excluded_points": {"type": "integer", "minimum": 0},
        "passed": {"type": "boolean"},
        "exit_code": {"enum": [0, 1, 2]},
        "messages": {"type": "array", "items": {"type": "string"}},
        "error": {"type": ["string", "null"]},
        "wall_time": {"type": "number", "minimum": 0},
    },
}


class _Run:
    """Accumulates checks, results and CSV tables for one command."""

    def __init__(self, command: str, cfg: RunConfig | None):
        self.command = command
        self.cfg = cfg
        self.checks: list[dict] = []
        self.results: dict = {}
        self.messages: list[str] = []
        self.tables: dict = {}
        self.failed = False

    def check(self, rep: ResidualReport, gate: bool = True, expect_pass: bool = True):
        d = rep.to_dict()
        d["gate"] = gate
        d["expect_pass"] = expect_pass
        if gate and rep.passed != expect_pass:
            self.failed = True
        self.checks.append(d)
        return rep

    def require(self, ok: bool, message: str):
        if not ok:
            self.failed = True
            self.messages.append(message)


# --------------------------------------------------------------------------
# Commands

def _points_table(pts, columns, names):
    flat = np.asarray(pts).reshape(-1, pts.shape[-1])
    cols = [np.asarray(c).reshape(-1) for c in columns]
    return list(names), np.column_stack([flat] + cols)


def _verify_codazzi(run: _Run, cfg: RunConfig):
    g, A = cfg.metric(), cfg.tensor()
    rep = run.check(codazzi_residual(A, g, cfg.grid, cfg.tol("codazzi")))
    pts = cfg.grid.points(cfg.chart)
    res, ok = codazzi_defect(A, g, pts)
    run.tables["codazzi_grid"] = _points_table(
        pts, [np.where(ok, res, np.nan)], list(cfg.chart.coords) + ["residual"])
    run.results["codazzi_max"] = rep.max


def _eigen_checks(run: _Run, cfg: RunConfig, eig):
    tol = cfg.tol("eigen")
    inc = ~eig.excluded
    pts = eig.points
    GV = eig.G @ eig.vectors
    pair = np.abs(eig.A @ eig.vectors - GV * eig.values[..., None, :]).max(axis=(-1, -2))
    ortho = np.abs(np.swapaxes(eig.vectors, -1, -2) @ GV - np.eye(eig.values.shape[-1]))
    recon = np.abs(eig.reconstruct() - eig.A).max(axis=(-1, -2))
    for name, vals in (("eigenpair", pair), ("g_orthonormal", ortho.max(axis=(-1, -2))),
                       ("reconstruction", recon)):
        run.check(ResidualReport.from_values(name, vals, pts, tol, inc, eig.grid))


def _analyze_eigen(run: _Run, cfg: RunConfig):
    g, A = cfg.metric(), cfg.tensor()
    eig = eigen_structure(A, g, cfg.grid, cfg.tol("cluster"))
    _eigen_checks(run, cfg, eig)
    run.results["eigen"] = eig.summary()
    if not eig.is_two_eigenvalue:
        run.messages.append("no simple/(n-1)-fold split: lemma checks skipped")
        return
    frame = local_frame(A, g, eig, cfg.tol("fd_step"))
    for lem in LEMMAS:
        run.check(lemma_residual(lem, A, g, eig, tol=cfg.tol("lemma"), frame=frame))


def _check_conditions(run: _Run, cfg: RunConfig):
    g, A = cfg.metric(), cfg.tensor()
    eig = eigen_structure(A, g, cfg.grid, cfg.tol("cluster"))
    run.results["eigen"] = eig.summary()
    if not eig.is_two_eigenvalue:
        run.require(False, "no simple/(n-1)-fold split: conditions undefined")
        return
    cond = char_conditions(A, g, eig, tol=cfg.tol("cond"), fd_step=cfg.tol("fd_step"))
    for rep in cond.reports.values():
        run.check(rep, gate=False)
    run.results["conditions"] = {str(k): v for k, v in cond.booleans.items()}
    run.results["conditions_agree"] = cond.agree
    run.require(cond.agree, "condition booleans disagree")
    expect = cfg.expect.get("conditions")
    if expect is not None:
        want = expect.strip().lower() in ("true", "all-true", "all_true")
        run.require(cond.agree and cond.all_true == want,
                    f"expected conditions {expect}, got {cond.booleans}")
    run.results["warp"] = None
    if not cond.all_true:
        return
    try:
        w = eta_and_warp_extract(A, g, eig, tol=cfg.tol("warp"), fd_step=cfg.tol("fd_step"),
                                 cond_tol=cfg.tol("cond"), align_tol=cfg.tol("align"),
                                 conditions=cond)
    except (MisalignedFrame, NotWarpedEvidence) as exc:
        run.messages.append(f"warp extraction skipped: {exc}")
        return
    run.check(w.leaf_constancy)
    run.check(w.warp)
    axis_nodes = cfg.grid.axes(cfg.chart)[w.axis]
    run.results["warp"] = w.to_dict(axis_nodes)
    name = cfg.chart.coords[w.axis]
    idx = [0] * w.q.ndim
    idx[w.axis] = slice(None)
    run.tables["warp_profile"] = ([name, "eta", "q"],
                                  np.column_stack([axis_nodes, w.eta[tuple(idx)], w.q_profile()]))


def _detect_warped(run: _Run, cfg: RunConfig):
    g = cfg.metric()
    basis, v = detect_warped(g, cfg.grid, cfg.probe, cfg.tol("sigma_rel"), cfg.tol("grad"),
                             seed=cfg.seed)
    sysm = basis.system
    bound = 10 * basis.sigma_rel_tol
    rel = basis.residuals() / basis.sigma_max
    run.check(ResidualReport("kernel_soundness", float(rel.max(initial=0.0)),
                             float(rel.mean()) if rel.size else 0.0, None, int(rel.size), 0,
                             bound, tuple(cfg.grid.counts),
                             "|L v| / sigma_max over kernel vectors"))
    run.results["verdict"] = v.to_dict()
    run.results["system"] = {"rows": sysm.n_rows, "unknowns": sysm.n_unknowns,
                             "f_unknowns": sysm.n_f, "a_unknowns": sysm.n_a,
                             "method": basis.method, "sigma_max": basis.sigma_max}
    expect = cfg.expect.get("verdict")
    if expect is not None:
        run.require(v.verdict == expect, f"expected verdict {expect}, got {v.verdict}")
    else:
        run.require(v.verdict != "inconclusive", "verdict inconclusive")
    if v.is_warped:
        table = v.certificate_table()
        run.tables["certificate"] = (list(cfg.chart.coords) + ["f", "a"], table)
        fit = v.fit
        try:
            f_expr = parse(fit["f"]["expression"], cfg.chart.coords)
            a_expr = parse(fit["a"]["expression"], cfg.chart.coords)
            rep = verify_candidate(f_expr, a_expr, g, cfg.grid, cfg.tol("candidate"))
            run.check(replace(rep, name="fitted_certificate"), gate=False)
        except CodazziLabError as exc:
            run.messages.append(f"fitted certificate not checked: {exc}")


def _characteristics(run: _Run, cfg: RunConfig):
    opts = cfg.characteristics
    mu_text = opts.get("mu", cfg.mu)
    if mu_text is None:
        raise ConfigError("characteristics needs a mu expression", field="characteristics.mu")
    mu = parse(mu_text, cfg.chart.coords)
    if opts.get("sweep", False):
        triples = parameter_sweep()
    else:
        triples = [tuple(float(opts.get(k, 0.0)) for k in ("a", "b", "c"))]
    expect_pass = opts.get("expect", "satisfied") == "satisfied"
    tol = cfg.tol("characteristics")
    worst = []
    for a, b, c in triples:
        rep = characteristics_residual(mu, a, b, c, cfg.grid, cfg.chart, tol)
        run.check(rep, expect_pass=expect_pass)
        worst.append(rep.max)
    run.results["mu"] = str(mu)
    run.results["expect"] = "satisfied" if expect_pass else "violated"
    run.results["min_residual"] = float(min(worst))
    run.results["max_residual"] = float(max(worst))


def _stage(run: _Run, label: str, command: str, cfg: RunConfig):
    sub = run_command(command, cfg)
    run.results.setdefault("stages", []).append({
        "stage": label, "command": command, "passed": sub["passed"],
        "checks": sub["checks"], "results": sub["results"], "messages": sub["messages"]})
    for d in sub["checks"]:
        run.checks.append(dict(d, name=f"{label}/{d['name']}"))
    run.require(sub["passed"], f"stage {label} failed: {'; '.join(sub['messages'])}")


def _reproduce(run: _Run, cfg: RunConfig | None):
    seed = cfg.seed if cfg is not None else 0

    def ex(name, **kw):
        c = RunConfig.from_example(name)
        c.seed = seed
        for k, v in kw.items():
            setattr(c, k, v)
        return c

    _stage(run, "torus:codazzi", "verify-codazzi", ex("torus"))
    _stage(run, "torus:conditions", "check-conditions",
           ex("torus", expect={"conditions": "false"}))
    _stage(run, "torus:detect", "detect-warped",
           ex("torus", grid=GridSpec.uniform(9), expect={"verdict": "no_nontrivial_solution"}))
    _stage(run, "torus:characteristics", "characteristics",
           ex("torus", characteristics={"sweep": True, "expect": "violated"},
              tolerances=dict(ex("torus").tolerances, characteristics=1e-2)))

    iw = ex("inconsistent_warp", expect={"verdict": "warped_candidate"})
    _stage(run, "inconsistent_warp:codazzi", "verify-codazzi", iw)
    _stage(run, "inconsistent_warp:detect", "detect-warped", iw)
    g = iw.metric()
    rep = verify_candidate(parse("(x^2+y^2)/2", g.chart.coords), parse("1", g.chart.coords),
                           g, iw.grid, 1e-10)
    run.check(replace(rep, name="inconsistent_warp:exact_certificate"))
    run.check(polar_pullback_residual())

    _stage(run, "warped_consistent:codazzi", "verify-codazzi", ex("warped_consistent"))
    wc = ex("warped_consistent", expect={"conditions": "true"})
    _stage(run, "warped_consistent:conditions", "check-conditions", wc)
    stage = run.results["stages"][-1]
    run.require(stage["results"].get("warp") is not None,
                "warped_consistent: warp extraction missing")


HANDLERS = {
    "verify-codazzi": _verify_codazzi,
    "analyze-eigen": _analyze_eigen,
    "check-conditions": _check_conditions,
    "detect-warped": _detect_warped,
    "characteristics": _characteristics,
}


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def run_command(command: str, cfg: RunConfig | None, _tables: dict | None = None) -> dict:
    """Execute ``command`` and return the report dictionary."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}", field="command")
    t0 = time.perf_counter()
    run = _Run(command, cfg)
    error = None
    try:
        if command == "reproduce-paper":
            _reproduce(run, cfg)
        else:
            if cfg is None:
                raise ConfigError("no configuration given", field="config")
            HANDLERS[command](run, cfg)
        code = 1 if run.failed else 0
    except USER_ERRORS as exc:
        code, error = 2, f"{type(exc).__name__}: {exc}"
    except CodazziLabError as exc:
        code, error = 1, f"{type(exc).__name__}: {exc}"
    if _tables is not None:
        _tables.update(run.tables)
    excluded = sum(c["excluded"] for c in run.checks)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "codazzi-lab", "version": __version__},
        "command": command,
        "config": cfg.echo() if cfg is not None and command != "reproduce-paper" else None,
        "checks": run.checks,
        "results": run.results,
        "excluded_points": excluded,
        "passed": code == 0,
        "exit_code": code,
        "messages": run.messages,
        "error": error,
        "wall_time": time.perf_counter() - t0,
    }
    return _clean(report)


def run(command: str, config: RunConfig | None):
    """``(report, exit_code)`` for one command."""
    report = run_command(command, config)
    return report, report["exit_code"]


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else "%.17g" % v
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_outputs(report: dict, tables: dict, out_dir, fmt: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report["command"].replace("-", "_")
    written = []
    if fmt in ("json", "both"):
        p = out / f"{stem}.json"
        p.write_text(report_json(report), encoding="utf-8")
        written.append(p)
    if fmt in ("csv", "both"):
        p = out / f"{stem}_checks.csv"
        cols = ["name", "max", "mean", "tolerance", "passed", "gate", "n_points", "excluded"]
        write_csv(p, cols, [[c[k] if c[k] is not None else float("nan") for k in cols]
                            for c in report["checks"]])
        written.append(p)
        for name, (header, rows) in sorted(tables.items()):
            p = out / f"{name}.csv"
            write_csv(p, header, rows)
            written.append(p)
    return written


# --------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codazzi-lab",
                                 description="Codazzi tensor and warped-product checks")
    ap.add_argument("command", choices=COMMANDS + ("export-config",))
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--example", help="named example (overrides the config source)")
    ap.add_argument("--grid", type=int, help="nodes per axis")
    ap.add_argument("--tol", action="append", default=[], metavar="NAME=VALUE",
                    help="override a tolerance (repeatable)")
    ap.add_argument("--probe", help="probe point, comma separated")
    ap.add_argument("--out", help="output directory (default: JSON to stdout)")
    ap.add_argument("--format", choices=("json", "csv", "both"))
    ap.add_argument("--seed", type=int)
    return ap


def _resolve(args) -> RunConfig | None:
    cfg = None
    if args.config:
        cfg = load(args.config)
    if args.example:
        base = RunConfig.from_example(args.example)
        if cfg is not None:
            for k in ("tolerances", "characteristics", "expect", "out_dir", "format", "seed"):
                setattr(base, k, getattr(cfg, k))
        cfg = base
    if cfg is None:
        return None
    if args.grid is not None:
        if args.grid < 5:
            raise ConfigError("grid needs at least 5 nodes per axis", field="--grid")
        cfg.grid = GridSpec.uniform(args.grid, cfg.chart.dim, cfg.grid.margin)
    for item in args.tol:
        if "=" not in item:
            raise ConfigError(f"expected NAME=VALUE, got {item!r}", field="--tol")
        k, v = item.split("=", 1)
        set_tolerance(cfg, k.strip(), v.strip())
    if args.probe:
        try:
            p = tuple(float(x) for x in args.probe.split(","))
        except ValueError:
            raise ConfigError(f"bad probe {args.probe!r}", field="--probe") from None
        if len(p) != cfg.chart.dim:
            raise ConfigError(f"probe needs {cfg.chart.dim} coordinates", field="--probe")
        cfg.probe = p
    if args.format:
        cfg.format = args.format
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer", field=THREADS_ENV) from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer", field=THREADS_ENV)
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _limit_threads()
        if args.command == "export-config":
            if not args.example:
                raise ConfigError("export-config needs --example", field="--example")
            text = export_example(args.example)
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"{args.example}.ini").write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    tables: dict = {}
    try:
        report = run_command(args.command, cfg, tables)
    finally:
        if limiter is not None:
            limiter.unregister()
    if report["error"]:
        print(f"error: {report['error']}", file=sys.stderr)
    out_dir = cfg.out_dir if cfg is not None else args.out
    fmt = (cfg.format if cfg is not None else args.format) or "json"
    if out_dir:
        for p in write_outputs(report, tables, out_dir, fmt):
            print(p, file=sys.stderr)
    else:
        sys.stdout.write(report_json(report))
    status = "PASS" if report["exit_code"] == 0 else "FAIL"
    print(f"{args.command}: {status} (exit {report['exit_code']})", file=sys.stderr)
    return report["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
