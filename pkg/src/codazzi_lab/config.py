"""Run configuration: INI-style ``key = value`` sections.

Example::

    [source]
    example = torus            # or: lambda = 1 / mu = x*y, or [g] and [A] sections

    [chart]                    # needed unless the source is a named example
    coords = t, x, y
    domain = 0 1; -0.75 0.75; -0.75 0.75
    periodic = false, false, false

    [grid]
    n = 9                      # or: counts = 9, 9, 11
    margin = 0

    [probe]
    point = 0.5, 0, 0

    [tolerances]
    codazzi = 1e-8

    [characteristics]
    mu = 0.5*sin(x)*cos(y)
    a = 1
    b = 0
    c = 0
    sweep = false
    expect = satisfied

    [expect]
    verdict = warped_candidate

    [output]
    dir = out
    format = json
    seed = 0
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace

from .codazzi import CLUSTER_TOL, FD_STEP, TOL_CODAZZI, TOL_COND, TOL_LEMMA, TOL_WARP
from .brinkmann import SIGMA_REL_TOL, VERDICTS
from .errors import CodazziLabError, ConfigError
from .gallery import NAMED, Example, build_family, named_example
from .geometry import Chart, GridSpec, MetricField, SymTensorField

DEFAULT_TOLERANCES = {
    "codazzi": TOL_CODAZZI,
    "lemma": TOL_LEMMA,
    "cond": TOL_COND,
    "warp": TOL_WARP,
    "cluster": CLUSTER_TOL,
    "fd_step": FD_STEP,
    "sigma_rel": SIGMA_REL_TOL,
    "grad": None,  # 1e-3 * chart diameter
    "characteristics": 1e-10,
    "candidate": 1e-8,
    "align": 1e-8,
    "eigen": 1e-9,
}
FORMATS = ("json", "csv", "both")
SECTIONS = ("source", "chart", "g", "A", "grid", "probe", "tolerances", "characteristics",
            "expect", "output")


@dataclass
class RunConfig:
    name: str
    chart: Chart
    g_texts: dict
    A_texts: dict
    grid: GridSpec
    probe: tuple
    lam: float | None = None
    mu: str | None = None
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    characteristics: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)
    out_dir: str | None = None
    format: str = "json"
    seed: int = 0
    example: str | None = None

    # ------------------------------------------------------------------
    @classmethod
    def from_example(cls, name: str, **overrides) -> "RunConfig":
        try:
            ex = named_example(name)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), field="source.example") from None
        cfg = cls._from_instance(ex)
        cfg.example = name
        return replace(cfg, **overrides) if overrides else cfg

    @classmethod
    def _from_instance(cls, ex: Example) -> "RunConfig":
        return cls(ex.name, ex.chart, ex.g.component_texts(), ex.A.component_texts(), ex.grid,
                   tuple(ex.probe), ex.lam, None if ex.mu is None else str(ex.mu))

    def metric(self) -> MetricField:
        return MetricField.from_spec(self.chart, self.g_texts)

    def tensor(self) -> SymTensorField:
        return SymTensorField.from_spec(self.chart, self.A_texts)

    def tol(self, name: str):
        return self.tolerances[name]

    def echo(self) -> dict:
        """Canonical, source-independent description used in reports."""
        return {
            "name": self.name,
            "chart": {"coords": list(self.chart.coords),
                      "domain": [list(d) for d in self.chart.domain],
                      "periodic": list(self.chart.periodic)},
            "g": dict(self.g_texts),
            "A": dict(self.A_texts),
            "lambda": self.lam,
            "mu": self.mu,
            "grid": self.grid.to_dict(),
            "probe": list(self.probe),
            "tolerances": dict(self.tolerances),
            "characteristics": dict(self.characteristics),
            "expect": dict(self.expect),
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# Parsing helpers

def _line_of(text: str, section: str, key: str | None = None):
    cur = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip()
            if key is None and cur == section:
                return n
            continue
        if cur == section and key is not None:
            k = line.split("=", 1)[0].split(":", 1)[0].strip()
            if k == key:
                return n
    return None


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, text: str):
        self.p = parser
        self.text = text

    def err(self, msg, section, key=None):
        fld = f"{section}.{key}" if key else section
        return ConfigError(msg, field=fld, line=_line_of(self.text, section, key))

    def get(self, section, key, default=None):
        if self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        return default

    def floats(self, section, key, sep=","):
        raw = self.get(section, key)
        try:
            return [float(x) for x in raw.replace(";", sep).split(sep) if x.strip()]
        except ValueError:
            raise self.err(f"expected numbers, got {raw!r}", section, key) from None

    def number(self, section, key, default=None, kind=float):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            v = kind(raw)
        except ValueError:
            raise self.err(f"expected {kind.__name__}, got {raw!r}", section, key) from None
        return v

    def boolean(self, section, key, default=False):
        if not self.p.has_option(section, key):
            return default
        try:
            return self.p.getboolean(section, key)
        except ValueError:
            raise self.err(f"expected a boolean, got {self.get(section, key)!r}",
                           section, key) from None


def _parse_bools(r: _Reader, raw: str, n: int):
    vals = [x.strip().lower() for x in raw.split(",")]
    table = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
    if len(vals) != n or any(v not in table for v in vals):
        raise r.err(f"expected {n} booleans, got {raw!r}", "chart", "periodic")
    return tuple(table[v] for v in vals)


def _chart(r: _Reader) -> Chart:
    if not r.p.has_section("chart"):
        raise r.err("this source needs a [chart] section", "chart")
    coords = tuple(c.strip() for c in (r.get("chart", "coords") or "").split(",") if c.strip())
    if not coords:
        raise r.err("missing coords", "chart", "coords")
    raw = r.get("chart", "domain")
    if raw is None:
        raise r.err("missing domain", "chart", "domain")
    try:
        domain = [tuple(float(v) for v in part.replace(",", " ").split())
                  for part in raw.split(";")]
    except ValueError:
        raise r.err(f"bad domain {raw!r}", "chart", "domain") from None
    if len(domain) != len(coords) or any(len(d) != 2 for d in domain):
        raise r.err("domain needs one 'lo hi' pair per coordinate, separated by ';'",
                    "chart", "domain")
    per_raw = r.get("chart", "periodic")
    periodic = (False,) * len(coords) if per_raw is None else _parse_bools(r, per_raw, len(coords))
    try:
        return Chart(coords, domain, periodic)
    except ValueError as exc:
        raise r.err(str(exc), "chart") from None


def _components(r: _Reader, section: str) -> dict:
    return {key: r.get(section, key) for key in r.p.options(section)}


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text.  ``base`` supplies defaults for a missing source."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str  # component keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from None
    r = _Reader(parser, text)
    for s in parser.sections():
        if s not in SECTIONS:
            raise r.err(f"unknown section; expected one of {SECTIONS}", s)

    example = r.get("source", "example")
    has_family = parser.has_option("source", "lambda") or parser.has_option("source", "mu")
    has_raw = parser.has_section("g") or parser.has_section("A")
    n_sources = sum([example is not None, has_family, has_raw])
    if n_sources > 1:
        raise r.err("exactly one metric source allowed: example, lambda/mu, or [g]/[A]", "source")
    name = r.get("source", "name")
    try:
        if example is not None:
            cfg = RunConfig.from_example(example)
        elif has_family:
            lam = r.number("source", "lambda")
            mu = r.get("source", "mu")
            if lam is None or mu is None:
                raise r.err("a family source needs both lambda and mu", "source")
            chart = _chart(r)
            ex = build_family(lam, mu, chart.domain, chart.periodic, chart.coords,
                              grid=_grid(r, chart, None), name=name or "family")
            cfg = RunConfig._from_instance(ex)
        elif has_raw:
            if not (parser.has_section("g") and parser.has_section("A")):
                raise r.err("raw source needs both [g] and [A]", "g" if parser.has_section("A") else "A")
            chart = _chart(r)
            g_texts, A_texts = _components(r, "g"), _components(r, "A")
            MetricField.from_spec(chart, g_texts)
            SymTensorField.from_spec(chart, A_texts)
            mid = tuple(0.5 * (lo + hi) for lo, hi in chart.domain)
            cfg = RunConfig(name or "custom", chart, g_texts, A_texts, GridSpec.uniform(9, chart.dim),
                            mid)
        elif base is not None:
            cfg = replace(base, tolerances=dict(base.tolerances))
        else:
            raise r.err("no metric source: set source.example, source.lambda/mu or [g]/[A]",
                        "source")
    except ConfigError:
        raise
    except CodazziLabError as exc:
        raise ConfigError(f"invalid source: {exc}", field="source") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid source: {exc}", field="source") from exc
    if name:
        cfg.name = name

    cfg.grid = _grid(r, cfg.chart, cfg.grid)
    if parser.has_option("probe", "point"):
        p = r.floats("probe", "point")
        if len(p) != cfg.chart.dim:
            raise r.err(f"probe needs {cfg.chart.dim} coordinates", "probe", "point")
        cfg.probe = tuple(p)
    if parser.has_section("tolerances"):
        for key in parser.options("tolerances"):
            set_tolerance(cfg, key, r.get("tolerances", key), r)
    if parser.has_section("characteristics"):
        cfg.characteristics = _characteristics(r)
    if parser.has_section("expect"):
        v = r.get("expect", "verdict")
        if v is not None and v not in VERDICTS:
            raise r.err(f"verdict must be one of {VERDICTS}", "expect", "verdict")
        cfg.expect = {k: r.get("expect", k) for k in parser.options("expect")}
    cfg.out_dir = r.get("output", "dir", cfg.out_dir)
    fmt = r.get("output", "format", cfg.format)
    if fmt not in FORMATS:
        raise r.err(f"format must be one of {FORMATS}", "output", "format")
    cfg.format = fmt
    cfg.seed = r.number("output", "seed", cfg.seed, int)
    return cfg


def _grid(r: _Reader, chart: Chart, default: GridSpec | None) -> GridSpec:
    if not r.p.has_section("grid"):
        return default or GridSpec.uniform(9, chart.dim)
    margin = r.number("grid", "margin", default.margin if default else 0.0)
    if r.p.has_option("grid", "counts"):
        counts = [int(round(c)) for c in r.floats("grid", "counts")]
        key = "counts"
    elif r.p.has_option("grid", "n"):
        counts = [r.number("grid", "n", kind=int)] * chart.dim
        key = "n"
    elif default is not None:
        counts, key = list(default.counts), "n"
    else:
        counts, key = [9] * chart.dim, "n"
    if len(counts) != chart.dim:
        raise r.err(f"grid needs {chart.dim} counts", "grid", key)
    if min(counts) < 5:
        raise r.err("grid needs at least 5 nodes per axis", "grid", key)
    return GridSpec(tuple(counts), margin)


def _characteristics(r: _Reader) -> dict:
    out = {}
    mu = r.get("characteristics", "mu")
    if mu is not None:
        out["mu"] = mu
    for k in ("a", "b", "c"):
        v = r.number("characteristics", k)
        if v is not None:
            out[k] = v
    out["sweep"] = r.boolean("characteristics", "sweep", False)
    exp = r.get("characteristics", "expect", "satisfied")
    if exp not in ("satisfied", "violated"):
        raise r.err("expect must be 'satisfied' or 'violated'", "characteristics", "expect")
    out["expect"] = exp
    return out


def set_tolerance(cfg: RunConfig, name: str, raw, reader: _Reader | None = None):
    def fail(msg):
        if reader is not None:
            return reader.err(msg, "tolerances", name)
        return ConfigError(msg, field=f"tolerances.{name}")
    if name not in DEFAULT_TOLERANCES:
        raise fail(f"unknown tolerance; expected one of {sorted(DEFAULT_TOLERANCES)}")
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise fail(f"expected a number, got {raw!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise fail("tolerances must be positive and finite")
    cfg.tolerances[name] = v


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field=str(path)) from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    """Serialize to config text; ``loads(dumps(cfg))`` reproduces ``cfg``."""
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    src = {"name": cfg.name}
    if cfg.lam is not None and cfg.mu is not None:
        src["lambda"] = repr(float(cfg.lam))
        src["mu"] = cfg.mu
    p["source"] = src
    p["chart"] = {
        "coords": ", ".join(cfg.chart.coords),
        "domain": "; ".join(f"{lo!r} {hi!r}" for lo, hi in cfg.chart.domain),
        "periodic": ", ".join(str(b).lower() for b in cfg.chart.periodic),
    }
    if cfg.lam is None or cfg.mu is None:
        p["g"] = dict(cfg.g_texts)
        p["A"] = dict(cfg.A_texts)
    p["grid"] = {"counts": ", ".join(str(c) for c in cfg.grid.counts),
                 "margin": repr(float(cfg.grid.margin))}
    p["probe"] = {"point": ", ".join(repr(float(c)) for c in cfg.probe)}
    tols = {k: repr(float(v)) for k, v in cfg.tolerances.items()
            if v is not None and v != DEFAULT_TOLERANCES[k]}
    if tols:
        p["tolerances"] = tols
    if cfg.characteristics:
        p["characteristics"] = {k: (str(v).lower() if isinstance(v, bool) else str(v))
                                for k, v in cfg.characteristics.items()}
    if cfg.expect:
        p["expect"] = dict(cfg.expect)
    out = {"format": cfg.format, "seed": str(cfg.seed)}
    if cfg.out_dir:
        out["dir"] = cfg.out_dir
    p["output"] = out
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()


def export_example(name: str) -> str:
    return dumps(RunConfig.from_example(name))


__all__ = ["RunConfig", "DEFAULT_TOLERANCES", "loads", "load", "dumps", "export_example",
           "set_tolerance", "NAMED"]
