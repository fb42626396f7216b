"""Run configuration: a flat, sectioned ``key = value`` file plus flag overrides.

Grammar (see docs/config.md)::

    # comment
    [run]
    experiment = final-configs
    seed = 0:20          # single value, comma list, or half-open range a:b
    [model]
    w = 1,2,3
    R = 15

Sections only group keys; every key name is unique across sections.
Resolution order is defaults, then the preset, then the file, then flags.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

EXPERIMENTS = ("simulate", "solve", "couple", "final-configs", "stable-shape", "occupation")
ALL = frozenset(EXPERIMENTS)
# keys that steer execution but not results; they stay out of the hash
EXECUTION_KEYS = ("out", "sequential", "workers")


class ConfigError(ValueError):
    """A validation failure tied to one field (and, for files, one line)."""

    def __init__(self, key: str, message: str, where: str | None = None):
        self.key, self.message, self.where = key, message, where
        super().__init__(f"{where + ': ' if where else ''}{key}: {message}")


# ---- value codecs -------------------------------------------------------------

def _int(s) -> int:
    if isinstance(s, bool):
        raise ValueError("expected an integer")
    if isinstance(s, int):
        return s
    return int(str(s).strip())


def _float(s) -> float:
    if isinstance(s, (int, float)) and not isinstance(s, bool):
        return float(s)
    text = str(s).strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    text = str(s).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _int_list(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(_int(v) for v in s)
    if isinstance(s, int):
        return (s,)
    out = []
    for part in str(s).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        else:
            out.append(int(part))
    return tuple(out)


def _float_list(s) -> tuple[float, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(_float(v) for v in s)
    if isinstance(s, (int, float)):
        return (float(s),)
    return tuple(_float(p) for p in str(s).split(",") if p.strip())


def _opt_float(s) -> float | None:
    if s is None or str(s).strip().lower() in ("", "auto", "none"):
        return None
    return _float(s)


def _str(s) -> str:
    return str(s).strip()


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _fmt_h(v: float) -> str:
    return f"1/{round(1 / v)}"


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _opt(section: str, parse, help: str, experiments=ALL, fmt=_fmt, flag: str | None = None):
    return {"section": section, "parse": parse, "help": help, "experiments": frozenset(experiments),
            "fmt": fmt, "flag": flag}


SHAPE = {"stable-shape"}
CONTINUUM = {"solve", "couple"}


@dataclass(frozen=True)
class RunConfig:
    experiment: str = field(default="simulate", metadata=_opt("run", _str, "experiment kind"))
    preset: str = field(default="none", metadata=_opt("run", _str, "named parameter preset"))
    seed: tuple = field(default=(0,), metadata=_opt("run", _int_list, "seeds: 7, 0,3,5 or a:b"))
    out: str = field(default="", metadata=_opt("run", _str, "output directory (empty: derived)"))
    sequential: bool = field(default=False, metadata=_opt("run", _bool, "run matrix cells in order"))
    workers: int = field(default=0, metadata=_opt("run", _int, "worker processes (0: one per CPU)"))

    N: int = field(default=1, metadata=_opt("model", _int, "dimension"))
    M: int = field(default=2, metadata=_opt("model", _int, "number of opinions"))
    w: tuple = field(default=(3,), metadata=_opt("model", _int_list, "neighborhood radius (list: matrix)"))
    p: float = field(default=math.inf, metadata=_opt("model", _float, "l^p norm of the neighborhood",
                                                     {"simulate", "solve", "stable-shape", "occupation"}))
    R: int = field(default=15, metadata=_opt("model", _int, "torus width in units of w"))
    nodes: int = field(default=0, metadata=_opt("model", _int, "target node count; sets R per w when > 0",
                                                 {"simulate", "couple"}))
    closure: str = field(default="closed", metadata=_opt("model", _str, "closed or open neighborhood",
                                                         {"simulate", "stable-shape"}))

    horizon: float = field(default=math.inf, metadata=_opt("numeric", _float, "lattice time horizon",
                                                           {"simulate"}))
    max_events_per_node: int = field(default=1000, metadata=_opt("numeric", _int, "event cap per node",
                                                                 {"simulate", "final-configs"}))
    h: float = field(default=1 / 256, metadata=_opt("numeric", _float, "continuum grid step (1/integer)",
                                                    {"solve", "occupation"}, fmt=_fmt_h))
    dt: float | None = field(default=None, metadata=_opt("numeric", _opt_float, "time step (auto: h/4)",
                                                         CONTINUUM))
    T: float = field(default=1.0, metadata=_opt("numeric", _float, "final continuum time", {"solve", "couple"}))
    snapshots: int = field(default=11, metadata=_opt("numeric", _int, "evenly spaced snapshot times",
                                                     {"solve", "couple"}))
    form: str = field(default="single_site", metadata=_opt("numeric", _str, "single_site, sign or pair_swap",
                                                           {"solve"}))
    scheme: str = field(default="euler", metadata=_opt("numeric", _str, "euler or picard", {"solve"}))
    quadrature: str = field(default="auto", metadata=_opt("numeric", _str, "auto, cell or segment", {"solve"}))
    init: str = field(default="gaussian", metadata=_opt("numeric", _str, "gaussian or sawtooth", {"solve"}))
    eps: tuple = field(default=(0.1, 0.05, 0.025, 0.0125),
                       metadata=_opt("numeric", _float_list, "epsilon list", {"occupation"}))
    K: float = field(default=2.0, metadata=_opt("numeric", _float, "Lipschitz constant", {"occupation"},
                                                flag="--lipschitz"))
    k: int = field(default=6, metadata=_opt("numeric", _int, "dyadic level", {"occupation"}, flag="--level"))
    sampler_size: int = field(default=32, metadata=_opt("numeric", _int, "random family members",
                                                        {"occupation"}))
    coupled: bool = field(default=False, metadata=_opt("numeric", _bool, "nested initial data across w",
                                                       {"final-configs"}))
    radius: int = field(default=0, metadata=_opt("numeric", _int, "erosion box half-side (0: 2^(2N) w^(N+1))",
                                                 SHAPE))
    r_cap: int = field(default=500, metadata=_opt("numeric", _int, "largest erosion half-side attempted", SHAPE))
    rule: str = field(default="lex", metadata=_opt("numeric", _str, "erosion selection: lex or random", SHAPE))
    budget: int = field(default=5_000_000, metadata=_opt("numeric", _int, "exhaustive search node budget",
                                                         SHAPE))

    # ---- derived ----

    @property
    def cells_per_unit(self) -> int:
        return int(round(1 / self.h))

    @property
    def time_step(self) -> float:
        return self.h / 4 if self.dt is None else self.dt

    def R_for(self, w: int) -> int:
        if self.nodes > 0:
            return max(3, round(self.nodes ** (1 / self.N) / w))
        return self.R

    # ---- serialization ----

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return build(d)

    def to_text(self) -> str:
        lines = []
        for section in ("run", "model", "numeric"):
            lines.append(f"[{section}]")
            for f in fields(self):
                if f.metadata["section"] == section:
                    lines.append(f"{f.name} = {f.metadata['fmt'](getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FIELDS = {f.name: f for f in fields(RunConfig)}


def flag_name(key: str) -> str:
    """Command-line spelling of a key: lower case, dashes for underscores."""
    return FIELDS[key].metadata["flag"] or "--" + key.lower().replace("_", "-")


PRESETS: dict[str, dict] = {
    "none": {},
    "fig-1d": {"N": 1, "M": 2, "w": (100,), "R": 14},
    # full size is a 4000-node torus; 800 nodes keeps it at desk scale
    "fig-2d": {"N": 2, "M": 2, "w": (4, 8, 12), "nodes": 800},
    "fig-final-1d": {"N": 1, "M": 2, "w": (1, 2, 3), "R": 15},
    "sawtooth": {"N": 1, "M": 2, "R": 4, "h": 1 / 256, "T": 1.5, "form": "sign", "init": "sawtooth",
                 "snapshots": 3},
}


def _validate(c: RunConfig) -> None:
    def bad(key, msg):
        raise ConfigError(key, msg)

    if c.experiment not in EXPERIMENTS:
        bad("experiment", f"must be one of {', '.join(EXPERIMENTS)} (got {c.experiment!r})")
    if c.preset not in PRESETS:
        bad("preset", f"must be one of {', '.join(PRESETS)} (got {c.preset!r})")
    if not c.seed or min(c.seed) < 0:
        bad("seed", "need at least one non-negative seed")
    if c.workers < 0:
        bad("workers", "must be >= 0")
    if c.N < 1:
        bad("N", f"must be >= 1 (got {c.N})")
    if c.M < 2:
        bad("M", f"must be >= 2 (got {c.M})")
    if not c.w or min(c.w) < 1:
        bad("w", f"must be >= 1 (got {_fmt(c.w)})")
    if not c.p >= 1:
        bad("p", f"must be >= 1 or inf (got {c.p})")
    if c.R < 3:
        bad("R", f"must be >= 3 (got {c.R})")
    if c.nodes < 0:
        bad("nodes", "must be >= 0")
    if c.closure not in ("closed", "open"):
        bad("closure", "must be closed or open")
    if not c.horizon > 0:
        bad("horizon", "must be positive")
    if c.max_events_per_node < 1:
        bad("max_events_per_node", "must be >= 1")
    if not c.h > 0 or abs(1 / c.h - round(1 / c.h)) > 1e-9 * (1 / c.h):
        bad("h", f"must be 1/n for a positive integer n (got {c.h})")
    if c.dt is not None and not c.dt > 0:
        bad("dt", "must be positive")
    if not c.T > 0:
        bad("T", "must be positive")
    if c.snapshots < 2:
        bad("snapshots", "must be >= 2")
    if c.form not in ("single_site", "sign", "pair_swap"):
        bad("form", "must be single_site, sign or pair_swap")
    if c.scheme not in ("euler", "picard"):
        bad("scheme", "must be euler or picard")
    if c.quadrature not in ("auto", "cell", "segment"):
        bad("quadrature", "must be auto, cell or segment")
    if c.init not in ("gaussian", "sawtooth"):
        bad("init", "must be gaussian or sawtooth")
    if not c.eps or min(c.eps) <= 0:
        bad("eps", "every epsilon must be positive")
    if not c.K > 0:
        bad("K", "must be positive")
    if c.k < 0:
        bad("k", "must be >= 0")
    if c.sampler_size < 0:
        bad("sampler_size", "must be >= 0")
    if c.radius < 0:
        bad("radius", "must be >= 0")
    if c.r_cap < 1:
        bad("r_cap", "must be >= 1")
    if c.rule not in ("lex", "random"):
        bad("rule", "must be lex or random")
    if c.budget < 1:
        bad("budget", "must be >= 1")
    # cross-field preconditions of the experiment modules
    if c.experiment == "solve":
        if c.form == "sign" and c.M != 2:
            bad("form", "the sign form needs M = 2")
        if c.init == "sawtooth":
            if c.N != 1:
                bad("init", "sawtooth data is one-dimensional")
            if (3 * c.R) % 4:
                bad("R", "sawtooth data needs 3R/4 to be an integer")
            if c.form != "sign":
                bad("init", "sawtooth data is sign-form data; set form = sign")
        steps = c.T / c.time_step
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            bad("dt", "T must be a multiple of dt")
    if c.experiment == "final-configs" and (c.N != 1 or c.M != 2):
        bad("N", "final configurations are computed for N = 1, M = 2")
    if c.experiment == "final-configs" and c.coupled:
        top = max(c.w)
        if any(top % w or (top // w) % 2 == 0 for w in c.w):
            bad("w", "coupled runs need max(w) / w odd for every w")
    if c.experiment == "occupation":
        if c.N != 1 or c.M != 2:
            bad("N", "occupation measures are computed on the 1D torus with M = 2")
        if (c.cells_per_unit * 2.0**-c.k) < 1 or (c.cells_per_unit % 2**c.k):
            bad("h", "the field grid must refine the 2^-k grid")


def build(values: dict, where: dict | None = None) -> RunConfig:
    """Parse raw values (strings or typed) over the defaults and validate."""
    where = where or {}
    parsed = {}
    for key, raw in values.items():
        if key not in FIELDS:
            raise ConfigError(key, "unknown key", where.get(key))
        try:
            parsed[key] = FIELDS[key].metadata["parse"](raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(key, f"cannot parse {raw!r} ({exc})", where.get(key)) from None
    cfg = replace(RunConfig(), **parsed)
    try:
        _validate(cfg)
    except ConfigError as exc:
        exc.where = where.get(exc.key)
        raise ConfigError(exc.key, exc.message, exc.where) from None
    return cfg


def read_config_file(path) -> tuple[dict, dict]:
    """Raw values and ``file:line`` locations from a sectioned key-value file."""
    path = Path(path)
    text = path.read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None,
                                       default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError("file", str(exc).splitlines()[0], f"{path}:{line}" if line else str(path)) from None
    lines = text.splitlines()
    values, where = {}, {}
    for section in parser.sections():
        if section not in ("run", "model", "numeric"):
            loc = _locate(lines, rf"^\s*\[{re.escape(section)}\]")
            raise ConfigError(section, "unknown section", f"{path}:{loc}")
        for key, raw in parser.items(section):
            loc = _locate(lines, rf"^\s*{re.escape(key)}\s*[=:]")
            if key in values:
                raise ConfigError(key, "given twice", f"{path}:{loc}")
            values[key] = raw
            where[key] = f"{path}:{loc}"
            if key in FIELDS and FIELDS[key].metadata["section"] != section:
                raise ConfigError(key, f"belongs in [{FIELDS[key].metadata['section']}]", where[key])
    return values, where


def _locate(lines, pattern) -> int:
    rx = re.compile(pattern)
    for n, line in enumerate(lines, 1):
        if rx.match(line):
            return n
    return 0


def resolve(experiment: str | None, path=None, flags: dict | None = None) -> RunConfig:
    """Defaults < preset < file < flags.  ``experiment`` comes from the subcommand."""
    values, where = {}, {}
    if path is not None:
        values, where = read_config_file(path)
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    for k in flags:
        where[k] = flag_name(k)
    if experiment is not None:
        if "experiment" in values and values["experiment"].strip() != experiment:
            raise ConfigError("experiment", f"file says {values['experiment']!r} but the command is "
                              f"{experiment!r}", where.get("experiment"))
        values["experiment"] = experiment
    preset = flags.get("preset", values.get("preset", "none"))
    if preset not in PRESETS:
        raise ConfigError("preset", f"must be one of {', '.join(PRESETS)} (got {preset!r})",
                          where.get("preset"))
    merged = dict(PRESETS[preset])
    merged.update(values)
    merged.update(flags)
    merged["preset"] = preset
    return build(merged, where)
