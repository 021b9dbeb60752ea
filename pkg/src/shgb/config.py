"""Run configuration: a small INI-style file parsed into a validated RunConfig.

Grammar
-------
Sections in square brackets, then ``key = value`` lines; ``#`` and ``;``
start comments.  Every key must be known for its section; values are
converted to the documented type and checked.  Grid axes are written as
``x1 = lo, hi, count`` (one line per dimension), lists as comma separated
values.

``[problem]``
    ``id`` (ex1, ex2, tully_ecr, single_crossing), ``epsilon``, ``delta``
    (tully_ecr only; default ``5 epsilon``), ``r0`` and ``p0`` (initial beam
    position for the QCLE problems).
``[run]``
    ``T``, ``dt`` (default ``min(0.01, epsilon / 4)``, ``0.002`` for
    tully_ecr), ``n_traj``, ``master_seed``, ``cutoff``, ``block_size``,
    ``workers``, ``on_error`` (``raise`` aborts on a failed trajectory,
    ``drop`` gives it zero weight; single_crossing defaults to ``drop``).
``[grid]``
    ``x1``, ``x2``: output grid of the estimate.
``[reference]``
    ``x1``, ``x2``: the grid of the reference solve, either ``lo, hi, count``
    or a box ``lo, hi`` that is filled with the output grid spacing (the
    default box pads the output grid), ``cfl``, ``weno_eps``, ``file``
    (a FieldGrid CSV used instead of solving).
``[converge]``
    ``n_list``, ``repeats``.
``[oracle]``
    ``systems``, ``max_n``, ``t``, ``n_traj``, ``dyson_terms``, ``jump_traj``.
``[traj]``
    ``first``, ``count``: trajectory indices written by ``traj-dump``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

from ._validation import check_axes, check_int, check_positive, check_seed
from .dynamics import default_dt
from .problems import PROBLEMS

__all__ = ["ConfigError", "RunConfig", "parse_config", "PRESETS"]


class ConfigError(ValueError):
    """A configuration problem tied to one key (``section.key``)."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


# Per-problem defaults: final time, output grid, padded reference box, and
# the beam step when the generic default is too coarse.
PRESETS = {
    "ex1": dict(epsilon=0.1, T=0.5, grid=((-4.0, 4.0, 401), (-4.0, 4.0, 401)),
                ref_box=((-5.0, 5.0), (-5.0, 5.0))),
    "ex2": dict(epsilon=0.08, T=0.5, grid=((-2.0, 2.0, 401), (-2.0, 2.0, 401)),
                ref_box=((-2.0, 2.0), (-2.0, 2.0))),
    "tully_ecr": dict(epsilon=1.0 / 32.0, T=2.0, dt=0.002,
                      grid=((-4.0, 4.0, 401), (-2.0, 4.0, 301)),
                      ref_box=((-4.0, 4.0), (-2.0, 4.0))),
    # a few initial beams sit at r <= 0 and run into the 1/r wall: drop them
    "single_crossing": dict(epsilon=0.01, T=0.5, grid=((-0.6, 1.6, 221), (0.0, 2.0, 201)),
                            ref_box=((-0.6, 1.6), (0.0, 2.0)), on_error="drop"),
}


def _real(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {v!r}") from None


def _integer(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {v!r}") from None


def _positive(key, v):
    try:
        return check_positive(key, _real(key, v))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(key, str(exc).split(": ", 1)[-1]) from None


def _count(key, v, minimum=1):
    n = _integer(key, v)
    if n < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {n}")
    return n


def _axis(key, v):
    parts = [p.strip() for p in v.split(",")]
    if len(parts) != 3:
        raise ConfigError(key, f"expected 'lo, hi, count', got {v!r}")
    lo, hi = _real(key, parts[0]), _real(key, parts[1])
    c = _integer(key, parts[2])
    try:
        return check_axes(key, [(lo, hi, c)])[0]
    except ValueError as exc:
        raise ConfigError(key, str(exc).split(": ", 1)[-1]) from None


def _int_list(key, v):
    items = [p.strip() for p in v.split(",") if p.strip()]
    if not items:
        raise ConfigError(key, "expected a comma separated list")
    return tuple(_count(key, p) for p in items)


_SCHEMA = {
    "problem": {"id", "epsilon", "delta", "r0", "p0"},
    "run": {"T", "dt", "n_traj", "master_seed", "cutoff", "block_size", "workers", "on_error"},
    "grid": {"x1", "x2"},
    "reference": {"x1", "x2", "cfl", "weno_eps", "file"},
    "converge": {"n_list", "repeats"},
    "oracle": {"systems", "max_n", "t", "n_traj", "dyson_terms", "jump_traj"},
    "traj": {"first", "count"},
}


@dataclass
class RunConfig:
    """Every parameter of a run, with defaults resolved."""

    problem: str = "ex1"
    epsilon: float = 0.1
    delta: Optional[float] = None
    r0: Optional[float] = None
    p0: Optional[float] = None
    T: float = 0.5
    dt: float = 0.01
    n_traj: int = 10000
    master_seed: Optional[int] = None
    cutoff: float = 40.0
    block_size: int = 1024
    workers: int = 1
    on_error: str = "raise"
    grid: Tuple = ()
    ref_grid: Tuple = ()
    cfl: float = 0.8
    weno_eps: Optional[float] = None
    reference_file: Optional[str] = None
    n_list: Tuple = (100, 200, 400, 800, 1600, 3200, 6400)
    repeats: int = 20
    oracle_systems: int = 20
    oracle_max_n: int = 5
    oracle_t: float = 1.0
    oracle_n_traj: int = 100000
    oracle_dyson_terms: int = 20
    oracle_jump_traj: int = 10000
    traj_first: int = 0
    traj_count: int = 1

    def problem_kwargs(self):
        kw = {"epsilon": self.epsilon}
        if self.problem == "tully_ecr":
            kw["delta"] = self.delta
        return kw

    def sampler_kwargs(self):
        kw = {}
        if self.r0 is not None:
            kw["r0"] = self.r0
        if self.p0 is not None:
            kw["p0"] = self.p0
        return kw

    def items(self):
        """``(name, value)`` pairs in declaration order, for the manifest."""
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _reference_axes(grid, box):
    """Padded reference box with the spacing of ``grid``, snapped to its nodes."""
    out = []
    for (lo, hi, c), (blo, bhi) in zip(grid, box):
        h = (hi - lo) / (c - 1)
        k_lo = math.floor((lo - min(blo, lo)) / h + 1e-9)
        k_hi = math.floor((max(bhi, hi) - hi) / h + 1e-9)
        out.append((lo - k_lo * h, hi + k_hi * h, c + k_lo + k_hi))
    return tuple(out)


def parse_config(text, overrides=()):
    """Parse config ``text`` and ``overrides`` (``section.key=value`` strings)."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).replace("\n", " ")) from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value.strip())

    raw = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, f"unknown section; expected one of {sorted(_SCHEMA)}")
        for key, value in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            raw[f"{section}.{key}"] = value.strip()

    cfg = RunConfig()
    pid = raw.get("problem.id", "ex1")
    if pid not in PROBLEMS:
        raise ConfigError("problem.id", f"unknown problem {pid!r}; expected one of {sorted(PROBLEMS)}")
    preset = PRESETS[pid]
    cfg.problem = pid
    cfg.epsilon = _positive("problem.epsilon", raw.get("problem.epsilon", preset["epsilon"]))
    if pid == "ex1" and not cfg.epsilon < 1:
        raise ConfigError("problem.epsilon", f"ex1 initial data needs epsilon < 1, got {cfg.epsilon}")
    if "problem.delta" in raw:
        if pid != "tully_ecr":
            raise ConfigError("problem.delta", f"only used by tully_ecr, not {pid}")
        cfg.delta = _positive("problem.delta", raw["problem.delta"])
    elif pid == "tully_ecr":
        cfg.delta = 5.0 * cfg.epsilon
    for name in ("r0", "p0"):
        key = f"problem.{name}"
        if key in raw:
            if pid not in ("tully_ecr", "single_crossing"):
                raise ConfigError(key, f"only used by the QCLE problems, not {pid}")
            v = _real(key, raw[key])
            if not math.isfinite(v):
                raise ConfigError(key, "must be finite")
            setattr(cfg, name, v)

    cfg.T = _positive("run.T", raw.get("run.T", preset["T"]))
    if "run.dt" in raw:
        cfg.dt = _positive("run.dt", raw["run.dt"])
    else:
        cfg.dt = preset.get("dt", default_dt(cfg.epsilon))
    cfg.n_traj = _count("run.n_traj", raw.get("run.n_traj", cfg.n_traj))
    if "run.master_seed" in raw:
        try:
            cfg.master_seed = check_seed("run.master_seed", _integer("run.master_seed", raw["run.master_seed"]))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("run.master_seed", str(exc).split(": ", 1)[-1]) from None
    if "run.cutoff" in raw:
        v = _real("run.cutoff", raw["run.cutoff"])
        if not v > 0:
            raise ConfigError("run.cutoff", f"must be positive, got {v}")
        cfg.cutoff = v
    cfg.block_size = _count("run.block_size", raw.get("run.block_size", cfg.block_size))
    cfg.workers = _count("run.workers", raw.get("run.workers", cfg.workers))
    cfg.on_error = raw.get("run.on_error", preset.get("on_error", "raise")).strip()
    if cfg.on_error not in ("raise", "drop"):
        raise ConfigError("run.on_error", f"expected 'raise' or 'drop', got {cfg.on_error!r}")

    grid = list(preset["grid"])
    for d, key in enumerate(("x1", "x2")):
        if f"grid.{key}" in raw:
            grid[d] = _axis(f"grid.{key}", raw[f"grid.{key}"])
    cfg.grid = tuple(grid)
    box = list(preset["ref_box"])
    explicit = {}
    for d, key in enumerate(("x1", "x2")):
        v = raw.get(f"reference.{key}")
        if v is None:
            continue
        if len(v.split(",")) == 2:
            lo, hi = (_real(f"reference.{key}", p) for p in v.split(","))
            if not lo < hi:
                raise ConfigError(f"reference.{key}", f"need lo < hi, got {v!r}")
            box[d] = (lo, hi)
        else:
            explicit[d] = _axis(f"reference.{key}", v)
    ref = list(_reference_axes(cfg.grid, box))
    for d, axis in explicit.items():
        ref[d] = axis
    cfg.ref_grid = tuple(ref)
    if "reference.cfl" in raw:
        cfg.cfl = _positive("reference.cfl", raw["reference.cfl"])
        if cfg.cfl > 1:
            raise ConfigError("reference.cfl", f"must be at most 1, got {cfg.cfl}")
    if "reference.weno_eps" in raw:
        cfg.weno_eps = _positive("reference.weno_eps", raw["reference.weno_eps"])
    cfg.reference_file = raw.get("reference.file") or None

    if "converge.n_list" in raw:
        n_list = _int_list("converge.n_list", raw["converge.n_list"])
        if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
            raise ConfigError("converge.n_list", "must be increasing with at least two entries")
        cfg.n_list = n_list
    cfg.repeats = _count("converge.repeats", raw.get("converge.repeats", cfg.repeats), minimum=2)

    cfg.oracle_systems = _count("oracle.systems", raw.get("oracle.systems", cfg.oracle_systems))
    cfg.oracle_max_n = _count("oracle.max_n", raw.get("oracle.max_n", cfg.oracle_max_n), minimum=2)
    cfg.oracle_t = _positive("oracle.t", raw.get("oracle.t", cfg.oracle_t))
    cfg.oracle_n_traj = _count("oracle.n_traj", raw.get("oracle.n_traj", cfg.oracle_n_traj), minimum=2)
    cfg.oracle_dyson_terms = _count(
        "oracle.dyson_terms", raw.get("oracle.dyson_terms", cfg.oracle_dyson_terms), minimum=0)
    cfg.oracle_jump_traj = _count("oracle.jump_traj", raw.get("oracle.jump_traj", cfg.oracle_jump_traj))

    cfg.traj_first = _count("traj.first", raw.get("traj.first", cfg.traj_first), minimum=0)
    cfg.traj_count = _count("traj.count", raw.get("traj.count", cfg.traj_count))
    return cfg
