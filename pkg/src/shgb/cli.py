"""Command line front end.

``shgb SUBCOMMAND [--config PATH] [--set section.key=value ...] [--seed U64]
[--workers N] [--out DIR] [--force]``

Subcommands: ``estimate``, ``refsolve``, ``converge``, ``oracle`` and
``traj-dump``.  Every run writes its CSV files and a ``manifest.txt`` into
the output directory, which must be empty unless ``--force`` is given.
Failures exit nonzero and print a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_config

EXIT_CONFIG = 2
EXIT_RUNTIME = 1
EXIT_CHECKS = 3


def _versions():
    import numba
    import scipy
    import sklearn

    from . import __version__

    return {
        "shgb": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "scikit-learn": sklearn.__version__,
    }


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(path, force):
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ConfigError("--out", f"{out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError("--out", f"{out} is not empty (use --force to overwrite)")
    else:
        out.mkdir(parents=True)
    return out


def _write_manifest(out, command, argv, cfg, seed_source, files, wall):
    lines = [f"command = {command}", f"argv = {' '.join(argv)}"]
    lines += [f"version.{k} = {v}" for k, v in _versions().items()]
    lines.append(f"seed_source = {seed_source}")
    lines += [f"config.{k} = {v!r}" for k, v in cfg.items()]
    for f in files:
        lines.append(f"file.{f.name} = sha256:{_sha256(f)}")
    lines.append(f"wall_time_s = {wall:.3f}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _system(cfg):
    from .problems import get_problem

    return get_problem(cfg.problem, **cfg.problem_kwargs())


def _sampler(cfg, sys):
    from .hopping import default_sampler

    return default_sampler(sys, **cfg.sampler_kwargs())


def _estimator_config(cfg, n_traj=None):
    from .estimator import EstimatorConfig

    return EstimatorConfig(
        n_traj=cfg.n_traj if n_traj is None else n_traj, T=cfg.T, axes=cfg.grid, dt=cfg.dt,
        master_seed=cfg.master_seed, cutoff=cfg.cutoff, block_size=cfg.block_size,
        workers=cfg.workers, on_error=cfg.on_error,
    )


def _reference(cfg, sys, log):
    """Reference field on the output grid: read from file or solved on the padded box."""
    from .beam import FieldGrid
    from .hopping import initial_field
    from .refsolver import reference_solve

    if cfg.reference_file:
        ref = FieldGrid.from_csv(cfg.reference_file)
        try:
            return ref if ref.same_grid(FieldGrid(cfg.grid, ref.n_surfaces)) else ref.restrict(cfg.grid)
        except ValueError as exc:
            raise ConfigError("reference.file", f"grid does not contain the output grid ({exc})") from None
    initial = initial_field(sys, cfg.ref_grid, **cfg.sampler_kwargs())
    log(f"reference solve on {list(cfg.ref_grid)}")
    field = reference_solve(sys, initial, cfg.T, cfl=cfg.cfl, weno_eps=cfg.weno_eps)
    try:
        return field.restrict(cfg.grid)
    except ValueError as exc:
        raise ConfigError("reference.x1", f"reference box must contain the output grid nodes ({exc})") from None


def cmd_estimate(cfg, out, log):
    from .estimator import estimate

    sys_ = _system(cfg)
    field = estimate(sys_, _sampler(cfg, sys_), _estimator_config(cfg))
    if field.dropped:
        log(f"dropped {field.dropped} failed trajectories (run.on_error=drop)")
    path = out / "field.csv"
    field.to_csv(path)
    return [path], 0


def cmd_refsolve(cfg, out, log):
    field = _reference(cfg, _system(cfg), log)
    path = out / "reference.csv"
    field.to_csv(path)
    return [path], 0


def cmd_converge(cfg, out, log):
    from .estimator import convergence_study

    sys_ = _system(cfg)
    ref = _reference(cfg, sys_, log)
    ref_path = out / "reference.csv"
    ref.to_csv(ref_path)
    report = convergence_study(
        sys_, _sampler(cfg, sys_), _estimator_config(cfg), cfg.n_list, cfg.repeats, ref,
        progress=lambda n, r, e: log(f"N={n} repeat={r} err={np.sqrt(np.sum(e ** 2)):.4g}"),
    )
    path = out / "errors.csv"
    report.to_csv(path)
    log(f"slope {report.slope:.4f} +- {report.slope_stddev:.4f}")
    return [path, ref_path], 0


def cmd_oracle(cfg, out, log):
    from .oracles import oracle_suite

    rows = oracle_suite(
        cfg.master_seed, systems=cfg.oracle_systems, max_n=cfg.oracle_max_n, t=cfg.oracle_t,
        n_traj=cfg.oracle_n_traj, dyson_terms=cfg.oracle_dyson_terms,
        jump_traj=cfg.oracle_jump_traj, progress=lambda c, r: log(f"system {c} done"),
    )
    path = out / "oracle.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "case", "statistic", "threshold", "passed"])
        for r in rows:
            w.writerow([r.check, r.case, repr(r.statistic), repr(r.threshold), int(r.passed)])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        log(f"FAILED {r.check} case {r.case}: {r.statistic!r} vs {r.threshold!r}")
    return [path], (EXIT_CHECKS if failed else 0)


def cmd_traj_dump(cfg, out, log):
    from .hopping import run_trajectory, write_trajectory_csv

    sys_ = _system(cfg)
    sampler = _sampler(cfg, sys_)
    files = []
    for index in range(cfg.traj_first, cfg.traj_first + cfg.traj_count):
        res = run_trajectory(sys_, sampler, cfg.T, cfg.dt, cfg.master_seed, index=index, trace=True)
        path = out / f"traj_{index}.csv"
        write_trajectory_csv(path, res, sys_.n)
        files.append(path)
    return files, 0


COMMANDS = {
    "estimate": (cmd_estimate, True),
    "refsolve": (cmd_refsolve, False),
    "converge": (cmd_converge, True),
    "oracle": (cmd_oracle, True),
    "traj-dump": (cmd_traj_dump, True),
}


def build_parser():
    p = argparse.ArgumentParser(prog="shgb", description="Surface hopping Gaussian beam solver")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="configuration file (INI style)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", help="master seed (unsigned 64-bit integer)")
    p.add_argument("--workers", help="worker processes (default: $SHGB_WORKERS or the config)")
    p.add_argument("--out", default="shgb-out", help="output directory (default: shgb-out)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress messages")
    return p


def _error(kind, message, key=None, code=EXIT_RUNTIME):
    rec = {"error": kind, "message": message}
    if key is not None:
        rec["key"] = key
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    func, randomized = COMMANDS[args.command]
    try:
        text = ""
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError("--config", str(exc)) from None
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.master_seed={args.seed}")
        workers = args.workers if args.workers is not None else os.environ.get("SHGB_WORKERS")
        if workers is not None:
            overrides.append(f"run.workers={workers}")
        cfg = parse_config(text, overrides)
        seed_source = "config" if cfg.master_seed is not None else "none"
        if args.seed is not None:
            seed_source = "flag"
        if cfg.master_seed is None and randomized:
            cfg.master_seed = int(np.random.SeedSequence().generate_state(2, np.uint32).view(np.uint64)[0])
            seed_source = "entropy"
        if cfg.master_seed is None:
            cfg.master_seed = 0
        out = _prepare_out(args.out, args.force)
    except ConfigError as exc:
        return _error("config", exc.message, key=exc.key, code=EXIT_CONFIG)

    start = time.perf_counter()
    try:
        files, status = func(cfg, out, log)
    except ConfigError as exc:
        return _error("config", exc.message, key=exc.key, code=EXIT_CONFIG)
    except Exception as exc:  # reported as a machine-readable record
        rec_code = _error(type(exc).__name__, str(exc), code=EXIT_RUNTIME)
        (out / "error.json").write_text(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return rec_code
    _write_manifest(out, args.command, argv, cfg, seed_source, files, time.perf_counter() - start)
    return status


if __name__ == "__main__":
    sys.exit(main())
