"""Command-line front end.

Exit codes: 0 success, 2 usage/configuration/input errors, 3 runtime
failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import compare_restart, growth_report
from .checkpoint import CheckpointError, inspect, read_checkpoint, write_checkpoint
from .codec import compress_cell
from .config import ConfigError, RunConfig, load_config
from .dumps import MalformedDumpError, ParticleDump, read_dump, write_dump
from .em import warm_up
from .gauss import GaussEnforcementError, UncorrectableNodeError
from .grid import Grid
from .pic import (NonNeutralError, PICState, Species, checkpoint_now, field_solve,
                  init_two_stream, push_cost, restart_from, restart_record, step_implicit)
from .runner import DiagnosticsWriter, RunFailure, read_diagnostics, run

log = logging.getLogger("gmcr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key, value, source="--set")
    for name in ("seed", "threads", "output_dir", "diagnostics"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "checkpoint_at", None) is not None:
        cfg.checkpoint_at = tuple(args.checkpoint_at)
    if getattr(args, "until", None) is not None:
        cfg.t_end = args.until
    return cfg.validate()


def _state_from_dump(dump: ParticleDump, cfg: RunConfig) -> PICState:
    """Wrap a standalone dump in a state: every species gets cfg.charge/cfg.mass."""
    grid = Grid(cfg.n_x, cfg.length)
    bad = np.flatnonzero((dump.x < 0) | (dump.x >= grid.length))
    if bad.size:
        raise MalformedDumpError(f"particle {bad[0]} at x={dump.x[bad[0]]!r} outside "
                                 f"[0, {grid.length!r})")
    species = [Species(cfg.charge, cfg.mass, p) for _, p in sorted(dump.by_species().items())]
    state = PICState(grid, species, np.zeros(grid.n), np.zeros(grid.n), cfg.dt,
                     picard_tol=cfg.picard_tol, seed=cfg.seed)
    rho = sum(state.rho_species(), np.zeros(grid.n))
    state.rho_background = np.full(grid.n, -rho.mean())
    state.efield = field_solve(state.rho_total(), grid)
    return state


def _print_stats(stats):
    print(f"raw bytes {stats.raw_bytes}, record bytes {stats.compressed_bytes}, "
          f"file bytes {stats.file_bytes}")
    print(f"compression ratio {stats.ratio:.2f} (file {stats.file_ratio:.2f})")


def cmd_run(args) -> int:
    cfg = _config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    state = init_two_stream(cfg.sim())
    diag = cfg.path(cfg.diagnostics)
    with DiagnosticsWriter(diag) as writer:
        result = run(state, cfg, writer)
    for path, stats in result.checkpoints:
        print(f"checkpoint {path} at t={read_checkpoint(path).time:g}: ratio {stats.ratio:.2f}")
    print(f"t={state.time:g} after {state.step} steps; diagnostics in {diag}")
    return EXIT_OK


def cmd_restart(args) -> int:
    cfg = _config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    ckpt = read_checkpoint(args.checkpoint)
    lemons = cfg.lemons and not args.no_lemons
    state = restart_from(ckpt, lemons=lemons, seed=args.seed, picard_max=cfg.picard_max,
                         threads=cfg.threads, stratified=cfg.stratified)
    first = restart_record(state, ckpt)
    diag = cfg.path(cfg.diagnostics)
    with DiagnosticsWriter(diag, append=True) as writer:
        writer.marker(f"restart from {args.checkpoint} at t={ckpt.time!r} step={ckpt.step} "
                      f"lemons={'true' if lemons else 'false'}")
        run(state, cfg, writer, first=first)
    print(f"restarted at t={ckpt.time:g} (lemons {'on' if lemons else 'off'}), "
          f"restart dE_total {first.d_energy:.3e}; now t={state.time:g}; diagnostics in {diag}")
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg = _config(args)
    dump = read_dump(args.dump)
    state = _state_from_dump(dump, cfg)
    ckpt, _ = checkpoint_now(state, cfg.fit(), cfg.min_particles, cfg.solver_tol, cfg.threads)
    stats = write_checkpoint(ckpt, args.out)
    ks = [r.k for sp in ckpt.species for r in sp.records if r.mode == "gm"]
    print(f"{len(dump)} particles, {len(ks)} GM cells (mean K "
          f"{np.mean(ks) if ks else 0:.2f}), written to {args.out}")
    _print_stats(stats)
    return EXIT_OK


def cmd_decompress(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    state = restart_from(ckpt, lemons=not args.no_lemons, seed=args.seed)
    dump = ParticleDump.from_species([s.particles for s in state.species])
    write_dump(dump, args.out, binary=True if args.binary else None)
    for i, s in enumerate(state.species):
        p = s.particles
        print(f"species {i}: {len(p)} particles, mass {p.alpha.sum():.16g}, "
              f"momentum {p.momentum().tolist()}, sum alpha|v|^2 {p.second_moment():.16g}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(inspect(args.checkpoint))
    return EXIT_OK


def cmd_bench_em(args) -> int:
    cfg = _config(args)
    dump = read_dump(args.dump)
    if len(dump) == 0:
        raise MalformedDumpError("dump has no particles")
    state = _state_from_dump(dump, cfg)
    warm_up()
    sweep = 0.0
    work = cells = iterations = 0
    ks = []
    for sp in state.species:
        cell = state.grid.cell_of(sp.particles.x)
        for c in range(state.grid.n):
            _, rep = compress_cell(sp.particles.take(np.flatnonzero(cell == c)), c,
                                   cfg.fit(), cfg.min_particles)
            if rep is None:
                continue
            cells += 1
            ks.append(rep.final_k)
            iterations += rep.em_iterations
            sweep += rep.sweep_seconds
            work += rep.em_iterations * rep.particles
    if not cells:
        raise MalformedDumpError(f"no cell holds more than {cfg.min_particles} particles")
    harness = init_two_stream(cfg.sim())
    start = time.perf_counter()
    for _ in range(args.steps):
        step_implicit(harness)
    em_us = 1e6 * sweep / work
    push_us = 1e6 * push_cost(harness)
    print(f"fitted cells: {cells}, mean K {np.mean(ks):.2f}, "
          f"EM iterations per cell {iterations / cells:.1f}")
    print(f"EM: {em_us:.4f} us per particle per EM iteration")
    print(f"push: {push_us:.4f} us per particle push "
          f"({args.steps} harness steps in {time.perf_counter() - start:.2f} s)")
    print(f"ratio EM/push: {em_us / push_us:.2f}")
    return EXIT_OK


def cmd_diag(args) -> int:
    cfg = _config(args)
    table = read_diagnostics(args.csv)
    seg = table.split()[0]
    g = growth_report(seg["t"], seg["E_E"], cfg.v_beam, cfg.length, cfg.mode,
                      window=tuple(args.window))
    print(f"growth rate over t in [{g.window[0]:g}, {g.window[1]:g}]: fitted {g.fitted:.5f}, "
          f"dispersion relation {g.oracle:.5f} (relative error {g.relative_error:.3f})")
    print(f"max continuity_rms {table['continuity_rms'].max():.3e}, "
          f"max |dE_total| {np.abs(table['dE_total']).max():.3e}")
    if args.compare:
        other = read_diagnostics(args.compare)
        segments = other.split()
        restarted = segments[-1] if other.markers else segments[0]
        c = compare_restart(seg, restarted)
        print(f"restart at t={c.t_restart:g}: E_E log-curve deviation {c.log_deviation:.4f} "
              "of the reference dynamic range")
        print(f"|dE_total|: reference max before restart {c.pre_restart_de:.3e}, "
              f"restart row {c.restart_de:.3e} ({c.spike_factor:.3g}x), "
              f"after restart max {c.post_restart_de:.3e}")
        print(f"gauss_rms change across restart {c.gauss_jump:.3e}, "
              f"max continuity_rms {c.max_continuity:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmcr", description=(
        "Gaussian-mixture checkpoint/restart for particle-in-cell data"))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, outputs=True):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        sp.add_argument("--threads", type=int, help="worker threads for per-cell work")
        if outputs:
            sp.add_argument("--out", dest="output_dir", help="output directory")
            sp.add_argument("--diagnostics", help="diagnostics CSV (relative to --out)")
            sp.add_argument("--until", type=float, help="end time")
            sp.add_argument("--checkpoint-at", type=float, nargs="*", metavar="T",
                            help="checkpoint times")

    r = sub.add_parser("run", help="run the two-stream simulation")
    common(r)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("restart", help="resume from a checkpoint")
    r.add_argument("checkpoint")
    common(r)
    r.add_argument("--no-lemons", action="store_true", help="skip the Lemons moment correction")
    r.add_argument("--seed", type=int, help="reconstruction seed (default: the checkpoint's)")
    r.set_defaults(func=cmd_restart)

    r = sub.add_parser("compress", help="compress a particle dump into a checkpoint")
    r.add_argument("dump")
    r.add_argument("-o", "--out", required=True, help="checkpoint file to write")
    common(r, outputs=False)
    r.set_defaults(func=cmd_compress)

    r = sub.add_parser("decompress", help="rebuild a particle dump from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("-o", "--out", required=True, help="dump file (.csv, or .gmpd for binary)")
    r.add_argument("--no-lemons", action="store_true")
    r.add_argument("--binary", action="store_true", help="force the binary dump format")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_decompress)

    r = sub.add_parser("inspect", help="summarize a checkpoint")
    r.add_argument("checkpoint")
    r.set_defaults(func=cmd_inspect)

    r = sub.add_parser("bench-em", help="EM cost per particle-iteration vs push cost")
    r.add_argument("dump")
    common(r, outputs=False)
    r.add_argument("--steps", type=int, default=10, help="harness steps timed for push cost")
    r.set_defaults(func=cmd_bench_em)

    r = sub.add_parser("diag", help="growth-rate fit and restart comparison")
    r.add_argument("csv")
    r.add_argument("--compare", metavar="CSV", help="restarted run to compare against")
    r.add_argument("--window", type=float, nargs=2, default=(3.0, 9.0), metavar=("T0", "T1"))
    common(r, outputs=False)
    r.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        where = exc.last_checkpoint or "none written"
        print(f"last good checkpoint: {where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, MalformedDumpError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (NonNeutralError, GaussEnforcementError, UncorrectableNodeError, RuntimeError,
            ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
