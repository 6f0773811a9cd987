"""Command-line front end.

Subcommands mirror the two-stage workflow: ``partition`` builds and
saves a balanced forest, ``run`` simulates a scenario config (optionally
on a previously saved forest), ``validate`` runs the plane or pipe
setups and checks them against their reference values, ``bench``
measures throughput on the lid-driven cavity, and ``info`` prints the
level structure of a forest file.  ``OCTOFLOW_THREADS`` caps the number
of worker threads of any run.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .balance import balance_level_wise
from .forest import load_forest, save_forest
from .observe import evaluate, run_to_steady
from .scenarios import (
    ScenarioConfig,
    build_scenario_forest,
    load_config,
    setup_scenario,
)

# pipe reference rows: refinement selector -> (flow error, Linf error)
PIPE_REFERENCE = {
    "global:0": (7.96e-3, 19.2e-3),
    "global:1": (4.98e-3, 8.92e-3),
    "wall:1": (5.14e-3, 8.92e-3),
}
PIPE_RTOL = 0.15
PLANE_LINF_LIMIT = 1e-10


def _load(cfg_path, ranks=None) -> ScenarioConfig:
    cfg = load_config(cfg_path)
    if ranks:
        cfg.rank_count = int(ranks)
    return cfg


def cmd_partition(args) -> int:
    cfg = _load(args.config, args.ranks)
    forest = build_scenario_forest(cfg)
    save_forest(forest, args.output)
    levels = {l: 0 for l in forest.levels_in_use()}
    for blk in forest.blocks.values():
        levels[blk.level] += 1
    print(f"{args.output}: {len(forest.blocks)} blocks "
          f"on {forest.rank_count} ranks, per level {levels}")
    return 0


def _progress_line(rep):
    print(f"  t={rep.t:>8d}  L2={rep.L2:.6e}  Linf={rep.Linf:.6e}  "
          f"Q_err={rep.flow_rate_error:.4e}  {rep.mlups:.2f} MLUPS",
          flush=True)


def _run_scenario(cfg, forest_path=None, csv=None, vtk=None, quiet=False):
    forest = None
    if forest_path:
        forest = load_forest(forest_path)
        if forest.rank_count != cfg.rank_count:
            balance_level_wise(forest, cfg.rank_count, cfg.curve)
    scn = setup_scenario(cfg, forest=forest)
    stepper = scn.make_stepper()
    try:
        reports, steady = run_to_steady(
            scn, stepper, csv_path=csv, vtk_dir=vtk,
            progress=None if quiet else _progress_line,
        )
    finally:
        stepper.close()
    return scn, stepper, reports, steady


def cmd_run(args) -> int:
    cfg = _load(args.config, args.ranks)
    scn, stepper, reports, steady = _run_scenario(
        cfg, forest_path=args.forest, csv=args.csv, vtk=args.vtk,
    )
    last = reports[-1]
    state = "steady" if steady else "step target reached"
    print(f"{cfg.scenario} [{cfg.refinement}] {state} at t={last.t}: "
          f"L2={last.L2:.6e} Linf={last.Linf:.6e} "
          f"Q={last.flow_rate:.6f} (err {last.flow_rate_error:.4e})")
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args.config, None)
    want = {"plane": "plane_poiseuille", "pipe": "pipe_poiseuille"}[args.kind]
    if cfg.scenario != want:
        print(f"config is {cfg.scenario!r}, expected {want!r}",
              file=sys.stderr)
        return 1
    scn, stepper, reports, steady = _run_scenario(cfg, quiet=args.quiet)
    last = reports[-1]
    ok = True
    if args.kind == "plane":
        ok = steady and last.Linf < PLANE_LINF_LIMIT
        print(f"plane [{cfg.refinement}] steady={steady} "
              f"Linf={last.Linf:.3e} (limit {PLANE_LINF_LIMIT:.0e}): "
              + ("PASS" if ok else "FAIL"))
    else:
        key = f"{cfg.selector}:{cfg.refine_level}"
        if key not in PIPE_REFERENCE:
            print(f"no reference row for refinement {key!r}; "
                  f"known: {sorted(PIPE_REFERENCE)}", file=sys.stderr)
            return 1
        ref_q, ref_linf = PIPE_REFERENCE[key]
        dq = abs(last.flow_rate_error - ref_q) / ref_q
        dl = abs(last.Linf - ref_linf) / ref_linf
        ok = dq <= PIPE_RTOL and dl <= PIPE_RTOL
        print(f"pipe [{key}] flow_err={last.flow_rate_error:.4e} "
              f"(ref {ref_q:.2e}, off {dq:.1%}) "
              f"Linf={last.Linf:.4e} (ref {ref_linf:.2e}, off {dl:.1%}): "
              + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = _load(args.config, args.ranks)
    if cfg.scenario != "lid_cavity":
        print(f"config is {cfg.scenario!r}, expected 'lid_cavity'",
              file=sys.stderr)
        return 1
    if cfg.steps <= 0:
        cfg.steps = 10
    scn = setup_scenario(cfg)
    stepper = scn.make_stepper()
    try:
        stepper.run(1)  # JIT warmup outside the timed window
        stepper.level_seconds.clear()
        t0 = time.perf_counter()
        stepper.run(cfg.steps)
        dt = time.perf_counter() - t0
        rep = evaluate(scn, stepper, dt, cfg.steps)
    finally:
        stepper.close()
    total = sum(stepper.level_seconds.values()) or 1.0
    shares = {l: f"{100.0 * s / total:.1f}%"
              for l, s in sorted(stepper.level_seconds.items())}
    print(f"lid_cavity: {cfg.steps} coarse steps in {dt:.2f} s "
          f"on {cfg.rank_count} rank(s), "
          f"{stepper.threads} worker(s)")
    print(f"  weighted updates/step: "
          f"{rep.mlups * dt * 1e6 / cfg.steps:,.0f}")
    print(f"  MLUPS: {rep.mlups:.2f}")
    print(f"  time share per level: {shares}")
    return 0


def cmd_info(args) -> int:
    forest = load_forest(args.forest)
    counts: dict[int, int] = {}
    for blk in forest.blocks.values():
        counts[blk.level] = counts.get(blk.level, 0) + 1
    levels = sorted(counts)
    cover = {l: counts[l] / 8.0**l for l in levels}
    work = {l: counts[l] * 2.0**l for l in levels}
    csum, wsum, bsum = sum(cover.values()), sum(work.values()), len(forest.blocks)
    print(f"domain {forest.domain}  roots {forest.root_dims}  "
          f"cells/block {forest.cells_per_block}  ranks {forest.rank_count}")
    print(f"{bsum} blocks on levels {levels}")
    print("level   blocks   coverage   workload   memory")
    for l in levels:
        print(f"{l:>5}  {counts[l]:>7}   {100 * cover[l] / csum:>7.2f}%"
              f"   {100 * work[l] / wsum:>7.2f}%   {100 * counts[l] / bsum:>6.2f}%")
    loads = {}
    for blk in forest.blocks.values():
        loads[blk.rank] = loads.get(blk.rank, 0.0) + blk.workload
    arr = np.array([loads.get(r, 0.0) for r in range(forest.rank_count)])
    if forest.rank_count > 1:
        print(f"rank load: max/mean = {arr.max() / arr.mean():.3f}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="octoflow",
        description="block-structured lattice Boltzmann runs on refined grids",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build a forest and save it")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ranks", type=int)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("run", help="run a scenario config")
    p.add_argument("config")
    p.add_argument("--forest")
    p.add_argument("--ranks", type=int)
    p.add_argument("--csv")
    p.add_argument("--vtk")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("validate", help="run and check against references")
    p.add_argument("kind", choices=("plane", "pipe"))
    p.add_argument("config")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("bench", help="throughput measurement")
    p.add_argument("kind", choices=("cavity",))
    p.add_argument("config")
    p.add_argument("--ranks", type=int)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("info", help="describe a forest file")
    p.add_argument("forest")
    p.set_defaults(fn=cmd_info)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
