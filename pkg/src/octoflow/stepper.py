"""Recursive time stepping across refinement levels.

One coarse step advances every level to the same physical time: a level
L block runs 2^L stream passes, fed by equal-level ghost exchange, by
explosion from the next coarser level, and merged back via coalescence.
The production path compiles the recursion into a flat op program with
two-phase communication (initiate early, finish late) and a fused
stream-collide pass on the finest level; a blocking unfused reference
with identical semantics backs the equivalence tests.

Rank workers all execute the same program.  Sequentially they proceed
op by op in round-robin, which never blocks because every initiate
precedes the matching finish in program order; threaded, each rank runs
the whole program and blocks inside finish until the mailbox delivers.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from octoflow.comm import (
    Mailbox,
    PATTERN_COALESCE,
    PATTERN_EQUAL,
    PATTERN_EXPLODE,
)
from octoflow.fields import run_collide, run_fused, run_stream
from octoflow.lattice import (
    force_term,
    lambda_odd,
    scale_acceleration,
    scale_omega,
)


@dataclass(frozen=True)
class LevelParams:
    """Collision and forcing constants of one refinement level."""

    lambda_e: float
    lambda_o: float
    accel: tuple
    dt: float
    dx: float


def make_level_params(omega, accel, levels, lambda_eo=0.1875, kind="trt"):
    """Derive per-level parameters from the coarsest level's values.

    Acoustic scaling: dt and dx halve per level, omega follows
    scale_omega, the lattice acceleration halves, and the odd rate is
    re-derived from the magic parameter so the wall stays in place.
    """
    levels = sorted(levels)
    base = levels[0]
    out = {}
    for lvl in levels:
        om = scale_omega(omega, base, lvl)
        lo = lambda_odd(om, lambda_eo) if kind == "trt" else om
        acc = tuple(scale_acceleration(np.asarray(accel, float), base, lvl))
        out[lvl] = LevelParams(om, lo, acc, 2.0 ** -lvl, 2.0 ** -lvl)
    return out


def apply_level_params(stacks, params):
    for (rank, lvl), st in stacks.items():
        p = params[lvl]
        st.lambda_e = p.lambda_e
        st.lambda_o = p.lambda_o
        st.force = force_term(p.accel, st.rho_0)


def compile_program(coarsest, finest, fuse=True):
    """Flatten the two-phase recursion into (op, level) tuples."""
    ops = []

    def step(lvl):
        ops.append(("collide", lvl))
        if lvl != coarsest:
            ops.append(("init_explode", lvl))
        ops.append(("init_equal", lvl))
        if lvl != finest:
            step(lvl + 1)
            ops.append(("init_coalesce", lvl))
        if lvl != coarsest:
            ops.append(("finish_explode", lvl))
        ops.append(("finish_equal", lvl))
        if fuse and lvl == finest and lvl != coarsest:
            ops.append(("fused", lvl))
        else:
            ops.append(("stream", lvl))
            if lvl != finest:
                ops.append(("finish_coalesce", lvl))
            if lvl == coarsest:
                return
            ops.append(("collide", lvl))
        ops.append(("init_equal", lvl))
        if lvl != finest:
            step(lvl + 1)
            ops.append(("init_coalesce", lvl))
        ops.append(("finish_equal", lvl))
        ops.append(("stream", lvl))
        if lvl != finest:
            ops.append(("finish_coalesce", lvl))

    step(coarsest)
    return tuple(ops)


def stream_passes_per_level(program):
    out = {}
    for op, lvl in program:
        if op in ("stream", "fused"):
            out[lvl] = out.get(lvl, 0) + 1
    return out


class Stepper:
    """Executes the compiled program over per-rank level stacks."""

    def __init__(
        self,
        forest,
        stacks,
        schedule,
        mailbox=None,
        threads=1,
        interpolate=True,
        fuse=True,
    ):
        self.forest = forest
        self.stacks = stacks
        self.schedule = schedule
        self.mailbox = mailbox if mailbox is not None else Mailbox()
        levels = forest.levels_in_use()
        self.program = compile_program(levels[0], levels[-1], fuse=fuse)
        self.ranks = sorted({r for r, _ in stacks})
        self.interpolate = interpolate
        self.threads = max(1, int(threads))
        self._pool = None
        if self.threads > 1 and len(self.ranks) > 1:
            # one worker per rank: the program blocks inside finish ops,
            # so a smaller pool could deadlock
            self._pool = ThreadPoolExecutor(max_workers=len(self.ranks))
        self.coarse_steps_done = 0
        self.last_step_seconds = 0.0
        # cumulative wall seconds spent per level; in threaded runs the
        # figures include time blocked on the other ranks' buffers
        self.level_seconds: dict[int, float] = {}

    # ------------------------------------------------------------ ops

    def _exec(self, op, lvl, rank):
        st = self.stacks.get((rank, lvl))
        if op == "collide":
            if st is not None:
                run_collide(st)
        elif op == "stream":
            if st is not None:
                run_stream(st)
        elif op == "fused":
            if st is not None:
                run_fused(st)
        elif op == "init_equal":
            self.schedule.initiate(
                self.stacks, self.mailbox, PATTERN_EQUAL, lvl, rank
            )
        elif op == "finish_equal":
            self.schedule.finish(
                self.stacks, self.mailbox, PATTERN_EQUAL, lvl, rank
            )
        elif op == "init_explode":
            self.schedule.initiate(
                self.stacks, self.mailbox, PATTERN_EXPLODE, lvl, rank
            )
        elif op == "finish_explode":
            self.schedule.finish(
                self.stacks, self.mailbox, PATTERN_EXPLODE, lvl, rank
            )
            if self.interpolate:
                self.schedule.interpolate_explosion(self.stacks, lvl, rank)
        elif op == "init_coalesce":
            self.schedule.initiate(
                self.stacks, self.mailbox, PATTERN_COALESCE, lvl, rank
            )
        elif op == "finish_coalesce":
            self.schedule.finish(
                self.stacks, self.mailbox, PATTERN_COALESCE, lvl, rank
            )
        else:  # pragma: no cover - compile_program emits a closed set
            raise ValueError(f"unknown op {op}")

    def _run_rank(self, rank):
        acc: dict[int, float] = {}
        for op, lvl in self.program:
            t0 = time.perf_counter()
            self._exec(op, lvl, rank)
            acc[lvl] = acc.get(lvl, 0.0) + time.perf_counter() - t0
        return acc

    # ---------------------------------------------------------- steps

    def coarse_step(self):
        t0 = time.perf_counter()
        if self._pool is None:
            # op-major order: a finish in one rank consumes what the same
            # phase's init posted in the others
            for op, lvl in self.program:
                t1 = time.perf_counter()
                for rank in self.ranks:
                    self._exec(op, lvl, rank)
                self.level_seconds[lvl] = (
                    self.level_seconds.get(lvl, 0.0) + time.perf_counter() - t1
                )
        else:
            futs = [self._pool.submit(self._run_rank, r) for r in self.ranks]
            for f in futs:
                for lvl, sec in f.result().items():
                    self.level_seconds[lvl] = (
                        self.level_seconds.get(lvl, 0.0) + sec
                    )
        self.last_step_seconds = time.perf_counter() - t0
        self.coarse_steps_done += 1

    def run(self, n_coarse_steps, observers=()):
        """Advance n coarse steps, calling observers at their intervals.

        observers: iterable of (interval, callback); callback receives
        (stepper, coarse_step_index) at every multiple of interval.
        """
        for _ in range(int(n_coarse_steps)):
            self.coarse_step()
            for interval, fn in observers:
                if self.coarse_steps_done % int(interval) == 0:
                    try:
                        fn(self, self.coarse_steps_done)
                    except Exception as err:
                        raise RuntimeError(
                            f"observer {fn!r} failed at coarse step "
                            f"{self.coarse_steps_done}"
                        ) from err

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    # ------------------------------------------------------- metrics

    def cell_updates_per_coarse_step(self):
        per_block = int(np.prod(self.forest.cells_per_block))
        base = self.forest.levels_in_use()[0]
        total = 0
        for blk in self.forest.blocks.values():
            total += per_block * (1 << (blk.level - base))
        return total


def reference_coarse_step(forest, stacks, schedule, mailbox, interpolate=True):
    """Blocking unfused recursion with identical semantics.

    Serves as the oracle for the two-phase program: one sub-step is
    collide, explosion (first half only), ghost exchange, recursion,
    stream, coalescence, all completed in place before moving on.
    """
    levels = forest.levels_in_use()
    coarsest, finest = levels[0], levels[-1]
    ranks = sorted({r for r, _ in stacks})

    def xchg(pattern, lvl):
        for r in ranks:
            schedule.initiate(stacks, mailbox, pattern, lvl, r)
        for r in ranks:
            schedule.finish(stacks, mailbox, pattern, lvl, r)

    def stacks_at(lvl):
        return [st for (r, l), st in sorted(stacks.items()) if l == lvl]

    def substep(lvl, first):
        for st in stacks_at(lvl):
            run_collide(st)
        if first and lvl != coarsest:
            xchg(PATTERN_EXPLODE, lvl)
            if interpolate:
                for r in ranks:
                    schedule.interpolate_explosion(stacks, lvl, r)
        xchg(PATTERN_EQUAL, lvl)
        if lvl != finest:
            step(lvl + 1)
            for r in ranks:
                schedule.initiate(stacks, mailbox, PATTERN_COALESCE, lvl, r)
        for st in stacks_at(lvl):
            run_stream(st)
        if lvl != finest:
            for r in ranks:
                schedule.finish(stacks, mailbox, PATTERN_COALESCE, lvl, r)

    def step(lvl):
        substep(lvl, True)
        if lvl != coarsest:
            substep(lvl, False)

    step(coarsest)
