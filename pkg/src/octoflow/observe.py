"""Run observation: error norms, flow rate, MLUPS, CSV rows, field dumps.

All reductions over blocks run in ascending block-id order, so a report
is a pure function of the field state and never of the rank layout ("the
same numbers whichever way the forest is cut").  Norm weights follow the
cell volume: a level-l cell contributes (dx_l)^3.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .fields import FLAG_FLUID, GHOST, level_dx, macroscopic_interior

CSV_HEADER = "t,L1,L2,Linf,flow_rate,flow_rate_error,mlups"


@dataclass
class NormReport:
    """One observer row: error norms and rates at a coarse-step barrier."""

    t: int                      # finest-level step count
    L1: float
    L2: float
    Linf: float
    flow_rate: float
    flow_rate_error: float
    mlups: float
    level_seconds: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        return ",".join(
            [str(self.t)]
            + [repr(float(v)) for v in (
                self.L1, self.L2, self.Linf,
                self.flow_rate, self.flow_rate_error, self.mlups,
            )]
        )


# ------------------------------------------------------------- reductions


def _block_frames(scn):
    """Yield (bid, level, dx, origin, u_normalized, fluid_mask) per block.

    Velocities carry the half-force correction of their level and are
    scaled by the configured u_max.
    """
    n = scn.config.cells_per_block
    box = np.s_[GHOST:GHOST + n, GHOST:GHOST + n, GHOST:GHOST + n]
    for (rank, lvl), st in sorted(scn.stacks.items()):
        dx = level_dx(scn.forest, lvl)
        _, u = macroscopic_interior(st, accel=scn.params[lvl].accel)
        u /= scn.config.u_max
        for i, bid in enumerate(st.block_ids):
            blk = scn.forest.blocks[bid]
            origin = blk.aabb[:3]
            fluid = st.flags[i][box] == FLAG_FLUID
            yield bid, lvl, dx, origin, u[i], fluid


def _center_axis(origin, dx, n):
    return origin + (np.arange(n) + 0.5) * dx


def error_norms(scn) -> tuple:
    """Volume-weighted (L1, L2, Linf) of the velocity error, fluid cells only."""
    n = scn.config.cells_per_block
    partial = {}
    for bid, lvl, dx, origin, u, fluid in _block_frames(scn):
        yc = _center_axis(origin[1], dx, n)
        zc = _center_axis(origin[2], dx, n)
        exact = scn.exact_unit_velocity(
            None, yc[None, :, None], zc[:, None, None]
        )
        du = u.copy()
        du[..., 0] -= exact
        dmag = np.sqrt((du * du).sum(axis=-1))[fluid]
        if dmag.size == 0:
            continue
        w = dx**3
        partial[bid] = (w * dmag.sum(), w * (dmag * dmag).sum(), dmag.max())
    l1 = l2 = 0.0
    linf = 0.0
    for bid in sorted(partial):
        p1, p2, pm = partial[bid]
        l1 += p1
        l2 += p2
        linf = max(linf, pm)
    return l1, math.sqrt(l2), linf


def flow_rate(scn) -> tuple:
    """(Q, relative error) through the cross-section plane x = extent/2.

    Q is the area-weighted mean of u_x / u_max over the section's fluid
    cells times the reference area: the channel cross-section for plane
    flow, D^2 for the pipe.  Each (y, z) column is sampled once, in the
    cell layer of its own level that contains the plane.
    """
    n = scn.config.cells_per_block
    xplane = scn.extent[0] / 2.0
    partial = {}
    for bid, lvl, dx, origin, u, fluid in _block_frames(scn):
        ix = int(math.floor((xplane - origin[0]) / dx + 1e-12))
        if not 0 <= ix < n:
            continue
        ux = u[:, :, ix, 0]
        partial[bid] = dx * dx * ux[fluid[:, :, ix]].sum()
    total = 0.0
    for bid in sorted(partial):
        total += partial[bid]
    if not partial:
        raise ValueError("cross-section intersects no fluid cells")
    if scn.config.scenario == "pipe_poiseuille":
        area = scn.config.diameter ** 2
    else:
        area = scn.extent[1] * scn.extent[2]
    q = total / area
    ref = scn.flow_reference()
    return q, abs(q - ref) / ref


def weighted_updates_per_coarse_step(scn) -> int:
    """Fluid cell updates of one coarse step, level-L cells counting 2^L-fold.

    The exponent is taken relative to the coarsest level in use, which is
    the level that defines the coarse step.
    """
    n = scn.config.cells_per_block
    box = np.s_[:, GHOST:GHOST + n, GHOST:GHOST + n, GHOST:GHOST + n]
    base = scn.forest.levels_in_use()[0]
    total = 0
    for (rank, lvl), st in scn.stacks.items():
        total += int((st.flags[box] == FLAG_FLUID).sum()) * (1 << (lvl - base))
    return total


def mlups(cell_updates: float, seconds: float) -> float:
    if seconds <= 0.0:
        raise ValueError("elapsed time must be positive")
    return cell_updates / seconds / 1e6


# ------------------------------------------------------------------ csv


class CsvWriter:
    """Streams observer rows in the fixed schema, LF endings."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.fh.write(CSV_HEADER + "\n")

    def write(self, report: NormReport):
        self.fh.write(report.csv_row() + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


# ------------------------------------------------------------- run loop


def evaluate(scn, stepper, seconds: float, coarse_steps: int) -> NormReport:
    """Build one NormReport from the current synchronized state."""
    levels = scn.forest.levels_in_use()
    fine_per_coarse = 1 << (levels[-1] - levels[0])
    try:
        l1, l2, linf = error_norms(scn)
        q, qerr = flow_rate(scn)
    except ValueError:
        l1 = l2 = linf = q = qerr = float("nan")
    upd = weighted_updates_per_coarse_step(scn) * coarse_steps
    rate = mlups(upd, seconds) if seconds > 0.0 else float("nan")
    return NormReport(
        t=stepper.coarse_steps_done * fine_per_coarse,
        L1=l1, L2=l2, Linf=linf,
        flow_rate=q, flow_rate_error=qerr, mlups=rate,
        level_seconds=dict(stepper.level_seconds),
    )


def run_to_steady(scn, stepper, csv_path=None, vtk_dir=None, progress=None):
    """Advance the scenario until steady, a step target, or the step cap.

    Steady means the relative change of the L2 error norm between two
    successive evaluation intervals drops below the configured tolerance;
    with ``config.steps`` set, exactly that many coarse steps run instead.
    Returns (reports, steady_flag).
    """
    cfg = scn.config
    levels = scn.forest.levels_in_use()
    fine_per_coarse = 1 << (levels[-1] - levels[0])
    tol = cfg.steady_tol or cfg.default_steady_tol()
    check_steady = cfg.steps == 0
    if cfg.steps > 0:
        target = cfg.steps
    else:
        cap = cfg.max_fine_steps or cfg.default_max_fine_steps()
        target = max(1, cap // fine_per_coarse)

    writer = CsvWriter(csv_path) if csv_path else None
    reports = []
    steady = False
    prev_l2 = None
    try:
        while stepper.coarse_steps_done < target:
            chunk = min(cfg.eval_interval, target - stepper.coarse_steps_done)
            t0 = time.perf_counter()
            stepper.run(chunk)
            rep = evaluate(scn, stepper, time.perf_counter() - t0, chunk)
            reports.append(rep)
            if writer:
                writer.write(rep)
            if vtk_dir:
                write_vtk(scn, vtk_dir, rep.t)
            if progress:
                progress(rep)
            if check_steady and prev_l2 is not None and rep.L2 == rep.L2:
                scale = max(abs(rep.L2), 1e-300)
                if abs(rep.L2 - prev_l2) / scale < tol:
                    steady = True
                    break
            prev_l2 = rep.L2
    finally:
        if writer:
            writer.close()
    return reports, steady


# ------------------------------------------------------------------ vtk


def write_vtk(scn, outdir, t: int):
    """Dump density and velocity of every block as structured-points files.

    One legacy-format file per block per call plus an ``index.csv``
    listing them; readable by any VTK tool, meant for spot checks.
    """
    os.makedirs(outdir, exist_ok=True)
    n = scn.config.cells_per_block
    index_path = os.path.join(outdir, "index.csv")
    new = not os.path.exists(index_path)
    with open(index_path, "a", encoding="utf-8", newline="") as idx:
        if new:
            idx.write("file,block,level,rank,t\n")
        for (rank, lvl), st in sorted(scn.stacks.items()):
            dx = level_dx(scn.forest, lvl)
            rho, u = macroscopic_interior(st, accel=scn.params[lvl].accel)
            for i, bid in enumerate(st.block_ids):
                blk = scn.forest.blocks[bid]
                name = f"block_{bid:016x}_t{t}.vtk"
                path = os.path.join(outdir, name)
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    fh.write("# vtk DataFile Version 3.0\n")
                    fh.write(f"block {bid} level {lvl} t {t}\n")
                    fh.write("ASCII\nDATASET STRUCTURED_POINTS\n")
                    fh.write(f"DIMENSIONS {n} {n} {n}\n")
                    ox = blk.aabb[0] + dx / 2
                    oy = blk.aabb[1] + dx / 2
                    oz = blk.aabb[2] + dx / 2
                    fh.write(f"ORIGIN {ox} {oy} {oz}\n")
                    fh.write(f"SPACING {dx} {dx} {dx}\n")
                    fh.write(f"POINT_DATA {n**3}\n")
                    fh.write("SCALARS density double 1\nLOOKUP_TABLE default\n")
                    fh.write("\n".join(repr(float(v)) for v in rho[i].ravel()))
                    fh.write("\nVECTORS velocity double\n")
                    fh.write("\n".join(
                        " ".join(repr(float(c)) for c in row)
                        for row in u[i].reshape(-1, 3)
                    ))
                    fh.write("\n")
                idx.write(f"{name},{bid},{lvl},{rank},{t}\n")
