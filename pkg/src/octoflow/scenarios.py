"""Scenario construction for the validation and benchmark harness.

Three canonical setups are supported next to free-form "custom" runs:
plane Poiseuille flow between two no-slip plates, pipe Poiseuille flow
through a staircase circular pipe (both force-driven, periodic along the
flow axis), and a lid-driven cavity used for throughput measurements.
A :class:`ScenarioConfig` fixes geometry, refinement, collision
parameters, and run control; :func:`setup_scenario` turns it into the
forest / field stacks / comm schedule / level parameters quadruple that
the stepper and the observers consume.

Lengths are expressed in coarse-level lattice units throughout: one
level-0 cell has dx = 1, so a 6x6x6 root grid of 10^3-cell blocks spans
a 60x60x60 domain.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .balance import balance_level_wise
from .comm import build_comm_schedule
from .fields import (
    FLAG_FLUID,
    FLAG_NOSLIP,
    FLAG_VELOCITY,
    allocate_stacks,
    classify_stacks,
)
from .forest import BlockForest, build_setup_forest
from .lattice import omega_from_viscosity, scale_acceleration, scale_omega
from .stepper import Stepper, apply_level_params, make_level_params

SCENARIOS = ("plane_poiseuille", "pipe_poiseuille", "lid_cavity", "custom")

# selector name -> (allowed scenarios, default target level)
SELECTORS = {
    "none": (SCENARIOS, 0),
    "bottom": (("plane_poiseuille",), 1),
    "top": (("plane_poiseuille",), 1),
    "middle": (("plane_poiseuille",), 1),
    "both": (("plane_poiseuille",), 1),
    "global": (("pipe_poiseuille",), 1),
    "wall": (("pipe_poiseuille",), 1),
    "center": (("pipe_poiseuille",), 1),
    "lid_edges": (("lid_cavity",), 3),
}

_EPS = 1e-9


@dataclass
class ScenarioConfig:
    """Everything needed to build and run one scenario."""

    scenario: str = "plane_poiseuille"
    root_dims: tuple = (6, 6, 6)
    cells_per_block: int = 10
    refinement: str = "none"          # selector[:level]
    collision: str = "trt"            # trt | srt
    lambda_eo: float = 3.0 / 16.0
    reynolds: float = 10.0
    u_max: float = 0.02
    rank_count: int = 1
    curve: str = "morton"
    steps: int = 0                    # coarse steps; 0 = run until steady
    eval_interval: int = 200          # coarse steps between observer rows
    steady_tol: float = 0.0           # 0 = scenario default
    max_fine_steps: int = 0           # 0 = scenario default
    seed: int = 0
    threads: int = 0                  # 0 = env / single

    def __post_init__(self):
        self.root_dims = tuple(int(v) for v in self.root_dims)
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.collision not in ("trt", "srt"):
            raise ValueError(f"unknown collision kind {self.collision!r}")
        if len(self.root_dims) != 3 or min(self.root_dims) < 1:
            raise ValueError("root_dims must be three positive integers")
        if self.cells_per_block < 4 or self.cells_per_block % 2:
            raise ValueError("cells_per_block must be even and at least 4")
        if not 0.0 < self.u_max < 0.4:
            raise ValueError("u_max must stay well below lattice speed 1")
        if self.reynolds <= 0.0:
            raise ValueError("reynolds must be positive")
        if self.rank_count < 1:
            raise ValueError("rank_count must be at least 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be at least 1")
        self.selector, self.refine_level = parse_refinement(
            self.refinement, self.scenario
        )

    # ------------------------------------------------- derived values

    @property
    def diameter(self) -> float:
        """Channel height / pipe diameter / cavity edge in level-0 cells."""
        return float(self.root_dims[1] * self.cells_per_block)

    @property
    def viscosity(self) -> float:
        """Level-0 lattice viscosity implied by Re = u_max * D / nu."""
        return self.u_max * self.diameter / self.reynolds

    @property
    def omega0(self) -> float:
        return omega_from_viscosity(self.viscosity)

    def default_steady_tol(self) -> float:
        return 1e-12 if self.scenario == "plane_poiseuille" else 1e-8

    def default_max_fine_steps(self) -> int:
        return 120000 if self.scenario == "plane_poiseuille" else 40000


def parse_refinement(spec: str, scenario: str):
    """Split a ``selector[:level]`` refinement spec and validate it."""
    text = spec.strip().lower()
    name, _, lvl = text.partition(":")
    name = name.strip() or "none"
    if name not in SELECTORS:
        raise ValueError(f"unknown refinement selector {name!r}")
    allowed, default_level = SELECTORS[name]
    if scenario not in allowed and name != "none":
        raise ValueError(
            f"refinement {name!r} does not apply to scenario {scenario!r}"
        )
    level = int(lvl) if lvl.strip() else default_level
    if not 0 <= level <= 7:
        raise ValueError("refinement level out of range")
    if name == "none":
        level = 0
    return name, level


# --------------------------------------------------------------- config io


_SCHEMA = {
    "scenario": {"kind": str, "collision": str, "lambda_eo": float,
                 "reynolds": float, "u_max": float},
    "grid": {"root_dims": "ints", "cells_per_block": int,
             "refinement": str},
    "run": {"steps": int, "eval_interval": int, "steady_tol": float,
            "max_fine_steps": int, "threads": int},
    "partition": {"ranks": int, "curve": str, "seed": int},
}

_FIELD_OF = {
    ("scenario", "kind"): "scenario",
    ("partition", "ranks"): "rank_count",
}


def load_config(path) -> ScenarioConfig:
    """Read a flat INI scenario file (UTF-8, ``#`` comments)."""
    cp = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None,
    )
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh, source=str(path))
    kwargs = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            conv = _SCHEMA[section][key]
            if conv == "ints":
                value = tuple(int(v) for v in raw.replace(",", " ").split())
            else:
                value = conv(raw)
            kwargs[_FIELD_OF.get((section, key), key)] = value
    return ScenarioConfig(**kwargs)


# ------------------------------------------------------ analytic profiles


def analytic_velocity(scenario: str, point) -> np.ndarray:
    """Normalized steady profile at one point of the unit geometry.

    Plane flow takes y in [0, 1] between the plates, pipe flow the radial
    distance r from the axis with diameter 1.  The returned x-component
    peaks at exactly 1.
    """
    p = np.asarray(point, dtype=float).reshape(-1)
    if scenario == "plane_poiseuille":
        y = p[1] if p.size == 3 else p[0]
        if not 0.0 <= y <= 1.0:
            raise ValueError("point outside the fluid gap")
        return np.array([4.0 * y * (1.0 - y), 0.0, 0.0])
    if scenario == "pipe_poiseuille":
        r = math.hypot(p[1], p[2]) if p.size == 3 else p[0]
        if not 0.0 <= r <= 0.5 + _EPS:
            raise ValueError("point outside the fluid radius")
        return np.array([1.0 - (2.0 * r) ** 2, 0.0, 0.0])
    raise ValueError(f"no analytic profile for scenario {scenario!r}")


# ------------------------------------------------------------- scenario


@dataclass
class Scenario:
    """Setup product: forest, per-(rank, level) stacks, comm, parameters."""

    config: ScenarioConfig
    forest: BlockForest
    stacks: dict
    schedule: object
    params: dict
    accel0: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.forest, self.stacks, self.schedule, self.params))

    @property
    def u_max(self) -> float:
        return self.config.u_max

    def exact_unit_velocity(self, x, y, z):
        """Normalized analytic x-velocity at lattice-coordinate arrays."""
        kind = self.config.scenario
        if kind == "plane_poiseuille":
            yy = np.asarray(y) / self.extent[1]
            return 4.0 * yy * (1.0 - yy)
        if kind == "pipe_poiseuille":
            cy, cz = self.meta["center"]
            rsq = (np.asarray(y) - cy) ** 2 + (np.asarray(z) - cz) ** 2
            return 1.0 - rsq / self.meta["radius"] ** 2
        raise ValueError(f"no analytic profile for scenario {kind!r}")

    def flow_reference(self) -> float:
        kind = self.config.scenario
        if kind == "plane_poiseuille":
            return 2.0 / 3.0
        if kind == "pipe_poiseuille":
            return math.pi / 8.0
        raise ValueError(f"no flow-rate reference for scenario {kind!r}")

    def make_stepper(self, threads=None, fuse=True, interpolate=True):
        if threads is None:
            threads = resolve_threads(self.config.threads)
        return Stepper(
            self.forest, self.stacks, self.schedule,
            threads=threads, fuse=fuse, interpolate=interpolate,
        )


def resolve_threads(requested: int = 0) -> int:
    """Worker count: explicit request, else OCTOFLOW_THREADS, else 1."""
    cap = int(os.environ.get("OCTOFLOW_THREADS", "0") or "0")
    n = int(requested) or cap or 1
    if cap:
        n = min(n, cap)
    return max(1, n)


def _refine_predicate(cfg: ScenarioConfig, extent):
    lx, ly, lz = extent
    sel, k = cfg.selector, cfg.refine_level
    if sel == "none" or k == 0:
        return None, 0

    if cfg.scenario == "plane_poiseuille":
        third = ly / 3.0
        def pred(blk):
            x0, y0, z0, x1, y1, z1 = blk.aabb
            if sel == "bottom":
                return y0 <= _EPS
            if sel == "top":
                return y1 >= ly - _EPS
            if sel == "both":
                return y0 <= _EPS or y1 >= ly - _EPS
            # middle: the central third of the gap, away from both walls
            return y0 >= third - _EPS and y1 <= 2.0 * third + _EPS
        return pred, k

    if cfg.scenario == "pipe_poiseuille":
        cy, cz, radius = ly / 2.0, lz / 2.0, cfg.diameter / 2.0
        def pred(blk):
            if sel == "global":
                return True
            x0, y0, z0, x1, y1, z1 = blk.aabb
            ny = min(max(cy, y0), y1) - cy
            nz = min(max(cz, z0), z1) - cz
            dmin = math.hypot(ny, nz)
            if sel == "center":
                return dmin <= _EPS
            dmax = max(
                math.hypot(yc - cy, zc - cz)
                for yc in (y0, y1) for zc in (z0, z1)
            )
            # wall blocks: the circle passes through the (y, z) footprint
            return dmin <= radius + _EPS and dmax >= radius - _EPS
        return pred, k

    if cfg.scenario == "lid_cavity":
        def pred(blk):
            x0, y0, z0, x1, y1, z1 = blk.aabb
            if z1 < lz - _EPS:
                return False
            return (x0 <= _EPS or x1 >= lx - _EPS
                    or y0 <= _EPS or y1 >= ly - _EPS)
        return pred, k

    return None, 0


def _geometry(cfg: ScenarioConfig, extent):
    lx, ly, lz = extent

    if cfg.scenario == "plane_poiseuille":
        def geom(x, y, z):
            flags = np.full(np.broadcast(x, y, z).shape, FLAG_FLUID, np.uint8)
            flags[(y < 0.0) | (y > ly)] = FLAG_NOSLIP
            return flags
        return geom

    if cfg.scenario == "pipe_poiseuille":
        cy, cz, radius = ly / 2.0, lz / 2.0, cfg.diameter / 2.0
        def geom(x, y, z):
            rsq = (y - cy) ** 2 + (z - cz) ** 2
            flags = np.full(np.broadcast(x, y, z).shape, FLAG_FLUID, np.uint8)
            flags[rsq >= radius**2] = FLAG_NOSLIP
            return flags
        return geom

    if cfg.scenario == "lid_cavity":
        def geom(x, y, z):
            flags = np.full(np.broadcast(x, y, z).shape, FLAG_FLUID, np.uint8)
            flags[np.broadcast_to(z > lz, flags.shape)] = FLAG_VELOCITY
            side = (x < 0.0) | (x > lx) | (y < 0.0) | (y > ly) | (z < 0.0)
            flags[side] = FLAG_NOSLIP
            return flags
        return geom

    def geom(x, y, z):  # custom: periodic box, no walls
        return np.full(np.broadcast(x, y, z).shape, FLAG_FLUID, np.uint8)
    return geom


def _acceleration(cfg: ScenarioConfig) -> tuple:
    """Level-0 body force driving the analytic profile at u_max."""
    d, nu = cfg.diameter, cfg.viscosity
    if cfg.scenario == "plane_poiseuille":
        return (8.0 * nu * cfg.u_max / d**2, 0.0, 0.0)
    if cfg.scenario == "pipe_poiseuille":
        return (16.0 * nu * cfg.u_max / d**2, 0.0, 0.0)
    return (0.0, 0.0, 0.0)


def scenario_extent(cfg: ScenarioConfig) -> tuple:
    n = cfg.cells_per_block
    return tuple(float(r * n) for r in cfg.root_dims)


def build_scenario_forest(cfg: ScenarioConfig) -> BlockForest:
    """Phase one of the two-stage setup: the balanced block forest."""
    n = cfg.cells_per_block
    extent = scenario_extent(cfg)
    if cfg.scenario == "pipe_poiseuille" and extent[1] != extent[2]:
        raise ValueError("pipe cross-section must be square")

    periodicity = {
        "plane_poiseuille": (True, False, True),
        "pipe_poiseuille": (True, False, False),
        "lid_cavity": (False, False, False),
        "custom": (True, True, True),
    }[cfg.scenario]

    pred, max_level = _refine_predicate(cfg, extent)
    cells = n**3
    forest = build_setup_forest(
        domain=(0.0, 0.0, 0.0) + extent,
        root_dims=cfg.root_dims,
        cells_per_block=(n, n, n),
        periodicity=periodicity,
        refine=(lambda b: b.level < max_level and pred(b)) if pred else None,
        max_level=max_level,
        workload=lambda b: float(cells * (1 << b.level)),
        memory=lambda b: 1.0,
    )
    if pred is not None and all(
        b.level == 0 for b in forest.blocks.values()
    ):
        raise ValueError(f"refinement region {cfg.selector!r} marked no block")
    balance_level_wise(forest, cfg.rank_count, cfg.curve)
    return forest


def setup_scenario(cfg: ScenarioConfig, forest: BlockForest = None) -> Scenario:
    """Build the forest, balance it, classify cells, derive parameters.

    PDFs start at equilibrium with rho = 1, u = 0.  Raises on parameter
    combinations whose relaxation rates leave (0, 2) at any level.  A
    forest loaded from a partition file can be passed in to skip phase
    one; it must describe the same grid the config does.
    """
    n = cfg.cells_per_block
    extent = scenario_extent(cfg)
    if forest is None:
        forest = build_scenario_forest(cfg)
    else:
        if forest.root_dims != cfg.root_dims or forest.cells_per_block != (
            n, n, n,
        ):
            raise ValueError("forest file does not match the configured grid")
        if forest.domain != (0.0, 0.0, 0.0) + extent:
            raise ValueError("forest file does not match the configured domain")

    stacks = allocate_stacks(forest)
    classify_stacks(stacks, forest, _geometry(cfg, extent))

    levels = forest.levels_in_use()
    base = levels[0]
    for lvl in levels:
        om = scale_omega(cfg.omega0, 0, lvl)
        if not 0.0 < om < 2.0:
            raise ValueError(
                f"omega {om:.4f} at level {lvl} outside (0, 2); "
                "adjust u_max, reynolds, or resolution"
            )
    accel0 = _acceleration(cfg)
    params = make_level_params(
        scale_omega(cfg.omega0, 0, base),
        scale_acceleration(np.asarray(accel0), 0, base),
        levels,
        lambda_eo=cfg.lambda_eo,
        kind=cfg.collision,
    )
    apply_level_params(stacks, params)
    if cfg.scenario == "lid_cavity":
        for st in stacks.values():
            st.set_u_wall((cfg.u_max, 0.0, 0.0))

    schedule = build_comm_schedule(forest)
    meta = {}
    if cfg.scenario == "pipe_poiseuille":
        meta["center"] = (extent[1] / 2.0, extent[2] / 2.0)
        meta["radius"] = cfg.diameter / 2.0
    return Scenario(
        config=cfg, forest=forest, stacks=stacks, schedule=schedule,
        params=params, accel0=accel0, extent=extent, meta=meta,
    )
