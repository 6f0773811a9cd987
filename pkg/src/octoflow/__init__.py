"""Block-structured lattice Boltzmann solver on non-uniform grids.

D3Q19 collision and streaming on a forest of octrees, with level-wise
space-filling-curve load balancing and a deterministic virtual-rank
message-passing runtime.
"""

from octoflow.lattice import (
    E,
    W,
    INVERSE,
    equilibrium,
    macroscopic,
    collide_srt,
    collide_trt,
    force_term,
    omega_from_viscosity,
    viscosity_from_omega,
    scale_omega,
    lambda_odd,
    magic_parameter,
    scale_acceleration,
)
from octoflow.forest import BlockForest, BlockId, build_setup_forest
from octoflow.balance import balance_level_wise, morton_key, hilbert_key
from octoflow.fields import allocate_stacks, classify_stacks
from octoflow.comm import Mailbox, build_comm_schedule

__all__ = [
    "E",
    "W",
    "INVERSE",
    "equilibrium",
    "macroscopic",
    "collide_srt",
    "collide_trt",
    "force_term",
    "omega_from_viscosity",
    "viscosity_from_omega",
    "scale_omega",
    "lambda_odd",
    "magic_parameter",
    "scale_acceleration",
    "BlockForest",
    "BlockId",
    "build_setup_forest",
    "balance_level_wise",
    "morton_key",
    "hilbert_key",
    "allocate_stacks",
    "classify_stacks",
    "Mailbox",
    "build_comm_schedule",
]
