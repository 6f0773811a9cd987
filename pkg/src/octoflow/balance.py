"""Level-wise static load balancing along space-filling curves.

Each refinement level is balanced independently: that level's blocks are
ordered along a Morton or Hilbert curve over their integer coordinates,
then the ordered sequence is cut into rank_count contiguous chunks of
near-equal weight.  The cut first finds the optimal contiguous min-max
capacity (binary search over a greedy feasibility check), then places
each chunk boundary at the prefix edge nearest its ideal position
r*W/R, subject to every chunk staying within capacity.  Chunks remain
contiguous along the curve and the heaviest and lightest rank differ by
at most one block weight.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from octoflow.forest import BlockForest


def morton_key(coords, bits: int) -> int:
    """Interleave coordinate bits, z most significant within each triple.

    Matches the octant convention z*4 + y*2 + x, so sorting level-1
    children of one root by Morton key follows their octant index.
    """
    x, y, z = coords
    key = 0
    for b in range(bits - 1, -1, -1):
        key = (key << 3) | (((z >> b) & 1) << 2) | (((y >> b) & 1) << 1) | ((x >> b) & 1)
    return key


def hilbert_key(coords, bits: int) -> int:
    """Hilbert index via Skilling's axes-to-transpose transform."""
    n = 3
    x = list(coords)
    m = 1 << (bits - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(n):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    for i in range(1, n):
        x[i] ^= x[i - 1]
    t = 0
    q = m
    while q > 1:
        if x[n - 1] & q:
            t ^= q - 1
        q >>= 1
    for i in range(n):
        x[i] ^= t
    # transpose format -> single integer, x[0] carrying the top bit
    key = 0
    for b in range(bits - 1, -1, -1):
        for i in range(n):
            key = (key << 1) | ((x[i] >> b) & 1)
    return key


_CURVES = {"morton": morton_key, "hilbert": hilbert_key}


def sfc_order(entries, curve: str = "morton") -> list[int]:
    """Permutation sorting same-level (id, coords) entries along the curve."""
    key_fn = _CURVES[curve]
    if not entries:
        return []
    span = max(max(c) for _, c in entries) + 1
    bits = max(1, (span - 1).bit_length() if span > 1 else 1)
    keyed = [
        (key_fn(coords, bits), int(bid), i)
        for i, (bid, coords) in enumerate(entries)
    ]
    keyed.sort()
    return [i for _, _, i in keyed]


def _greedy_chunks(prefix, capacity):
    """Number of contiguous chunks a greedy fill needs at this capacity."""
    n = len(prefix) - 1
    chunks = 0
    i = 0
    while i < n:
        end = np.searchsorted(prefix, prefix[i] + capacity, side="right") - 1
        if end <= i:
            return None  # single block exceeds capacity
        i = int(end)
        chunks += 1
    return chunks


def _window_reach(prefix, reach, lo_load, hi_load):
    """One chunk step of the window DP.

    out[j] is true when some reachable cut i allows a chunk i..j with
    load in [lo_load, hi_load].
    """
    cum = np.concatenate(([0], np.cumsum(reach.astype(np.int64))))
    lo_idx = np.searchsorted(prefix, prefix - hi_load, side="left")
    hi_idx = np.searchsorted(prefix, prefix - lo_load, side="right")
    hi_idx = np.maximum(hi_idx, lo_idx)
    return (cum[hi_idx] - cum[lo_idx]) > 0


def _window_feasible(prefix, rank_count, lo_load, hi_load):
    reach = np.zeros(len(prefix), dtype=bool)
    reach[0] = True
    for _ in range(rank_count):
        reach = _window_reach(prefix, reach, lo_load, hi_load)
    return bool(reach[-1])


def contiguous_cut(weights, rank_count: int) -> list[int]:
    """Contiguous chunk index per weight along the given order.

    Three exact passes: binary-search the optimal max chunk load, then
    binary-search the best achievable min chunk load under that cap,
    then place each boundary at the prefix edge nearest its ideal
    position r*W/R among cuts that keep both bounds satisfiable.
    Deterministic; chunks may legitimately be empty on sparse levels.
    """
    n = len(weights)
    if n == 0:
        return []
    if rank_count == 1:
        return [0] * n
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("negative block weight")
    total = float(w.sum())
    if total <= 0.0:
        return [min(i * rank_count // n, rank_count - 1) for i in range(n)]
    prefix = np.concatenate(([0.0], np.cumsum(w)))
    prefix[-1] = total
    eps = 1e-9 * max(total, 1.0)

    # pass 1: smallest feasible max chunk load
    lo, hi = float(w.max()), total
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        chunks = _greedy_chunks(prefix, mid)
        if chunks is not None and chunks <= rank_count:
            hi = mid
        else:
            lo = mid
    cap = 0.0
    i = 0
    while i < n:
        end = int(np.searchsorted(prefix, prefix[i] + hi, side="right") - 1)
        end = max(end, i + 1)
        cap = max(cap, float(prefix[end] - prefix[i]))
        i = end
    cap = max(cap, float(w.max()))

    # pass 2: largest min chunk load achievable with that cap
    lo_a, hi_a = 0.0, total / rank_count
    if _window_feasible(prefix, rank_count, hi_a - eps, cap + eps):
        lo_a = hi_a
    else:
        for _ in range(60):
            mid = 0.5 * (lo_a + hi_a)
            if _window_feasible(prefix, rank_count, mid, cap + eps):
                lo_a = mid
            else:
                hi_a = mid
    floor_load = max(0.0, lo_a - eps)
    ceil_load = cap + eps

    # pass 3: backward-reachable sets, then forward nearest-ideal cuts
    back = [None] * (rank_count + 1)
    reach = np.zeros(len(prefix), dtype=bool)
    reach[-1] = True
    back[rank_count] = reach
    neg = -prefix[::-1]
    for r in range(rank_count - 1, -1, -1):
        prev = back[r + 1][::-1]
        stepped = _window_reach(neg, prev, floor_load, ceil_load)
        back[r] = stepped[::-1]
    bounds = [0]
    prev_cut = 0
    for r in range(1, rank_count):
        ideal = total * r / rank_count
        j_lo = int(
            np.searchsorted(prefix, prefix[prev_cut] + floor_load, "left")
        )
        j_hi = int(
            np.searchsorted(prefix, prefix[prev_cut] + ceil_load, "right")
        )
        j_lo = max(j_lo, prev_cut)
        candidates = np.nonzero(back[r][j_lo:j_hi])[0] + j_lo
        if candidates.size == 0:
            raise RuntimeError("contiguous cut lost feasibility")
        pick = candidates[np.argmin(np.abs(prefix[candidates] - ideal))]
        prev_cut = int(pick)
        bounds.append(prev_cut)
    bounds.append(n)
    out = np.empty(n, dtype=np.int64)
    for r in range(rank_count):
        out[bounds[r] : bounds[r + 1]] = r
    return out.tolist()


def balance_level_wise(
    forest: BlockForest, rank_count: int, curve: str = "morton"
) -> dict[int, int]:
    """Assign every block a rank, one level at a time, and apply it.

    Returns the id -> rank map.  Neighbor records are refreshed so stored
    ranks stay consistent.
    """
    if rank_count < 1:
        raise ValueError("rank_count must be at least 1")
    assignment: dict[int, int] = {}
    by_level: dict[int, list[int]] = {}
    for bid, blk in forest.blocks.items():
        by_level.setdefault(blk.level, []).append(bid)
    for level in sorted(by_level):
        ids = sorted(by_level[level])
        entries = [(bid, forest.blocks[bid].coords) for bid in ids]
        perm = sfc_order(entries, curve)
        ordered = [ids[i] for i in perm]
        weights = [forest.blocks[bid].workload for bid in ordered]
        chunks = contiguous_cut(weights, rank_count)
        for bid, rank in zip(ordered, chunks):
            assignment[bid] = rank
    apply_assignment(forest, assignment, rank_count)
    return assignment


def apply_assignment(
    forest: BlockForest, assignment: dict[int, int], rank_count: int
) -> None:
    forest.rank_count = rank_count
    for bid, blk in forest.blocks.items():
        blk.rank = assignment[bid]
    for blk in forest.blocks.values():
        blk.neighbors = tuple(
            replace(rec, rank=assignment[rec.id]) for rec in blk.neighbors
        )


def rank_loads(forest: BlockForest, level: int | None = None) -> list[float]:
    loads = [0.0] * forest.rank_count
    for blk in forest.blocks.values():
        if level is None or blk.level == level:
            loads[blk.rank] += blk.workload
    return loads
