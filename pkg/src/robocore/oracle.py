"""Brute-force references for everything the simulator computes.

These functions favour obviousness over speed: plain Python traversal loops,
64-bit arithmetic, and flat scans over every occupied cell or point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geom import EPSILON, ExitStage, Obb, sat_full_batch, sat_margins, staged_exit_batch
from .scene import Occupancy, Octree

MARGIN_BAND = 4 * EPSILON


@dataclass
class RefTraversal:
    collides: bool
    nodes_traversed: int
    min_abs_margin: float = np.inf  # over every node test performed
    stages: list[int] = field(default_factory=list)


def push_order(query_center, child_centers) -> np.ndarray:
    """Far-to-near push order (so the nearest child is popped first); ties by child index."""
    d = np.asarray(child_centers, dtype=np.float64) - np.asarray(query_center, dtype=np.float64)
    d2 = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
    return np.array(sorted(range(len(d2)), key=lambda k: (-d2[k], k)), dtype=np.int64)


def _pair_margins(obb: Obb, centers, halves, eps=EPSILON) -> np.ndarray:
    return sat_margins(obb.center - centers, halves, obb.half_extents, obb.axes, eps=eps)


def traverse_octree(obb: Obb, octree: Octree, *, staged: bool | None = None, dtype=np.float64) -> RefTraversal:
    """Depth-first reference walk.

    Each visit fetches one node and tests its non-Empty children; a hit on a
    Full child ends the query, hit Partial children are pushed far-to-near.
    With ``staged`` set, node tests use the staged test at ``dtype`` precision
    and the exit stage of every test is recorded.
    """
    occ = octree.occupancy
    if occ[0] == Occupancy.EMPTY:
        return RefTraversal(False, 1)
    out = RefTraversal(False, 0)
    stack = [0]
    while stack:
        node = stack.pop()
        out.nodes_traversed += 1
        if occ[node] == Occupancy.FULL:
            kids = np.array([node])
        else:
            kids = np.array([c for c in octree.children(node) if occ[c] != Occupancy.EMPTY])
        centers, halves = octree.node_boxes(kids)
        m = _pair_margins(obb, centers, halves)
        out.min_abs_margin = min(out.min_abs_margin, float(np.min(np.abs(m.max(axis=1)))))
        if staged is None:
            hits = np.all(m <= 0.0, axis=1)
        else:
            codes = staged_exit_batch(obb.center, centers, halves, obb.half_extents, obb.axes, staged, dtype=dtype)
            out.stages.extend(int(c) for c in codes)
            hits = np.array([ExitStage(int(c)).collides for c in codes], dtype=bool)
        if np.any(hits & (occ[kids] == Occupancy.FULL)):
            out.collides = True
            return out
        partial = np.flatnonzero(hits & (occ[kids] == Occupancy.PARTIAL))
        for k in push_order(obb.center, centers[partial]):
            stack.append(int(kids[partial[k]]))
    return out


def collide_ref(obb: Obb, octree: Octree) -> tuple[bool, int]:
    """Tree traversal with the full 15-axis test at every visited node."""
    r = traverse_octree(obb, octree)
    return r.collides, r.nodes_traversed


def collide_flat(obb: Obb, leaf_centers, leaf_halves) -> bool:
    """OR of the full test over every occupied leaf cell, no tree involved."""
    centers = np.asarray(leaf_centers, dtype=np.float64).reshape(-1, 3)
    halves = np.asarray(leaf_halves, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        return False
    return bool(np.any(sat_full_batch(obb, centers, halves)))


def _nearby(obb: Obb, centers, halves, slack=1e-3):
    """Cells whose clamp distance to the OBB center is within the bounding radius (plus slack)."""
    d = np.maximum(np.abs(centers - obb.center) - halves, 0.0)
    r = float(np.linalg.norm(obb.half_extents)) + slack
    return np.einsum("ij,ij->i", d, d) <= r * r


def flat_min_abs_margin(obb: Obb, leaf_centers, leaf_halves) -> float:
    """Smallest |max axis margin| over occupied cells near the OBB (inf if none)."""
    centers = np.asarray(leaf_centers, dtype=np.float64).reshape(-1, 3)
    halves = np.asarray(leaf_halves, dtype=np.float64).reshape(-1, 3)
    near = _nearby(obb, centers, halves)
    if not near.any():
        return np.inf
    m = _pair_margins(obb, centers[near], halves[near]).max(axis=1)
    return float(np.min(np.abs(m)))


def in_margin_band(obb: Obb, octree: Octree, band: float = MARGIN_BAND) -> bool:
    """True when some decision for this query is too close to call across precisions."""
    scale = max(1.0, float(np.max(np.abs(octree.bounds.hi))), float(np.max(np.abs(octree.bounds.lo))))
    centers, halves = octree.occupied_boxes()
    if flat_min_abs_margin(obb, centers, halves) <= band * scale:
        return True
    return traverse_octree(obb, octree).min_abs_margin <= band * scale


def pair_in_band(obbs, centers, halves, band: float = MARGIN_BAND) -> np.ndarray:
    """Per pair, True when the deciding margin (max over the 15 axes) is within the band of zero."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    halves = np.asarray(halves, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(centers), dtype=bool)
    for i, o in enumerate(obbs):
        m = sat_margins(o.center - centers[i], halves[i], o.half_extents, o.axes).max()
        scale = max(1.0, float(np.max(np.abs(o.center))), float(np.max(np.abs(centers[i]) + halves[i])))
        out[i] = abs(m) <= band * scale
    return out


def radius_search_ref(points, center, r: float) -> np.ndarray:
    """Indices i with |points[i] - center| <= r, in 64-bit arithmetic (sorted)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.isinf(r):
        return np.arange(len(pts))
    d = pts - np.asarray(center, dtype=np.float64)
    d2 = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
    return np.flatnonzero(d2 <= r * r)


def radius_band(points, center, r: float, band: float = MARGIN_BAND) -> np.ndarray:
    """Indices whose distance to ``center`` is within ``band`` of ``r`` (precision-ambiguous)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(pts - np.asarray(center, dtype=np.float64), axis=1)
    return np.flatnonzero(np.abs(d - r) <= band * max(1.0, r))


def check_truncated(group, full, k_max: int) -> bool:
    """Truncation rule: the kept group is a subset of the full set with size min(K, |full|)."""
    group = np.asarray(group)
    return len(set(group.tolist())) == len(group) == min(k_max, len(full)) and set(group.tolist()) <= set(
        np.asarray(full).tolist()
    )


def count_exit_stages(obbs, octree: Octree, enable_spheres: bool = False, dtype=np.float32) -> np.ndarray:
    """Histogram over ExitStage codes of every node test of the reference walk.

    ``dtype`` defaults to the datapath precision, so the histogram can be
    compared exactly with the simulator's.
    """
    hist = np.zeros(len(ExitStage), dtype=np.int64)
    for obb in obbs:
        r = traverse_octree(obb, octree, staged=enable_spheres, dtype=dtype)
        if r.stages:
            hist += np.bincount(np.asarray(r.stages), minlength=len(ExitStage))
    return hist


def histogram_dict(hist) -> dict[str, int]:
    return {ExitStage(i).label: int(n) for i, n in enumerate(hist)}


@dataclass
class OracleReport:
    collides: list[bool]
    nodes_traversed: list[int]
    collisions: int
    total_nodes: int
    exit_histogram: dict[str, int] | None = None
    neighbor_sets: list[list[int]] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def collision_report(obbs, octree: Octree, enable_spheres: bool | None = None) -> OracleReport:
    res = [collide_ref(o, octree) for o in obbs]
    hist = None
    if enable_spheres is not None:
        hist = histogram_dict(count_exit_stages(obbs, octree, enable_spheres))
    return OracleReport(
        collides=[c for c, _ in res],
        nodes_traversed=[n for _, n in res],
        collisions=sum(c for c, _ in res),
        total_nodes=sum(n for _, n in res),
        exit_histogram=hist,
    )
