"""Cycle-approximate RoboCore simulator.

A run has two phases.  The functional phase walks every query's traversal
in lock-step rounds and executes the variant's intersection program for each
node test with :func:`robocore.isa.execute` on a 32-bit datapath; the result
is a trace of traversal steps (node fetches) and node tests with their μop
paths.  The timing phase then replays the trace warp by warp on an
event-driven model of the cores: greedy-then-oldest warp selection, per-core
L1 and a shared L2 (LRU, set-associative), a crossbar interconnect, and the
intersection-unit sets.

Traversals never depend on timing, so the split keeps booleans independent of
every timing knob.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import isa
from .geom import ExitStage, Obb
from .isa import NodeType, UnitStyle, UopKind
from .scene import Occupancy, OccupancyGrid, Octree, SphereBvh

SLOTS = isa.PORTS
SLOT_INDEX = {name: i for i, name in enumerate(SLOTS)}

DEFAULT_LATENCIES: dict[str, int] = {
    "SUB3": 1,
    "MUL": 1,
    "DOT": 1,
    "CMP3": 1,
    "CROSS": 1,
    "MINMAX": 1,
    "RXFORM": 3,
    "PUSH": 1,
    "RETURN": 1,
    "BOXN": 4,
    "EXE": 2,
    "CTRL": 1,
}

DEFAULT_ENERGY_WEIGHTS: dict[str, float] = {
    "alu": 1.0,
    "cross": 2.0,
    "dot": 2.0,
    "rxform": 6.0,
    "boxn": 8.0,
    "exe": 4.0,
    "packet": 2.0,
    "l1": 4.0,
    "l2": 40.0,
    "mem": 200.0,
    "controller": 1.0,
}

_KIND_WEIGHT = {
    UopKind.SUB3: "alu",
    UopKind.MUL: "alu",
    UopKind.CMP3: "alu",
    UopKind.MINMAX: "alu",
    UopKind.RETURN: "alu",
    UopKind.PUSH: "alu",
    UopKind.DOT: "dot",
    UopKind.CROSS: "cross",
    UopKind.RXFORM: "rxform",
    UopKind.BOXN: "boxn",
    UopKind.EXE: "exe",
}
KINDS = tuple(UopKind)
NODE_TYPE_CODES = {nt: i for i, nt in enumerate(NodeType)}
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class CacheConfig:
    size_bytes: int
    assoc: int  # 0 means fully associative
    latency: int
    line_bytes: int = 128

    def __post_init__(self):
        if self.size_bytes < self.line_bytes or self.line_bytes < 1:
            raise ValueError("cache must hold at least one line")
        if self.latency < 1:
            raise ValueError("cache latency must be >= 1 cycle")
        lines = self.size_bytes // self.line_bytes
        if self.assoc < 0 or (self.assoc and lines % self.assoc):
            raise ValueError("associativity must divide the number of lines")


@dataclass(frozen=True)
class SimConfig:
    num_cores: int = 8
    warps_per_buffer: int = 4
    warp_size: int = 32
    intersection_unit_sets: int = 4
    latencies: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LATENCIES))
    interconnect_hop_cycles: int = 2
    interconnect_ports: int = 16
    l1: CacheConfig = CacheConfig(64 * 1024, 0, 20)
    l2: CacheConfig = CacheConfig(3 * 1024 * 1024, 16, 160)
    mem_latency: int = 300  # in memory-clock cycles
    core_clock_mhz: float = 1365.0
    mem_clock_mhz: float = 3500.0
    energy_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_ENERGY_WEIGHTS))
    collision_unit_latency_scale: float = 1.0
    controller_cycles: int = 1
    stack_limit: int = 32

    def __post_init__(self):
        for name in ("num_cores", "warps_per_buffer", "warp_size", "intersection_unit_sets", "interconnect_ports"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("interconnect_hop_cycles", "mem_latency", "controller_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 cycle")
        if not (self.core_clock_mhz > 0 and self.mem_clock_mhz > 0):
            raise ValueError("clock frequencies must be > 0")
        if not self.collision_unit_latency_scale > 0:
            raise ValueError("collision_unit_latency_scale must be > 0")
        lat = dict(DEFAULT_LATENCIES)
        lat.update(self.latencies)
        unknown = set(lat) - set(DEFAULT_LATENCIES)
        if unknown:
            raise ValueError(f"unknown latency keys {sorted(unknown)}")
        if any(v < 1 for v in lat.values()):
            raise ValueError("unit latencies must be >= 1 cycle")
        object.__setattr__(self, "latencies", lat)
        w = dict(DEFAULT_ENERGY_WEIGHTS)
        w.update(self.energy_weights)
        unknown = set(w) - set(DEFAULT_ENERGY_WEIGHTS)
        if unknown:
            raise ValueError(f"unknown energy weight keys {sorted(unknown)}")
        object.__setattr__(self, "energy_weights", w)
        if self.stack_limit < 1:
            raise ValueError("stack_limit must be >= 1")

    @property
    def mem_latency_core(self) -> float:
        """DRAM latency converted to core-clock cycles."""
        return self.mem_latency * self.core_clock_mhz / self.mem_clock_mhz

    def unit_latency(self, unit: str) -> float:
        """Latency of a port; collision units and clusters scale with the sweep knob."""
        slot = isa.port_slot(unit)
        lat = self.latencies[slot]
        if slot in ("BOXN", "EXE"):
            return lat * self.collision_unit_latency_scale
        return float(lat)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["latencies"] = dict(sorted(self.latencies.items()))
        d["energy_weights"] = dict(sorted(self.energy_weights.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig keys {sorted(unknown)}")
        kw = dict(d)
        for name in ("l1", "l2"):
            if name in kw and isinstance(kw[name], Mapping):
                base = asdict(getattr(cls(), name))
                extra = set(kw[name]) - set(base)
                if extra:
                    raise ValueError(f"unknown {name} keys {sorted(extra)}")
                base.update(kw[name])
                kw[name] = CacheConfig(**base)
        return cls(**kw)

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


# --- memory hierarchy ------------------------------------------------------------


class LruCache:
    """Set-associative cache with LRU replacement over line addresses."""

    def __init__(self, cfg: CacheConfig):
        lines = cfg.size_bytes // cfg.line_bytes
        self.assoc = cfg.assoc or lines
        self.num_sets = lines // self.assoc
        self.sets = [OrderedDict() for _ in range(self.num_sets)]
        self.hits = 0
        self.misses = 0

    def access(self, line: int) -> bool:
        s = self.sets[line % self.num_sets]
        if line in s:
            s.move_to_end(line)
            self.hits += 1
            return True
        s[line] = None
        if len(s) > self.assoc:
            s.popitem(last=False)
        self.misses += 1
        return False


# --- path costs --------------------------------------------------------------------


@dataclass(frozen=True)
class _SegmentCost:
    issue: np.ndarray  # packets per visited pc
    slot: np.ndarray
    lat_computed: np.ndarray
    lat_bypass: np.ndarray
    kind: np.ndarray


def _segment_cost(program: isa.IntersectionProgram, nt: NodeType, cfg: SimConfig) -> _SegmentCost:
    hop = cfg.interconnect_hop_cycles
    pcs = list(program.segment(nt))
    clustered = program.variant.units is UnitStyle.CLUSTERED
    issue, slot, lat_c, lat_b, kind = [], [], [], [], []
    prev_group = None
    for pc in pcs:
        u = program.uops[pc]
        unit = program.unit_of(pc)
        in_cluster = clustered and unit.startswith("CLUSTER")
        first = not (in_cluster and u.group == prev_group)
        prev_group = u.group if in_cluster else None
        issue.append(1.0 if first else 0.0)
        slot.append(SLOT_INDEX[isa.port_slot(unit)])
        lat_c.append(hop + cfg.unit_latency(unit) if first else 0.0)
        lat_b.append(hop + 1.0 if first else 0.0)
        kind.append(KIND_INDEX[u.kind])
    return _SegmentCost(
        np.asarray(issue), np.asarray(slot), np.asarray(lat_c), np.asarray(lat_b), np.asarray(kind)
    )


class _Tests:
    """Accumulates node-test records of the functional phase."""

    def __init__(self, program: isa.IntersectionProgram, cfg: SimConfig):
        self.program = program
        self.cfg = cfg
        self.costs = {nt: _segment_cost(program, nt, cfg) for nt in program.node_types}
        self.step: list[np.ndarray] = []
        self.packets: list[np.ndarray] = []
        self.latency: list[np.ndarray] = []
        self.slot_ops: list[np.ndarray] = []
        self.slot_pkts: list[np.ndarray] = []
        self.stage: list[np.ndarray] = []
        self.node_type: list[np.ndarray] = []
        self.decoded = 0
        self.computed = 0
        self.kind_ops = np.zeros(len(KINDS), dtype=np.int64)

    def run(self, nt: NodeType, regs: np.ndarray, step_ids: np.ndarray) -> isa.ExecResult:
        r = isa.execute(self.program, nt, regs)
        self.record(nt, r, step_ids)
        return r

    def record(self, nt: NodeType, r: isa.ExecResult, step_ids: np.ndarray):
        c = self.costs[nt]
        hop = self.cfg.interconnect_hop_cycles
        vis = r.visited.astype(np.float64)
        comp = r.computed_mask.astype(np.float64)
        ctrl_handoff = (~r.via_return).astype(np.float64)
        self.step.append(np.asarray(step_ids, dtype=np.int64))
        self.packets.append((1.0 + vis @ c.issue + ctrl_handoff).astype(np.float32))
        lat = hop + comp @ c.lat_computed + (vis - comp) @ c.lat_bypass
        self.latency.append((lat + ctrl_handoff * (hop + self.cfg.latencies["CTRL"])).astype(np.float32))
        onehot = np.zeros((len(c.slot), len(SLOTS)))
        onehot[np.arange(len(c.slot)), c.slot] = c.issue
        # per-slot issue counts are small integers (< 256 per test)
        self.slot_ops.append((comp @ onehot).astype(np.uint8))
        self.slot_pkts.append((vis @ onehot).astype(np.uint8))
        self.stage.append(r.stage.astype(np.int8))
        self.node_type.append(np.full(len(step_ids), NODE_TYPE_CODES[nt], dtype=np.int8))
        self.decoded += int(r.decoded.sum())
        self.computed += int(r.computed.sum())
        self.kind_ops += np.bincount(c.kind, weights=r.computed_mask.sum(axis=0), minlength=len(KINDS)).astype(
            np.int64
        )

    def arrays(self):
        if not self.step:
            z = np.zeros(0)
            zi = z.astype(np.int64)
            zs = np.zeros((0, len(SLOTS)), dtype=np.uint8)
            return zi, z, z, zs, zs, zi.astype(np.int8), zi.astype(np.int8)
        return (
            np.concatenate(self.step),
            np.concatenate(self.packets),
            np.concatenate(self.latency),
            np.concatenate(self.slot_ops),
            np.concatenate(self.slot_pkts),
            np.concatenate(self.stage),
            np.concatenate(self.node_type),
        )


@dataclass
class Trace:
    """Functional outcome of a run: traversal steps and node tests."""

    n_queries: int
    step_query: np.ndarray
    step_round: np.ndarray
    step_lines: list[np.ndarray]
    step_pushes: np.ndarray
    test_step: np.ndarray
    test_packets: np.ndarray
    test_latency: np.ndarray
    test_slot_ops: np.ndarray  # compute issues per unit slot
    test_slot_packets: np.ndarray  # packets delivered to each unit's input port
    test_stage: np.ndarray
    test_node_type: np.ndarray  # NODE_TYPE_CODES
    uops_decoded: int
    uops_computed: int
    kind_ops: np.ndarray
    nodes_traversed: np.ndarray  # per query
    overflow: np.ndarray  # per query: traversal stack spilled past the limit


def _finish_trace(tests: _Tests, n, sq, sr, lines, pushes, nodes, overflow) -> Trace:
    step, packets, latency, slot_ops, slot_pkts, stage, node_type = tests.arrays()
    return Trace(
        n_queries=n,
        step_query=np.asarray(sq, dtype=np.int64),
        step_round=np.asarray(sr, dtype=np.int64),
        step_lines=lines,
        step_pushes=np.asarray(pushes, dtype=np.int64),
        test_step=step,
        test_packets=packets,
        test_latency=latency,
        test_slot_ops=slot_ops,
        test_slot_packets=slot_pkts,
        test_stage=stage,
        test_node_type=node_type,
        uops_decoded=tests.decoded,
        uops_computed=tests.computed,
        kind_ops=tests.kind_ops,
        nodes_traversed=nodes,
        overflow=overflow,
    )


class _Stacks:
    """Per-query traversal stacks stored as one growable array."""

    def __init__(self, n: int, limit: int):
        self.data = np.zeros((n, 64), dtype=np.int64)
        self.sp = np.zeros(n, dtype=np.int64)
        self.limit = limit
        self.overflow = np.zeros(n, dtype=bool)

    def pop(self, lanes):
        self.sp[lanes] -= 1
        return self.data[lanes, self.sp[lanes]]

    def push_sorted(self, lanes: np.ndarray, values: np.ndarray):
        """Push ``values`` onto ``lanes``' stacks; ``lanes`` must be sorted (grouped)."""
        if len(lanes) == 0:
            return
        starts = np.r_[0, np.flatnonzero(np.diff(lanes)) + 1]
        counts = np.diff(np.r_[starts, len(lanes)])
        rank = np.arange(len(lanes)) - np.repeat(starts, counts)
        pos = self.sp[lanes] + rank
        need = int(pos.max()) + 1
        if need > self.data.shape[1]:
            grown = np.zeros((self.data.shape[0], max(need, 2 * self.data.shape[1])), dtype=np.int64)
            grown[:, : self.data.shape[1]] = self.data
            self.data = grown
        self.data[lanes, pos] = values
        uniq = lanes[starts]
        self.sp[uniq] += counts
        self.overflow[uniq] |= self.sp[uniq] > self.limit


def _dist2(a, b):
    d = a - b
    return (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]


# --- functional drivers ----------------------------------------------------------------


def trace_octree(program: isa.IntersectionProgram, octree: Octree, obbs: Sequence[Obb], cfg: SimConfig):
    """Collision queries of ``obbs`` against ``octree``; returns (collides, Trace)."""
    n = len(obbs)
    oc = np.array([o.center for o in obbs]).reshape(n, 3)
    ob = np.array([o.half_extents for o in obbs]).reshape(n, 3)
    ou = np.array([o.axes for o in obbs]).reshape(n, 3, 3)
    occ = octree.occupancy
    line = cfg.l1.line_bytes
    tests = _Tests(program, cfg)
    stacks = _Stacks(n, cfg.stack_limit)
    stacks.sp[:] = 1
    done = np.zeros(n, dtype=bool)
    collides = np.zeros(n, dtype=bool)
    nodes = np.zeros(n, dtype=np.int64)
    sq, sr, lines, pushes = [], [], [], []
    rnd = 0
    while True:
        act = np.flatnonzero(~done & (stacks.sp > 0))
        if len(act) == 0:
            break
        node = stacks.pop(act)
        base = len(sq)
        step_of = base + np.arange(len(act))
        sq.extend(act.tolist())
        sr.extend([rnd] * len(act))
        lines.extend(((node * Octree.NODE_BYTES) // line)[:, None])
        nodes[act] += 1
        step_push = np.zeros(len(act), dtype=np.int64)

        node_occ = occ[node]
        done[act[node_occ == Occupancy.EMPTY]] = True
        # candidate (lane, child) pairs
        partial = node_occ == Occupancy.PARTIAL
        fc = octree.first_child[node].astype(np.int64)
        kid = np.where(partial[:, None], fc[:, None] + np.arange(8)[None, :], node[:, None])
        valid = np.where(partial[:, None], True, (np.arange(8) == 0)[None, :] & (node_occ == Occupancy.FULL)[:, None])
        valid &= occ[np.where(valid, kid, 0)] != Occupancy.EMPTY
        li, ki = np.nonzero(valid)
        pair_node = kid[li, ki]
        pair_lane = act[li]
        hit = np.zeros(len(li), dtype=bool)
        if len(li):
            centers, halves = octree.node_boxes(pair_node)
            pair_full = occ[pair_node] == Occupancy.FULL
            for nt, sel in ((NodeType.OCTREE_LEAF, pair_full), (NodeType.OCTREE_INTERNAL, ~pair_full)):
                idx = np.flatnonzero(sel)
                if len(idx) == 0:
                    continue
                q = pair_lane[idx]
                regs = isa.pack_sact(oc[q], ob[q], ou[q], centers[idx], halves[idx])
                r = tests.run(nt, regs, step_of[li[idx]])
                hit[idx] = r.result
            full_hit = np.zeros(n, dtype=bool)
            full_hit[pair_lane[hit & pair_full]] = True
            finished = act[full_hit[act]]
            collides[finished] = True
            done[finished] = True
            push = hit & ~pair_full & ~full_hit[pair_lane]
            pidx = np.flatnonzero(push)
            if len(pidx):
                d2 = _dist2(centers[pidx], oc[pair_lane[pidx]])
                order = np.lexsort((ki[pidx], -d2, pair_lane[pidx]))
                pidx = pidx[order]
                stacks.push_sorted(pair_lane[pidx], pair_node[pidx])
                step_push += np.bincount(li[pidx], minlength=len(act))
        pushes.extend(step_push.tolist())
        rnd += 1
    return collides, _finish_trace(tests, n, sq, sr, lines, pushes, nodes, stacks.overflow)


@dataclass
class BallQueryOutcome:
    """Hits per query in traversal order; ``groups`` applies the K cap."""

    hits: list[np.ndarray]
    terminated: np.ndarray


def trace_bvh(
    program: isa.IntersectionProgram,
    bvh: SphereBvh,
    points: np.ndarray,
    cfg: SimConfig,
    k_max: int | None = None,
):
    """Point queries against a sphere BVH (the degenerate-ray form of ball query).

    Each step fetches one node: an internal node tests its two children's
    bounds, a leaf tests its spheres.  With a K-check in the program a query
    ends once it has ``k_max`` hits.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    k_max = k_max or program.k_max or 1
    r2 = bvh.radius * bvh.radius
    line = cfg.l1.line_bytes
    sphere_base = bvh.num_nodes * SphereBvh.NODE_BYTES
    early = any(u.terminate_query for u in program.uops)
    tests = _Tests(program, cfg)
    stacks = _Stacks(n, cfg.stack_limit)
    stacks.sp[:] = 1
    done = np.zeros(n, dtype=bool)
    terminated = np.zeros(n, dtype=bool)
    counts = np.zeros(n, dtype=np.int64)
    nodes = np.zeros(n, dtype=np.int64)
    hit_q: list[np.ndarray] = []
    hit_s: list[np.ndarray] = []
    sq, sr, lines, pushes = [], [], [], []
    leaf_mask = bvh.left < 0
    rnd = 0
    while True:
        act = np.flatnonzero(~done & (stacks.sp > 0))
        if len(act) == 0:
            break
        node = stacks.pop(act)
        base = len(sq)
        step_of = base + np.arange(len(act))
        sq.extend(act.tolist())
        sr.extend([rnd] * len(act))
        nodes[act] += 1
        is_leaf = leaf_mask[node]
        step_push = np.zeros(len(act), dtype=np.int64)
        node_line = (node * SphereBvh.NODE_BYTES) // line
        for i in range(len(act)):
            if is_leaf[i]:
                s = int(bvh.leaf_start[node[i]])
                c = int(bvh.leaf_count[node[i]])
                a0 = (sphere_base + s * SphereBvh.SPHERE_BYTES) // line
                a1 = (sphere_base + (s + c) * SphereBvh.SPHERE_BYTES - 1) // line
                lines.append(np.r_[node_line[i], np.arange(a0, a1 + 1)])
            else:
                lines.append(node_line[i : i + 1])

        # internal nodes: two child box tests
        ii = np.flatnonzero(~is_leaf)
        if len(ii):
            kids = np.stack([bvh.left[node[ii]], bvh.right[node[ii]]], axis=1).astype(np.int64)
            li = np.repeat(ii, 2)
            ki = np.tile([0, 1], len(ii))
            kn = kids.reshape(-1)
            q = act[li]
            regs = isa.pack_ball_query(points[q], 0.0, k_max, counts[q], bvh.lo[kn], bvh.hi[kn])
            r = tests.run(NodeType.BVH_INTERNAL, regs, step_of[li])
            pidx = np.flatnonzero(r.result)
            if len(pidx):
                centers = 0.5 * (bvh.lo[kn[pidx]] + bvh.hi[kn[pidx]])
                d2 = _dist2(centers, points[q[pidx]])
                order = np.lexsort((ki[pidx], -d2, q[pidx]))
                pidx = pidx[order]
                stacks.push_sorted(q[pidx], kn[pidx])
                step_push += np.bincount(li[pidx], minlength=len(act))

        # leaves: sphere tests in leaf order
        lf = np.flatnonzero(is_leaf)
        if len(lf):
            cnt = bvh.leaf_count[node[lf]]
            li = np.repeat(lf, cnt)
            offs = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            sph = bvh.order[np.repeat(bvh.leaf_start[node[lf]], cnt) + offs]
            q = act[li]
            regs = isa.pack_ball_query(points[q], bvh.radius, k_max, counts[q], bvh.centers[sph])
            if early:
                # hit flags first, then the running count each test sees
                probe = isa.execute(program, NodeType.SPHERE_LEAF, regs)
                h = probe.result.astype(np.int64)
                grp = np.r_[0, np.flatnonzero(np.diff(li)) + 1]
                before = np.cumsum(h) - h
                before -= np.repeat(before[grp], np.diff(np.r_[grp, len(li)]))
                regs[:, 2, 0] = counts[q] + before
            r = tests.run(NodeType.SPHERE_LEAF, regs, step_of[li])
            hit = r.result.copy()
            if early:
                term_lane = np.zeros(n, dtype=bool)
                term_lane[q[r.terminate]] = True
                # hits after the terminating one in the same leaf are dropped
                order_in = np.arange(len(li))
                first_term = np.full(n, len(li))
                np.minimum.at(first_term, q[r.terminate], order_in[r.terminate])
                hit &= order_in <= first_term[q]
                terminated |= term_lane
                done |= term_lane
            hit_q.append(q[hit])
            hit_s.append(sph[hit])
            counts += np.bincount(q[hit], minlength=n)
        pushes.extend(step_push.tolist())
        rnd += 1

    hq = np.concatenate(hit_q) if hit_q else np.zeros(0, dtype=np.int64)
    hs = np.concatenate(hit_s) if hit_s else np.zeros(0, dtype=np.int64)
    order = np.argsort(hq, kind="stable")
    hq, hs = hq[order], hs[order]
    bounds = np.searchsorted(hq, np.arange(n + 1))
    hits = [hs[bounds[i] : bounds[i + 1]] for i in range(n)]
    out = BallQueryOutcome(hits, terminated)
    return out, _finish_trace(tests, n, sq, sr, lines, pushes, nodes, stacks.overflow)


GRID_BIG = 1e30


@dataclass
class RayCastOutcome:
    hit: np.ndarray  # bool per ray
    cell: np.ndarray  # (n, 3) hit cell, -1 where no hit
    steps: np.ndarray  # cells visited per ray


def dda_init(grid: OccupancyGrid, origins, dirs):
    """Cell, step sign, tDelta and first tMax for each ray (64-bit)."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    cs = grid.cell_size
    cell = np.floor((o - grid.origin) / cs).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, cs / np.abs(d), GRID_BIG)
        edge = grid.origin + (cell + (step > 0)) * cs
        t_max = np.where(d != 0, (edge - o) / d, GRID_BIG)
    return cell, step, t_delta, t_max


def trace_grid(program: isa.IntersectionProgram, grid: OccupancyGrid, origins, dirs, t_max_ray: float, cfg: SimConfig):
    """3D DDA ray casting; every visited cell is one fetch and one grid-step program."""
    cell, step, t_delta, t_max = dda_init(grid, origins, dirs)
    n = len(cell)
    dims = np.asarray(grid.dims)
    occ_flat = grid.occupancy.reshape(-1)
    line = cfg.l1.line_bytes
    tests = _Tests(program, cfg)
    inside = np.all((cell >= 0) & (cell < dims), axis=1)
    done = ~inside
    hit = np.zeros(n, dtype=bool)
    hit_cell = np.full((n, 3), -1, dtype=np.int64)
    t_enter = np.zeros(n)
    nodes = np.zeros(n, dtype=np.int64)
    sq, sr, lines, pushes = [], [], [], []
    rnd = 0
    while True:
        act = np.flatnonzero(~done)
        if len(act) == 0:
            break
        c = cell[act]
        flat = (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]
        base = len(sq)
        sq.extend(act.tolist())
        sr.extend([rnd] * len(act))
        lines.extend((flat // line)[:, None])
        pushes.extend([0] * len(act))
        nodes[act] += 1
        regs = np.zeros((len(act), isa.NUM_REGS, 3), dtype=np.float64)
        regs[:, 1] = t_delta[act]
        regs[:, 2] = t_max[act]
        regs[:, 4, 0] = occ_flat[flat]
        r = tests.run(NodeType.GRID_CELL, regs, base + np.arange(len(act)))
        h = r.result
        hit[act[h]] = True
        hit_cell[act[h]] = c[h]
        done[act[h]] = True
        mv = act[~h]
        mask = r.regs[~h, 5] > 0
        t_enter[mv] = r.regs[~h, 3, 0]
        t_max[mv] = r.regs[~h, 2]
        cell[mv] += step[mv] * mask
        out = np.any((cell[mv] < 0) | (cell[mv] >= dims), axis=1) | (t_enter[mv] > t_max_ray)
        done[mv[out]] = True
        rnd += 1
    tr = _finish_trace(tests, n, sq, sr, lines, pushes, nodes, np.zeros(n, dtype=bool))
    return RayCastOutcome(hit, hit_cell, nodes), tr


# --- timing --------------------------------------------------------------------------------


@dataclass
class SimStats:
    total_cycles: float
    unit_ops: dict[str, int]
    unit_busy_cycles: dict[str, float]
    interconnect_packets: int
    interconnect_occupancy: float
    fetch_l1: int
    fetch_l2: int
    fetch_mem: int
    query_latency: np.ndarray
    exit_histogram: np.ndarray
    nodes_traversed: int
    node_tests: int
    uops_decoded: int
    uops_computed: int
    kind_ops: dict[str, int]
    controller_events: int
    stack_overflows: int
    energy: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def energy_total(self) -> float:
        return float(sum(self.energy.values()))

    def utilization(self, num_instances: int) -> dict[str, float]:
        if self.total_cycles <= 0:
            return {k: 0.0 for k in self.unit_busy_cycles}
        return {k: v / self.total_cycles for k, v in self.unit_busy_cycles.items()}

    def to_json(self) -> dict[str, Any]:
        return {
            "total_cycles": self.total_cycles,
            "unit_ops": self.unit_ops,
            "unit_busy_cycles": self.unit_busy_cycles,
            "interconnect_packets": self.interconnect_packets,
            "interconnect_occupancy": self.interconnect_occupancy,
            "fetch": {"l1": self.fetch_l1, "l2": self.fetch_l2, "mem": self.fetch_mem},
            "query_latency": {
                "mean": float(np.mean(self.query_latency)) if len(self.query_latency) else 0.0,
                "max": float(np.max(self.query_latency)) if len(self.query_latency) else 0.0,
            },
            "exit_histogram": {ExitStage(i).label: int(v) for i, v in enumerate(self.exit_histogram)},
            "nodes_traversed": self.nodes_traversed,
            "node_tests": self.node_tests,
            "uops_decoded": self.uops_decoded,
            "uops_computed": self.uops_computed,
            "kind_ops": self.kind_ops,
            "controller_events": self.controller_events,
            "stack_overflows": self.stack_overflows,
            "energy": self.energy,
            "energy_total": self.energy_total,
            "config_hash": self.config_hash,
        }


def energy_report(stats: SimStats, cfg: SimConfig) -> dict[str, float]:
    """Activity-proxy energy by component; unitless."""
    w = cfg.energy_weights
    out: dict[str, float] = {}
    for kind in KINDS:
        n = stats.kind_ops.get(kind.value, 0)
        out[f"op_{kind.value}"] = n * w[_KIND_WEIGHT[kind]]
    out["interconnect"] = stats.interconnect_packets * w["packet"]
    out["l1"] = (stats.fetch_l1 + stats.fetch_l2 + stats.fetch_mem) * w["l1"]
    out["l2"] = (stats.fetch_l2 + stats.fetch_mem) * w["l2"]
    out["memory"] = stats.fetch_mem * w["mem"]
    out["controller"] = stats.controller_events * w["controller"]
    return out


def _warp_steps(trace: Trace, cfg: SimConfig):
    """Aggregate steps and tests into warp steps keyed by (warp, round)."""
    ws = cfg.warp_size
    sets = cfg.intersection_unit_sets
    warp = trace.step_query // ws
    n_warps = (trace.n_queries + ws - 1) // ws
    max_round = int(trace.step_round.max()) + 1 if len(trace.step_round) else 0
    key = warp * max(max_round, 1) + trace.step_round
    uniq, inv = np.unique(key, return_inverse=True)
    n_ws = len(uniq)
    # tests, assigned to sets round-robin within their warp step
    t_ws = inv[trace.test_step] if len(trace.test_step) else np.zeros(0, dtype=np.int64)
    order = np.argsort(t_ws, kind="stable")
    t_sorted = t_ws[order]
    starts = np.searchsorted(t_sorted, np.arange(n_ws))
    rank = np.arange(len(t_sorted)) - starts[t_sorted]
    set_of = np.empty(len(t_ws), dtype=np.int64)
    set_of[order] = rank % sets
    n_tests = np.bincount(t_ws, minlength=n_ws)
    packets = np.bincount(t_ws, weights=trace.test_packets, minlength=n_ws)
    crit = np.zeros(n_ws)
    if len(t_ws):
        np.maximum.at(crit, t_ws, trace.test_latency)
    load = np.zeros((n_ws, sets, len(SLOTS)))
    if len(t_ws):
        np.add.at(load, (t_ws, set_of), trace.test_slot_packets)
    unit_load = load.max(axis=(1, 2)) if n_ws else np.zeros(0)
    work = np.maximum.reduce(
        [packets / cfg.interconnect_ports, unit_load, np.ceil(n_tests / sets)]
    ) if n_ws else np.zeros(0)
    # lines fetched per warp step (coalesced)
    step_order = np.argsort(inv, kind="stable")
    ws_lines: list[list[int]] = [[] for _ in range(n_ws)]
    for s in step_order:
        ws_lines[inv[s]].extend(int(x) for x in trace.step_lines[s])
    ws_lines = [sorted(set(v)) for v in ws_lines]
    ws_warp = uniq // max(max_round, 1)
    ws_round = uniq % max(max_round, 1)
    per_warp: list[list[int]] = [[] for _ in range(n_warps)]
    for i in np.lexsort((ws_round, ws_warp)):
        per_warp[ws_warp[i]].append(int(i))
    # queries finishing at each warp step
    last_step = np.full(trace.n_queries, -1, dtype=np.int64)
    np.maximum.at(last_step, trace.step_query, np.arange(len(trace.step_query)))
    finish_ws = np.where(last_step >= 0, inv[np.maximum(last_step, 0)] if len(inv) else 0, -1)
    controller = len(trace.step_query) + len(trace.test_step) + int(trace.step_pushes.sum())
    return per_warp, ws_lines, work, crit, n_tests, finish_ws, controller


def simulate_timing(trace: Trace, cfg: SimConfig) -> SimStats:
    per_warp, ws_lines, work, crit, n_tests, finish_ws, controller = _warp_steps(trace, cfg)
    n_warps = len(per_warp)
    C = cfg.num_cores
    l2 = LruCache(cfg.l2)
    l1 = [LruCache(cfg.l1) for _ in range(C)]
    mem_free = [0.0] * C
    server_free = [0.0] * C
    last_warp = [-1] * C
    pending = [list(range(c, n_warps, C)) for c in range(C)]
    for q in pending:
        q.reverse()
    warp_start = np.zeros(n_warps)
    ws_done = np.zeros(len(work))
    f1 = f2 = fm = 0
    mem_lat = cfg.mem_latency_core
    heap: list[tuple] = []
    seq = 0

    def launch(core: int, t: float):
        nonlocal seq
        if pending[core]:
            w = pending[core].pop()
            warp_start[w] = t
            if per_warp[w]:
                heapq.heappush(heap, (t, core, 1, w, seq, 0))
                seq += 1
            else:
                launch(core, t)

    for c in range(C):
        for _ in range(cfg.warps_per_buffer):
            launch(c, 0.0)

    end = 0.0
    while heap:
        t, core, _, w, _, idx = heapq.heappop(heap)
        s = per_warp[w][idx]
        # memory: one line per cycle from the core's L1 port
        issue0 = max(t, mem_free[core])
        lines = ws_lines[s]
        mem_done = t
        for i, ln in enumerate(lines):
            if l1[core].access(ln):
                lat = cfg.l1.latency
                f1 += 1
            elif l2.access(ln):
                lat = cfg.l1.latency + cfg.l2.latency
                f2 += 1
            else:
                lat = cfg.l1.latency + cfg.l2.latency + mem_lat
                fm += 1
            mem_done = max(mem_done, issue0 + i + lat)
        mem_free[core] = issue0 + len(lines)
        arrival = mem_done + cfg.controller_cycles
        if n_tests[s]:
            start = max(arrival, server_free[core])
            server_free[core] = start + work[s]
            done = max(start + work[s], arrival + crit[s])
        else:
            done = arrival
        ws_done[s] = done
        last_warp[core] = w
        end = max(end, done)
        if idx + 1 < len(per_warp[w]):
            heapq.heappush(heap, (done, core, 0, w, seq, idx + 1))
            seq += 1
        else:
            launch(core, done)

    latency = np.zeros(trace.n_queries)
    ok = finish_ws >= 0
    qwarp = np.arange(trace.n_queries) // cfg.warp_size
    latency[ok] = ws_done[finish_ws[ok]] - warp_start[qwarp[ok]]

    slot_ops = trace.test_slot_ops.sum(axis=0) if len(trace.test_slot_ops) else np.zeros(len(SLOTS))
    instances = C * cfg.intersection_unit_sets
    unit_ops = {name: int(round(slot_ops[i])) for i, name in enumerate(SLOTS) if name != "CTRL"}
    unit_busy = {name: unit_ops[name] / instances for name in unit_ops}
    packets = int(round(trace.test_packets.sum(dtype=np.float64)))
    hist = np.zeros(len(ExitStage), dtype=np.int64)
    st = trace.test_stage[trace.test_stage >= 0]
    if len(st):
        hist += np.bincount(st, minlength=len(ExitStage))
    stats = SimStats(
        total_cycles=float(end),
        unit_ops=unit_ops,
        unit_busy_cycles=unit_busy,
        interconnect_packets=packets,
        interconnect_occupancy=packets / (end * cfg.interconnect_ports * C) if end > 0 else 0.0,
        fetch_l1=f1,
        fetch_l2=f2,
        fetch_mem=fm,
        query_latency=latency,
        exit_histogram=hist,
        nodes_traversed=int(trace.nodes_traversed.sum()),
        node_tests=len(trace.test_step),
        uops_decoded=trace.uops_decoded,
        uops_computed=trace.uops_computed,
        kind_ops={k.value: int(trace.kind_ops[i]) for i, k in enumerate(KINDS)},
        controller_events=controller,
        stack_overflows=int(trace.overflow.sum()),
        config_hash=cfg.digest(),
    )
    stats.energy = energy_report(stats, cfg)
    return stats


# --- public entry points ----------------------------------------------------------------------


@dataclass
class RunResult:
    results: Any  # bool array, BallQueryOutcome or RayCastOutcome
    stats: SimStats
    trace: Trace

    @property
    def nodes_traversed(self) -> np.ndarray:
        return self.trace.nodes_traversed


def run(program: isa.IntersectionProgram, index, queries, config: SimConfig | None = None, seed: int = 0, **kw) -> RunResult:
    """Simulate ``queries`` against a spatial ``index``.

    * Octree + sequence of Obb: collision queries, results are booleans.
    * SphereBvh + (n, 3) points: ball-query point lookups (degenerate rays).
    * OccupancyGrid + (origins, dirs): ray casting; pass ``t_max``.

    The model has no randomness; ``seed`` is accepted for interface symmetry
    and recorded nowhere else.
    """
    cfg = config or SimConfig()
    diags = isa.validate(program)
    if diags:
        raise isa.ProgramError(diags)
    if isinstance(index, Octree):
        queries = list(queries)
        if not queries:
            raise ValueError("no queries")
        res, trace = trace_octree(program, index, queries, cfg)
    elif isinstance(index, SphereBvh):
        pts = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("no queries")
        res, trace = trace_bvh(program, index, pts, cfg, kw.get("k_max"))
    elif isinstance(index, OccupancyGrid):
        origins, dirs = queries
        if len(origins) == 0:
            raise ValueError("no queries")
        res, trace = trace_grid(program, index, origins, dirs, kw.get("t_max", np.inf), cfg)
    else:
        raise TypeError(f"unsupported index {type(index).__name__}")
    return RunResult(res, simulate_timing(trace, cfg), trace)


def test_pairs(program: isa.IntersectionProgram, obbs: Sequence[Obb], aabb_centers, aabb_halves, chunk: int = 65536):
    """Datapath booleans and exit stages of independent OBB-AABB pairs."""
    n = len(obbs)
    oc = np.array([o.center for o in obbs]).reshape(n, 3)
    ob = np.array([o.half_extents for o in obbs]).reshape(n, 3)
    ou = np.array([o.axes for o in obbs]).reshape(n, 3, 3)
    res = np.zeros(n, dtype=bool)
    stage = np.zeros(n, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        regs = isa.pack_sact(oc[s:e], ob[s:e], ou[s:e], np.asarray(aabb_centers)[s:e], np.asarray(aabb_halves)[s:e])
        r = isa.execute(program, NodeType.OCTREE_LEAF, regs)
        res[s:e] = r.result
        stage[s:e] = r.stage
    return res, stage


# --- batches and reports ------------------------------------------------------------------------


@dataclass
class Experiment:
    label: str
    program: isa.IntersectionProgram
    index: Any
    queries: Any
    config: SimConfig = field(default_factory=SimConfig)
    seed: int = 0
    options: dict[str, Any] = field(default_factory=dict)


def stats_row(stats: SimStats, *, scene: str, variant: str, extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    row: dict[str, Any] = {"config_hash": stats.config_hash, "scene": scene, "variant": variant}
    if extra:
        row.update(extra)
    row["cycles"] = stats.total_cycles
    for name, busy in stats.unit_busy_cycles.items():
        row[f"util_{name}"] = busy / stats.total_cycles if stats.total_cycles > 0 else 0.0
    row.update(
        icnt_packets=stats.interconnect_packets,
        icnt_occupancy=stats.interconnect_occupancy,
        fetch_l1=stats.fetch_l1,
        fetch_l2=stats.fetch_l2,
        fetch_mem=stats.fetch_mem,
        nodes_traversed=stats.nodes_traversed,
        node_tests=stats.node_tests,
        uops_decoded=stats.uops_decoded,
        uops_computed=stats.uops_computed,
        stack_overflows=stats.stack_overflows,
    )
    for k, v in stats.energy.items():
        row[f"energy_{k}"] = v
    row["energy_total"] = stats.energy_total
    return row


def run_batch(experiments: Sequence[Experiment]) -> list[dict[str, Any]]:
    """Independent runs, one row each, in input order."""
    rows = []
    for ex in experiments:
        r = run(ex.program, ex.index, ex.queries, ex.config, ex.seed, **ex.options)
        rows.append(stats_row(r.stats, scene=ex.label, variant=ex.program.variant.name))
    return rows


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def rows_to_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
