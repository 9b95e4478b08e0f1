"""Reproducible workloads: cluttered environments with robot-link OBB streams,
ball-query instances in both formulations, and Monte Carlo localization ray
casting with per-iteration switching between the simulator and a host model.

All generators draw from ``numpy.random.default_rng(seed)`` and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import isa, oracle, simcore
from .geom import Aabb, Obb, sat_full_batch
from .scene import OccupancyGrid, Octree, PointCloud, Scene, SphereBvh, build_octree, build_sphere_bvh

ENV_KINDS = ("tabletop", "cubby", "dresser", "merged_cubby")
COLLISION_TARGETS = {"tabletop": 0.27, "cubby": 0.85, "dresser": 0.30, "merged_cubby": 0.75}


# --- environment geometry ------------------------------------------------------------


def _box(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return (lo + hi) / 2, (hi - lo) / 2


def _shelf(origin, size, cols: int, rows: int, t: float = 0.02):
    """Open-front shelving: back, sides, top, bottom, dividers and shelves."""
    ox, oy, oz = origin
    w, d, h = size
    boxes = [
        _box((ox, oy + d - t, oz), (ox + w, oy + d, oz + h)),  # back
        _box((ox, oy, oz), (ox + t, oy + d, oz + h)),
        _box((ox + w - t, oy, oz), (ox + w, oy + d, oz + h)),
        _box((ox, oy, oz), (ox + w, oy + d, oz + t)),
        _box((ox, oy, oz + h - t), (ox + w, oy + d, oz + h)),
    ]
    for c in range(1, cols):
        x = ox + w * c / cols
        boxes.append(_box((x - t / 2, oy, oz), (x + t / 2, oy + d, oz + h)))
    for r in range(1, rows):
        z = oz + h * r / rows
        boxes.append(_box((ox, oy, z - t / 2), (ox + w, oy + d, z + t / 2)))
    return boxes


def env_boxes(kind: str, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Obstacle boxes (center, half extents) of a synthetic environment, in meters."""
    if kind == "tabletop":
        boxes = [_box((0.05, 0.2, 0.36), (0.95, 0.8, 0.40))]
        for x in (0.08, 0.9):
            for y in (0.23, 0.75):
                boxes.append(_box((x, y, 0.0), (x + 0.03, y + 0.03, 0.36)))
        for _ in range(int(rng.integers(8, 15))):
            half = rng.uniform([0.015, 0.015, 0.02], [0.07, 0.07, 0.12])
            c = rng.uniform([0.1, 0.25], [0.9, 0.75])
            boxes.append((np.array([c[0], c[1], 0.40 + half[2]]), half))
        return boxes
    if kind == "cubby":
        return _shelf((0.1, 0.3, 0.0), (0.8, 0.4, 0.9), 3, 3)
    if kind == "merged_cubby":
        return _shelf((0.0, 0.3, 0.0), (0.5, 0.4, 0.9), 2, 3) + _shelf((0.5, 0.3, 0.0), (0.5, 0.4, 0.9), 2, 2)
    if kind == "dresser":
        boxes = [_box((0.1, 0.35, 0.0), (0.9, 0.8, 0.75))]
        heights = np.linspace(0.08, 0.62, 4)
        for z in heights:
            out = rng.uniform(0.0, 0.25) if rng.random() < 0.5 else 0.0
            boxes.append(_box((0.15, 0.33 - out, z), (0.85, 0.35, z + 0.12)))
            boxes.append(_box((0.45, 0.30 - out, z + 0.05), (0.55, 0.33 - out, z + 0.07)))  # handle
        return boxes
    raise ValueError(f"unknown environment kind {kind!r}; choose from {ENV_KINDS}")


def sample_box_surfaces(boxes, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the union of box surfaces (by area)."""
    faces = []
    for c, h in boxes:
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            area = 4 * h[u] * h[v]
            for sgn in (-1.0, 1.0):
                faces.append((c, h, axis, u, v, sgn, area))
    areas = np.array([f[6] for f in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for i, (c, h, axis, u, v, sgn, _) in enumerate(faces):
        sel = pick == i
        if not sel.any():
            continue
        p = np.tile(c, (int(sel.sum()), 1))
        p[:, axis] += sgn * h[axis]
        p[:, u] += uv[sel, 0] * h[u]
        p[:, v] += uv[sel, 1] * h[v]
        pts[sel] = p
    return pts


class FlatCollider:
    """Exact full-test collision against every occupied leaf, pruned with a k-d tree."""

    def __init__(self, octree: Octree):
        self.centers, self.halves = octree.occupied_boxes()
        self.reach = float(np.linalg.norm(self.halves, axis=1).max()) if len(self.halves) else 0.0
        self.tree = cKDTree(self.centers) if len(self.centers) else None

    def collides(self, obb: Obb) -> bool:
        if self.tree is None:
            return False
        idx = self.tree.query_ball_point(obb.center, float(np.linalg.norm(obb.half_extents)) + self.reach + 1e-6)
        if not idx:
            return False
        idx = np.asarray(idx)
        return bool(np.any(sat_full_batch(obb, self.centers[idx], self.halves[idx])))


@dataclass(eq=False)
class CollisionWorkload:
    kind: str
    seed: int
    points: PointCloud
    octree: Octree
    obbs: list[Obb]
    expected_collisions: int
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def collision_fraction(self) -> float:
        return self.expected_collisions / max(1, len(self.obbs))

    def to_scene(self) -> Scene:
        return Scene(
            points=self.points,
            obbs=list(self.obbs),
            params=dict(self.params),
            seed=self.seed,
            workload={"type": "collision", "kind": self.kind, "expected_collisions": self.expected_collisions},
        )

    @classmethod
    def from_scene(cls, scene: Scene) -> "CollisionWorkload":
        p = dict(scene.params)
        octree = build_octree(scene.points, max_depth=int(p.get("max_depth", 8)))
        w = scene.workload or {}
        expected = w.get("expected_collisions")
        if expected is None:
            fc = FlatCollider(octree)
            expected = sum(fc.collides(o) for o in scene.obbs)
        return cls(w.get("kind", p.get("kind", "custom")), int(scene.seed or 0), scene.points, octree, list(scene.obbs), int(expected), p)


def random_pairs(rng: np.random.Generator, n: int, extent: float = 1.0):
    """Random OBB-AABB pairs, each AABB placed near its OBB so both outcomes are common.

    Returns ``(obbs, aabb_centers, aabb_halves)``.
    """
    centers = rng.uniform(-extent, extent, size=(n, 3))
    half = rng.uniform(0.05, 0.5, size=(n, 3)) * extent
    rots = Rotation.random(n, random_state=rng).as_matrix()
    obbs = [Obb(centers[i], half[i], rots[i]) for i in range(n)]
    a_c = centers + rng.normal(0.0, 0.5 * extent, size=(n, 3))
    a_h = rng.uniform(0.05, 0.6, size=(n, 3)) * extent
    return obbs, a_c, a_h


def _link_obbs(rng: np.random.Generator, n: int, centers: np.ndarray) -> list[Obb]:
    half = rng.uniform([0.02, 0.02, 0.04], [0.05, 0.05, 0.12], size=(n, 3))
    rots = Rotation.random(n, random_state=rng).as_matrix()
    return [Obb(centers[i], half[i], rots[i]) for i in range(n)]


def gen_env(kind: str, seed: int, n_points: int = 65536, n_obbs: int = 4096, max_depth: int = 8) -> CollisionWorkload:
    """Synthetic environment plus a robot-link OBB stream.

    Candidate link poses are drawn near obstacle surfaces and across the
    workspace; the stream is then stratified so that the colliding share
    equals the kind's target fraction.
    """
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment kind {kind!r}; choose from {ENV_KINDS}")
    if n_points < 1 or n_obbs < 1:
        raise ValueError("n_points and n_obbs must be positive")
    rng = np.random.default_rng(seed)
    boxes = env_boxes(kind, rng)
    pts = sample_box_surfaces(boxes, n_points, rng)
    pc = PointCloud(pts)
    octree = build_octree(pc, max_depth=max_depth)
    fc = FlatCollider(octree)
    box = pc.bounds()

    target = COLLISION_TARGETS[kind]
    n_hit = int(round(target * n_obbs))
    n_miss = n_obbs - n_hit
    hits: list[Obb] = []
    misses: list[Obb] = []
    batch = max(256, n_obbs)
    rounds = 0
    while len(hits) < n_hit or len(misses) < n_miss:
        rounds += 1
        if rounds > 200:
            raise RuntimeError("could not reach the target collision mix")
        near = pts[rng.integers(0, len(pts), size=batch)] + rng.normal(0.0, 0.06, size=(batch, 3))
        wide = rng.uniform(box.lo, box.hi, size=(batch, 3))
        use_near = rng.random(batch) < 0.6
        centers = np.where(use_near[:, None], near, wide)
        for o in _link_obbs(rng, batch, centers):
            if fc.collides(o):
                if len(hits) < n_hit:
                    hits.append(o)
            elif len(misses) < n_miss:
                misses.append(o)
    obbs = hits + misses
    order = rng.permutation(n_obbs)
    obbs = [obbs[i] for i in order]
    params = {"kind": kind, "n_points": n_points, "n_obbs": n_obbs, "max_depth": max_depth, "target_fraction": target}
    return CollisionWorkload(kind, seed, pc, octree, obbs, n_hit, params)


# --- ball query ---------------------------------------------------------------------------


@dataclass(eq=False)
class BallQueryWorkload:
    points: np.ndarray
    centers: np.ndarray  # indices into points
    radius: float
    k_max: int
    seed: int

    @property
    def center_points(self) -> np.ndarray:
        return self.points[self.centers]


def gen_ball_query(seed: int, n: int = 65536, k: int = 512, r: float = 0.05, K: int = 64) -> BallQueryWorkload:
    """Desk-scale cloud (tabletop surfaces, about 1 m across) with ``k`` sampled centers."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    if r < 0 or K < 1:
        raise ValueError("need r >= 0 and K >= 1")
    rng = np.random.default_rng(seed)
    pts = sample_box_surfaces(env_boxes("tabletop", rng), n, rng)
    centers = np.sort(rng.choice(n, size=k, replace=False))
    return BallQueryWorkload(pts, centers, float(r), int(K), seed)


@dataclass
class BallQueryResult:
    formulation: str
    rays: int
    spheres: int
    tree_depth: int
    nodes_per_ray: float
    spheres_per_ray: float
    total_nodes: int
    groups: list[np.ndarray]  # per center, K-capped
    full_sets: list[np.ndarray] | None
    stats: simcore.SimStats
    early_exit: bool

    def row(self) -> dict[str, Any]:
        return {
            "formulation": "P-Ray" if self.formulation == "pray" else "P-Sphere",
            "early_exit": self.early_exit,
            "total_rays": self.rays,
            "total_spheres": self.spheres,
            "tree_depth": self.tree_depth,
            "avg_nodes_per_ray": self.nodes_per_ray,
            "avg_spheres_per_ray": self.spheres_per_ray,
            "total_nodes_traversed": self.total_nodes,
            "cycles": self.stats.total_cycles,
        }


def run_ball_query(
    wl: BallQueryWorkload,
    formulation: str,
    early_exit: bool = True,
    config: simcore.SimConfig | None = None,
    radius: float | None = None,
    leaf_size: int = 8,
) -> BallQueryResult:
    """Simulate one formulation.

    P-Ray: every point is a (degenerate) ray and the sampled centers are
    spheres.  P-Sphere: the centers are rays and every point is a sphere;
    with ``early_exit`` each ray stops at ``K`` hits.
    """
    cfg = config or simcore.SimConfig()
    r = wl.radius if radius is None else float(radius)
    f = formulation.lower().replace("-", "").replace("_", "")
    variant = "rc_cr" if early_exit else "rc_p"
    program = isa.assemble_ball_query(f, wl.k_max, variant)
    centers = wl.center_points
    if f == "pray":
        bvh = build_sphere_bvh(centers, r, leaf_size)
        res = simcore.run(program, bvh, wl.points, cfg, k_max=wl.k_max)
        ray_hits = res.results.hits
        per_sphere: list[list[int]] = [[] for _ in range(len(centers))]
        for ray, hs in enumerate(ray_hits):
            for s in hs:
                per_sphere[int(s)].append(ray)
        full = [np.asarray(v, dtype=np.int64) for v in per_sphere]
        groups = [v[: wl.k_max] for v in full]
        rays, spheres = len(wl.points), len(centers)
    elif f == "psphere":
        bvh = build_sphere_bvh(wl.points, r, leaf_size)
        res = simcore.run(program, bvh, centers, cfg, k_max=wl.k_max)
        full = None if early_exit else [np.asarray(h, dtype=np.int64) for h in res.results.hits]
        groups = [np.asarray(h[: wl.k_max], dtype=np.int64) for h in res.results.hits]
        rays, spheres = len(centers), len(wl.points)
    else:
        raise ValueError(f"unknown formulation {formulation!r}")
    nodes = res.trace.nodes_traversed
    sphere_tests = int(np.sum(res.trace.test_node_type == simcore.NODE_TYPE_CODES[isa.NodeType.SPHERE_LEAF]))
    return BallQueryResult(
        formulation=f,
        rays=rays,
        spheres=spheres,
        tree_depth=bvh.depth,
        nodes_per_ray=float(nodes.sum()) / rays,
        spheres_per_ray=sphere_tests / rays,
        total_nodes=int(nodes.sum()),
        groups=groups,
        full_sets=full,
        stats=res.stats,
        early_exit=early_exit,
    )


# --- MCL ray casting ----------------------------------------------------------------------------


def _floor_plan(dims, rng: np.random.Generator) -> np.ndarray:
    """Hall with outer walls, a few pillars, and a cluttered storeroom in one corner."""
    nx, ny, nz = dims
    occ = np.zeros(dims, dtype=bool)
    occ[0, :, :] = occ[-1, :, :] = True
    occ[:, 0, :] = occ[:, -1, :] = True
    occ[:, :, 0] = True  # floor
    mx, my = min(20, nx // 6), min(20, ny // 6)  # keep pillars off the walls
    for _ in range(6):
        x, y = rng.integers(mx, nx - mx), rng.integers(my, ny - my)
        occ[x : x + 2, y : y + 2, :] = True
    # storeroom walls with a doorway
    sx, sy = nx - nx // 4, ny - ny // 4
    occ[sx, sy:, :] = True
    occ[sx:, sy, :] = True
    occ[sx, sy + 3 : sy + 6, 1:] = False
    # clutter: shelves and boxes in the storeroom
    for _ in range(int(nx * ny / 60)):
        x = rng.integers(sx + 2, nx - 2)
        y = rng.integers(sy + 2, ny - 2)
        occ[x, y, 1 : rng.integers(2, nz)] = True
    return occ


@dataclass(eq=False)
class MclWorkload:
    grid: OccupancyGrid
    true_pose: np.ndarray  # (x, y, heading)
    particles: list[np.ndarray]  # per iteration (p, 3) array of (x, y, heading)
    rays_per_particle: int
    t_max: float
    sensor_height: float
    switch_threshold: float
    seed: int

    @property
    def iterations(self) -> int:
        return len(self.particles)

    def rays(self, it: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.particles[it]
        ang = np.linspace(0.0, 2 * np.pi, self.rays_per_particle, endpoint=False)
        theta = (p[:, 2:3] + ang[None, :]).reshape(-1)
        dirs = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=1)
        origins = np.repeat(np.c_[p[:, :2], np.full(len(p), self.sensor_height)], self.rays_per_particle, axis=0)
        return origins, dirs


def gen_mcl(
    seed: int,
    particles: int = 64,
    rays_per_particle: int = 180,
    iterations: int = 200,
    dims=(128, 128, 8),
    cell_size: float = 0.1,
    decay: float = 0.93,
    switch_threshold: float = 12.0,
    grid: OccupancyGrid | None = None,
) -> MclWorkload:
    """Converging-particle schedule: spread shrinks geometrically toward the true pose."""
    rng = np.random.default_rng(seed)
    if grid is None:
        grid = OccupancyGrid(np.zeros(3), cell_size, _floor_plan(dims, rng))
    dims = np.asarray(grid.dims)
    occ = grid.occupancy
    free_xy = ~occ[:, :, min(int(dims[2]) // 2, int(dims[2]) - 1)]
    ext = dims[:2] * grid.cell_size
    # true pose: a free cell inside the storeroom corner (or any free cell)
    corner = np.argwhere(free_xy[int(dims[0] * 0.8) :, int(dims[1] * 0.8) :])
    if len(corner):
        c = corner[len(corner) // 2] + [int(dims[0] * 0.8), int(dims[1] * 0.8)]
    else:
        free = np.argwhere(free_xy)
        c = free[len(free) // 2] if len(free) else np.asarray(dims[:2]) // 2
    true = np.array([(c[0] + 0.5) * grid.cell_size, (c[1] + 0.5) * grid.cell_size, rng.uniform(0, 2 * np.pi)])
    sched = []
    spread = float(ext.max())
    for _ in range(iterations):
        pts = np.empty((particles, 3))
        filled = 0
        tries = 0
        while filled < particles:
            tries += 1
            m = particles - filled
            if spread >= float(ext.max()):
                xy = rng.uniform(0, 1, size=(m, 2)) * ext
            else:
                xy = true[:2] + rng.normal(0.0, spread, size=(m, 2))
            xy = np.clip(xy, 0, ext - 1e-9)
            cell = np.floor(xy / grid.cell_size).astype(np.int64)
            ok = free_xy[cell[:, 0], cell[:, 1]] | (tries > 50)
            xy = xy[ok]
            pts[filled : filled + len(xy), :2] = xy
            filled += len(xy)
        pts[:, 2] = true[2] + rng.normal(0.0, min(np.pi, spread), size=particles)
        sched.append(pts)
        spread *= decay
    height = (min(int(dims[2]) // 2, int(dims[2]) - 1) + 0.5) * grid.cell_size
    return MclWorkload(grid, true, sched, rays_per_particle, float(ext.max()), height, switch_threshold, seed)


@dataclass
class MclResult:
    rows: list[dict[str, Any]]
    totals: dict[str, float]
    switches: int


def run_mcl(
    wl: MclWorkload,
    config: simcore.SimConfig | None = None,
    host_cost_per_step: float = 1.0,
    sim_launch_cycles: float = 100000.0,
    variant: str = "rc_cr",
) -> MclResult:
    """Cost of every iteration on both paths plus the three policies.

    The simulator path costs its simulated cycles plus a fixed launch
    overhead; the host path costs rays x average DDA steps x a per-step
    constant.  The dynamic policy runs iteration ``i`` on the simulator iff
    the previous iteration averaged at least ``switch_threshold`` nodes per
    ray; the first iteration runs on the simulator.

    The default launch overhead puts the break-even point between the two
    paths near the default threshold of 12 steps per ray for the default
    ray fan.
    """
    cfg = config or simcore.SimConfig()
    program = isa.assemble_grid_step(variant)
    rows = []
    prev_avg = None
    totals = {"dynamic": 0.0, "always_sim": 0.0, "always_host": 0.0}
    switches = 0
    prev_choice = None
    for it in range(wl.iterations):
        origins, dirs = wl.rays(it)
        res = simcore.run(program, wl.grid, (origins, dirs), cfg, t_max=wl.t_max)
        steps = res.results.steps
        avg = float(steps.mean())
        cost_sim = res.stats.total_cycles + sim_launch_cycles
        cost_host = len(steps) * avg * host_cost_per_step
        choice = "sim" if prev_avg is None or prev_avg >= wl.switch_threshold else "host"
        if prev_choice is not None and choice != prev_choice:
            switches += 1
        prev_choice = choice
        chosen = cost_sim if choice == "sim" else cost_host
        totals["dynamic"] += chosen
        totals["always_sim"] += cost_sim
        totals["always_host"] += cost_host
        rows.append(
            {
                "iteration": it,
                "rays": len(steps),
                "avg_nodes_per_ray": avg,
                "hit_fraction": float(res.results.hit.mean()),
                "cost_sim": cost_sim,
                "cost_host": cost_host,
                "path": choice,
                "cost_chosen": chosen,
            }
        )
        prev_avg = avg
    return MclResult(rows, totals, switches)


def ray_cast_ref(grid: OccupancyGrid, origins, dirs, t_max: float, tol: float = 1e-9):
    """Brute-force ray casting: slab test against every occupied cell, earliest entry wins.

    Returns ``(cells, ambiguous)``: the hit cell per ray (-1s for a miss) and
    a flag for rays whose answer hinges on a measure-zero event (two cells
    entered at the same parameter, a grazing touch, or an entry at ``t_max``).
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    occ = np.argwhere(grid.occupancy)
    lo = grid.origin + occ * grid.cell_size
    hi = lo + grid.cell_size
    cells = np.full((len(o), 3), -1, dtype=np.int64)
    ambiguous = np.zeros(len(o), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(len(o)):
            inv = 1.0 / d[i]
            ta = (lo - o[i]) * inv
            tb = (hi - o[i]) * inv
            # zero direction components: inside the slab means unbounded, outside means never
            flat = d[i] == 0.0
            inside = (o[i] >= lo) & (o[i] <= hi)
            ta[:, flat] = np.where(inside[:, flat], -np.inf, np.inf)
            tb[:, flat] = np.inf
            t0 = np.maximum(np.minimum(ta, tb).max(axis=1), 0.0)
            t1 = np.minimum(np.maximum(ta, tb).min(axis=1), t_max)
            hit = t0 <= t1
            if not hit.any():
                continue
            cand = np.flatnonzero(hit)
            k = cand[np.argmin(t0[cand])]
            cells[i] = occ[k]
            near = np.abs(t0[cand] - t0[k]) <= tol
            ambiguous[i] = near.sum() > 1 or t1[k] - t0[k] <= tol or abs(t0[k] - t_max) <= tol
    return cells, ambiguous


def collision_oracle_check(wl: CollisionWorkload, collides: np.ndarray, limit: int | None = None) -> list[int]:
    """Indices of queries whose simulated boolean differs from the tree oracle."""
    bad = []
    for i, o in enumerate(wl.obbs[:limit]):
        ref, _ = oracle.collide_ref(o, wl.octree)
        if bool(collides[i]) != ref:
            bad.append(i)
    return bad


def ball_query_oracle_check(
    wl: BallQueryWorkload,
    result: BallQueryResult,
    radius: float | None = None,
    sample: int | None = 1000,
    seed: int = 0,
    band: float = oracle.MARGIN_BAND,
) -> list[int]:
    """Indices of sampled centers whose group disagrees with brute-force radius search.

    Points within ``band`` of the radius may fall either way (32-bit
    datapath against the 64-bit reference).  P-Sphere groups may be any
    ``K`` in-radius points; P-Ray groups must be the ``K`` smallest
    in-radius point indices.
    """
    r = wl.radius if radius is None else float(radius)
    eps = band * max(1.0, r)
    n = len(wl.centers)
    idx = np.arange(n)
    if sample is not None and sample < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=sample, replace=False))
    bad = []
    for c in idx:
        center = wl.points[wl.centers[c]]
        group = np.asarray(result.groups[c], dtype=np.int64)
        loose = oracle.radius_search_ref(wl.points, center, r + eps)
        strict = oracle.radius_search_ref(wl.points, center, max(r - eps, 0.0))
        ok = len(np.unique(group)) == len(group) <= wl.k_max and np.isin(group, loose).all()
        if ok and len(group) < wl.k_max:
            ok = np.isin(strict, group).all()
        if ok and len(group) == wl.k_max:
            ok = len(loose) >= wl.k_max
        if ok and result.formulation == "pray":
            ok = bool(np.all(np.diff(group) > 0)) and (
                len(group) == 0 or np.isin(strict[strict < group[-1]], group).all()
            )
        if not ok:
            bad.append(int(c))
    return bad
