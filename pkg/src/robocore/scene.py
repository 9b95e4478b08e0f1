"""Spatial indexes: occupancy octree, sphere BVH, occupancy grid, scene files."""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .geom import Aabb, Obb

SCENE_FORMAT = "robocore-scene"
SCENE_VERSION = 1
SCENE_SUFFIX = ".scene.json"


class SceneFormatError(ValueError):
    """Malformed or incompatible scene file."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class Occupancy(enum.IntEnum):
    EMPTY = 0
    FULL = 1
    PARTIAL = 2


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points are held as float32, the precision they are stored with."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)

    def bounds(self, inflate: float = 0.01) -> Aabb:
        """Tight AABB inflated by ``inflate`` of its size on each axis."""
        if len(self.points) == 0:
            return Aabb(np.zeros(3), np.full(3, 0.5))
        p = self.points.astype(np.float64)
        lo, hi = p.min(axis=0), p.max(axis=0)
        half = (hi - lo) * 0.5 * (1.0 + inflate)
        half = np.maximum(half, 1e-6)
        return Aabb((lo + hi) * 0.5, half)


# --- octree -------------------------------------------------------------------


def _morton3(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, depth: int) -> np.ndarray:
    code = np.zeros(ix.shape, dtype=np.int64)
    for bit in range(depth):
        code |= ((ix >> bit) & 1) << (3 * bit)
        code |= ((iy >> bit) & 1) << (3 * bit + 1)
        code |= ((iz >> bit) & 1) << (3 * bit + 2)
    return code


def cell_coords(points: np.ndarray, bounds: Aabb, depth: int) -> np.ndarray:
    """Integer cell coordinates of points at ``depth``; upper faces clamp inward."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = 1 << depth
    size = (bounds.hi - bounds.lo) / n
    idx = np.floor((p - bounds.lo) / size).astype(np.int64)
    return np.clip(idx, 0, n - 1)


@dataclass(frozen=True, eq=False)
class Octree:
    """Flat octree; the eight children of a Partial node are stored contiguously.

    Child ``k`` covers the octant whose x/y/z upper halves are selected by
    bits 0/1/2 of ``k``.
    """

    bounds: Aabb
    max_depth: int
    occupancy: np.ndarray  # uint8 Occupancy per node
    first_child: np.ndarray  # int32, -1 unless Partial
    depth: np.ndarray  # uint8
    coords: np.ndarray  # (n, 3) int64 cell coordinates at the node's depth

    NODE_BYTES = 32

    def __len__(self):
        return len(self.occupancy)

    @property
    def num_nodes(self) -> int:
        return len(self.occupancy)

    def node_aabb(self, node: int) -> Aabb:
        c, h = self.node_boxes(np.array([node]))
        return Aabb(c[0], h[0])

    def node_boxes(self, nodes) -> tuple[np.ndarray, np.ndarray]:
        """Centers and half extents of ``nodes`` (arrays of shape (n, 3))."""
        nodes = np.asarray(nodes, dtype=np.int64)
        size = (self.bounds.hi - self.bounds.lo)[None, :] / (
            np.left_shift(1, self.depth[nodes].astype(np.int64))[:, None]
        )
        lo = self.bounds.lo + size * self.coords[nodes]
        return lo + size * 0.5, size * 0.5

    def children(self, node: int) -> range:
        fc = int(self.first_child[node])
        return range(fc, fc + 8) if fc >= 0 else range(0)

    def full_leaves(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy == Occupancy.FULL)

    def occupied_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        return self.node_boxes(self.full_leaves())

    def cell_occupancy(self, depth: int, ijk) -> Occupancy:
        """Occupancy of the cell at ``depth`` with integer coords ``ijk``."""
        ijk = np.asarray(ijk, dtype=np.int64)
        node = 0
        for d in range(depth):
            occ = Occupancy(int(self.occupancy[node]))
            if occ != Occupancy.PARTIAL:
                return occ
            shift = depth - d - 1
            bits = (ijk >> shift) & 1
            node = int(self.first_child[node]) + int(bits[0] | (bits[1] << 1) | (bits[2] << 2))
        return Occupancy(int(self.occupancy[node]))

    def tree_depth(self) -> int:
        return int(self.depth.max()) if len(self.depth) else 0

    def to_bytes(self) -> bytes:
        header = np.array([self.max_depth, len(self)], dtype="<i8").tobytes()
        box = np.concatenate([self.bounds.center, self.bounds.half_extents]).astype("<f8").tobytes()
        return (
            header
            + box
            + self.occupancy.astype("<u1").tobytes()
            + self.first_child.astype("<i4").tobytes()
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_octree(
    pc: PointCloud,
    bounds: Aabb | None = None,
    max_depth: int = 8,
    full_threshold: float = 1.0,
) -> Octree:
    """Occupancy octree over ``pc``.

    A max-depth cell holding a point is Full.  A coarser cell is Full when at
    least ``full_threshold`` of its volume is Full (computed recursively) and
    Partial when anything below it is occupied.
    """
    if not 1 <= max_depth <= 16:
        raise ValueError("max_depth must be in [1, 16]")
    if not 0.0 < full_threshold <= 1.0:
        raise ValueError("full_threshold must be in (0, 1]")
    if bounds is None:
        bounds = pc.bounds()
    pts = pc.points.astype(np.float64)
    if len(pts):
        outside = np.any((pts < bounds.lo) | (pts > bounds.hi), axis=1)
        if outside.any():
            bad = int(np.flatnonzero(outside)[0])
            raise ValueError(f"point {bad} at {pts[bad].tolist()} lies outside the octree bounds")

    cells = cell_coords(pts, bounds, max_depth)
    codes = np.unique(_morton3(cells[:, 0], cells[:, 1], cells[:, 2], max_depth)) if len(pts) else np.zeros(0, np.int64)

    # Recursive classification over the sorted Morton codes.  Returns
    # (occupancy, full_fraction, children) with children a list of 8 entries.
    def classify(lo_i: int, hi_i: int, d: int):
        if hi_i == lo_i:
            return (Occupancy.EMPTY, 0.0, None)
        if d == max_depth:
            return (Occupancy.FULL, 1.0, None)
        shift = 3 * (max_depth - d - 1)
        octant = (codes[lo_i:hi_i] >> shift) & 7
        splits = np.searchsorted(octant, np.arange(9)) + lo_i
        kids = [classify(int(splits[k]), int(splits[k + 1]), d + 1) for k in range(8)]
        frac = sum(k[1] for k in kids) / 8.0
        if frac >= full_threshold:
            return (Occupancy.FULL, frac, None)
        return (Occupancy.PARTIAL, frac, kids)

    root = classify(0, len(codes), 0)

    occ: list[int] = []
    first: list[int] = []
    dep: list[int] = []
    coords: list[tuple[int, int, int]] = []
    # Breadth-first layout so that each sibling group is contiguous.
    queue = [(root, 0, (0, 0, 0))]
    occ.append(int(root[0]))
    first.append(-1)
    dep.append(0)
    coords.append((0, 0, 0))
    head = 0
    while head < len(queue):
        (node, d, ijk) = queue[head]
        idx = head
        head += 1
        if node[0] != Occupancy.PARTIAL:
            continue
        first[idx] = len(occ)
        for k, child in enumerate(node[2]):
            cijk = (2 * ijk[0] + (k & 1), 2 * ijk[1] + ((k >> 1) & 1), 2 * ijk[2] + ((k >> 2) & 1))
            queue.append((child, d + 1, cijk))
            occ.append(int(child[0]))
            first.append(-1)
            dep.append(d + 1)
            coords.append(cijk)

    return Octree(
        bounds=bounds,
        max_depth=max_depth,
        occupancy=np.asarray(occ, dtype=np.uint8),
        first_child=np.asarray(first, dtype=np.int32),
        depth=np.asarray(dep, dtype=np.uint8),
        coords=np.asarray(coords, dtype=np.int64).reshape(-1, 3),
    )


def octree_from_boxes(boxes: list[Aabb], bounds: Aabb, max_depth: int = 8, samples_per_cell: int = 2) -> Octree:
    """Octree of a set of solid AABBs, by sampling their volume at cell resolution."""
    n = 1 << max_depth
    size = (bounds.hi - bounds.lo) / n
    pts = []
    for b in boxes:
        lo = np.maximum(b.lo, bounds.lo)
        hi = np.minimum(b.hi, bounds.hi)
        if np.any(hi < lo):
            continue
        axes = [
            np.linspace(lo[k], hi[k], max(2, int(math.ceil((hi[k] - lo[k]) / size[k] * samples_per_cell)) + 1))
            for k in range(3)
        ]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        pts.append(g)
    cloud = PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))
    return build_octree(cloud, bounds, max_depth)


# --- sphere BVH -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SphereBvh:
    """Binary BVH over equal-radius spheres, nodes in depth-first preorder.

    ``left``/``right`` are -1 for leaves; a leaf covers
    ``order[leaf_start:leaf_start + leaf_count]``.
    """

    centers: np.ndarray  # (n, 3) float64
    radius: float
    leaf_size: int
    lo: np.ndarray  # (m, 3)
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    order: np.ndarray
    node_depth: np.ndarray

    NODE_BYTES = 32
    SPHERE_BYTES = 16

    @property
    def num_nodes(self) -> int:
        return len(self.left)

    @property
    def depth(self) -> int:
        return int(self.node_depth.max()) if len(self.node_depth) else 0

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_spheres(self, node: int) -> np.ndarray:
        s = int(self.leaf_start[node])
        return self.order[s : s + int(self.leaf_count[node])]

    def to_bytes(self) -> bytes:
        parts = [
            np.array([len(self.centers), self.leaf_size], dtype="<i8").tobytes(),
            np.array([self.radius], dtype="<f8").tobytes(),
            self.lo.astype("<f8").tobytes(),
            self.hi.astype("<f8").tobytes(),
            self.left.astype("<i4").tobytes(),
            self.right.astype("<i4").tobytes(),
            self.order.astype("<i4").tobytes(),
        ]
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_sphere_bvh(centers, radius: float, leaf_size: int = 8) -> SphereBvh:
    """Top-down median split on the longest axis of each node's bounds."""
    centers = np.ascontiguousarray(np.asarray(centers, dtype=np.float64).reshape(-1, 3))
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    n = len(centers)
    if n == 0:
        raise ValueError("cannot build a BVH over zero spheres")

    order = np.arange(n, dtype=np.int64)
    lo_l, hi_l, left_l, right_l, start_l, count_l, depth_l = [], [], [], [], [], [], []

    # explicit stack of (start, end, depth, parent, is_right)
    stack = [(0, n, 0, -1, False)]
    while stack:
        s, e, d, parent, is_right = stack.pop()
        idx = len(left_l)
        if parent >= 0:
            (right_l if is_right else left_l)[parent] = idx
        sub = centers[order[s:e]]
        lo = sub.min(axis=0) - radius
        hi = sub.max(axis=0) + radius
        lo_l.append(lo)
        hi_l.append(hi)
        left_l.append(-1)
        right_l.append(-1)
        depth_l.append(d)
        if e - s <= leaf_size:
            start_l.append(s)
            count_l.append(e - s)
            continue
        start_l.append(-1)
        count_l.append(0)
        axis = int(np.argmax(hi - lo))
        perm = np.argsort(sub[:, axis], kind="stable")
        order[s:e] = order[s:e][perm]
        mid = s + (e - s) // 2
        # push right first so the left subtree directly follows its parent
        stack.append((mid, e, d + 1, idx, True))
        stack.append((s, mid, d + 1, idx, False))

    return SphereBvh(
        centers=centers,
        radius=float(radius),
        leaf_size=leaf_size,
        lo=np.asarray(lo_l),
        hi=np.asarray(hi_l),
        left=np.asarray(left_l, dtype=np.int32),
        right=np.asarray(right_l, dtype=np.int32),
        leaf_start=np.asarray(start_l, dtype=np.int64),
        leaf_count=np.asarray(count_l, dtype=np.int64),
        order=order,
        node_depth=np.asarray(depth_l, dtype=np.int32),
    )


def bvh_radius_search(bvh: SphereBvh, point) -> np.ndarray:
    """All sphere indices whose sphere contains ``point`` (sorted)."""
    p = np.asarray(point, dtype=np.float64)
    r2 = bvh.radius * bvh.radius
    hits: list[np.ndarray] = []
    stack = [0]
    while stack:
        node = stack.pop()
        if np.any(p < bvh.lo[node]) or np.any(p > bvh.hi[node]):
            continue
        if bvh.left[node] < 0:
            idx = bvh.leaf_spheres(node)
            d = bvh.centers[idx] - p
            hits.append(idx[np.einsum("ij,ij->i", d, d) <= r2])
        else:
            stack.append(int(bvh.right[node]))
            stack.append(int(bvh.left[node]))
    return np.sort(np.concatenate(hits)) if hits else np.zeros(0, dtype=np.int64)


# --- occupancy grid -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: np.ndarray
    cell_size: float
    occupancy: np.ndarray  # bool (nx, ny, nz)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def bounds(self) -> Aabb:
        return Aabb.from_bounds(self.origin, self.origin + self.cell_size * np.asarray(self.dims))

    def cell_of(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.cell_size).astype(np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, OccupancyGrid)
            and np.array_equal(self.origin, other.origin)
            and self.cell_size == other.cell_size
            and np.array_equal(self.occupancy, other.occupancy)
        )


def build_grid(pc: PointCloud, cell_size: float, origin=None, dims=None) -> OccupancyGrid:
    """Voxel grid; a cell is occupied iff at least one point falls in it."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if origin is None or dims is None:
        box = pc.bounds()
        origin = box.lo if origin is None else origin
        if dims is None:
            dims = np.maximum(np.ceil((box.hi - np.asarray(origin)) / cell_size).astype(int), 1)
    origin = np.asarray(origin, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    occ = np.zeros(dims, dtype=bool)
    if len(pc):
        idx = np.floor((pc.points.astype(np.float64) - origin) / cell_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        idx = idx[inside]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(origin, float(cell_size), occ)


# --- scene files -------------------------------------------------------------------


@dataclass(eq=False)
class Scene:
    points: PointCloud
    obbs: list[Obb] = field(default_factory=list)
    grid: OccupancyGrid | None = None
    params: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    workload: dict[str, Any] | None = None

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.points == other.points
            and len(self.obbs) == len(other.obbs)
            and all(a == b for a, b in zip(self.obbs, other.obbs))
            and self.grid == other.grid
            and self.params == other.params
            and self.seed == other.seed
            and self.workload == other.workload
        )


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _unb64(text: str, dtype: str, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise SceneFormatError(f"invalid base64 in {what}: {exc}") from None
    itemsize = np.dtype(dtype).itemsize
    if len(raw) % itemsize:
        raise SceneFormatError(f"{what} block length {len(raw)} is not a multiple of {itemsize}")
    return np.frombuffer(raw, dtype=dtype).copy()


def obb_to_json(o: Obb) -> dict[str, Any]:
    return {
        "center": o.center.tolist(),
        "half_extents": o.half_extents.tolist(),
        "axes": o.axes.reshape(-1).tolist(),
    }


def obb_from_json(d: dict[str, Any]) -> Obb:
    return Obb(d["center"], d["half_extents"], np.asarray(d["axes"], dtype=np.float64).reshape(3, 3))


def scene_to_json(scene: Scene) -> str:
    doc: dict[str, Any] = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "meta": {"seed": scene.seed, "params": scene.params},
        "points": {
            "count": len(scene.points),
            "dtype": "<f4",
            "data": _b64(scene.points.points.astype("<f4")),
        },
        "obbs": [obb_to_json(o) for o in scene.obbs],
        "grid": None,
        "workload": scene.workload,
    }
    if scene.grid is not None:
        g = scene.grid
        doc["grid"] = {
            "origin": g.origin.tolist(),
            "cell_size": g.cell_size,
            "dims": list(g.dims),
            "bits": _b64(np.packbits(g.occupancy.reshape(-1).astype(np.uint8))),
        }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def scene_from_json(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict) or doc.get("format") != SCENE_FORMAT:
        raise SceneFormatError("not a robocore scene file")
    if doc.get("version") != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {doc.get('version')!r} (expected {SCENE_VERSION})")
    try:
        pts_doc = doc["points"]
        if pts_doc.get("dtype") != "<f4":
            raise SceneFormatError(f"unsupported point dtype {pts_doc.get('dtype')!r}")
        flat = _unb64(pts_doc["data"], "<f4", "points")
        if len(flat) != 3 * int(pts_doc["count"]):
            raise SceneFormatError(f"points block holds {len(flat) // 3} points, header says {pts_doc['count']}")
        points = PointCloud(flat.reshape(-1, 3))
        obbs = [obb_from_json(o) for o in doc.get("obbs", [])]
        grid = None
        if doc.get("grid") is not None:
            g = doc["grid"]
            dims = tuple(int(d) for d in g["dims"])
            bits = np.unpackbits(_unb64(g["bits"], "u1", "grid"))[: int(np.prod(dims))]
            grid = OccupancyGrid(g["origin"], float(g["cell_size"]), bits.astype(bool).reshape(dims))
        meta = doc.get("meta", {})
        return Scene(
            points=points,
            obbs=obbs,
            grid=grid,
            params=meta.get("params", {}),
            seed=meta.get("seed"),
            workload=doc.get("workload"),
        )
    except SceneFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"malformed scene content: {exc!r}") from None


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(scene_to_json(scene), encoding="utf-8")
    tmp.replace(path)
    return path


def load_scene(path) -> Scene:
    return scene_from_json(Path(path).read_text(encoding="utf-8"))
