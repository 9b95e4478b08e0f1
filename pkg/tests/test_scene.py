import hashlib
import json

import numpy as np
import pytest

from robocore import isa, oracle, scene, simcore, workloads
from robocore.geom import Aabb
from robocore.scene import Occupancy, PointCloud

from conftest import FIXTURES

GOLDEN = FIXTURES / "golden_tabletop.scene.json"
GOLDEN_SHA256 = "d200c675ed2d3949bd358bdcb9d50793543b2c8e87aa515ab63262668570fa76"
# reference-walk results for the golden OBBs, frozen when the fixture was made
GOLDEN_COLLIDES = [1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
GOLDEN_NODES = [5, 12, 5, 7, 3, 1, 5, 5, 3, 3, 7, 2, 2, 3, 3, 4, 3, 3, 3, 4, 5, 3, 5, 5, 5, 7, 5, 8, 9, 6, 6, 6]


def count_nodes(pts, lo, hi, depth, max_depth, root_hi):
    """Independent node count by recursing over the point partition.

    Cells are half-open except on the root's upper faces.
    """
    if len(pts) == 0 or depth == max_depth:
        return 1
    mid = (lo + hi) / 2
    total = 1
    for k in range(8):
        bits = np.array([k & 1, (k >> 1) & 1, (k >> 2) & 1], dtype=bool)
        clo = np.where(bits, mid, lo)
        chi = np.where(bits, hi, mid)
        upper_ok = (pts < chi) | ((chi == root_hi) & (pts <= chi))
        sel = np.all((pts >= clo) & upper_ok, axis=1)
        total += count_nodes(pts[sel], clo, chi, depth + 1, max_depth, root_hi)
    return total


# --- octree ------------------------------------------------------------------------------------------


def test_single_point_chain():
    pc = PointCloud(np.array([[0.3, 0.3, 0.3]]))
    t = scene.build_octree(pc, Aabb((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)), max_depth=4)
    # root + 4 levels of 8 children
    assert t.num_nodes == 1 + 4 * 8
    assert len(t.full_leaves()) == 1
    assert t.tree_depth() == 4
    assert t.occupancy[t.full_leaves()[0]] == Occupancy.FULL


def test_empty_cloud_gives_empty_root():
    t = scene.build_octree(PointCloud(np.zeros((0, 3))), Aabb((0, 0, 0), (1, 1, 1)), max_depth=3)
    assert t.num_nodes == 1 and t.occupancy[0] == Occupancy.EMPTY


def test_point_outside_bounds_rejected():
    with pytest.raises(ValueError):
        scene.build_octree(PointCloud(np.array([[5.0, 0, 0]])), Aabb((0, 0, 0), (1, 1, 1)), max_depth=3)


def test_node_count_matches_recursive_oracle():
    rng = np.random.default_rng(3)
    pts = workloads.sample_box_surfaces(workloads.env_boxes("cubby", rng), 65536, rng)
    pc = PointCloud(pts)
    box = pc.bounds()
    t = scene.build_octree(pc, box, max_depth=8)
    p = pc.points.astype(np.float64)
    assert t.num_nodes == count_nodes(p, box.lo, box.hi, 0, 8, box.hi)


def test_octree_invariants(small_env):
    t = small_env.octree
    partial = t.occupancy == Occupancy.PARTIAL
    assert np.all((t.first_child >= 0) == partial)
    assert np.all(t.occupancy[t.depth == t.max_depth] != Occupancy.PARTIAL)
    for node in np.flatnonzero(partial)[:200]:
        pc, ph = t.node_boxes([node])
        cc, ch = t.node_boxes(list(t.children(node)))
        assert np.allclose(ch, ph / 2)
        assert np.allclose(np.sort(np.abs(cc - pc), axis=0), np.tile(ph / 2, (8, 1)))


def test_cell_occupancy_matches_points(small_env):
    t = small_env.octree
    pts = small_env.points.points.astype(np.float64)
    for depth in (1, 3, t.max_depth):
        cells = scene.cell_coords(pts, t.bounds, depth)
        occupied = {tuple(c) for c in cells}
        for c in list(occupied)[:50]:
            assert t.cell_occupancy(depth, c) != Occupancy.EMPTY
        rng = np.random.default_rng(depth)
        for c in rng.integers(0, 2**depth, size=(50, 3)):
            expected = tuple(c) in occupied
            assert (t.cell_occupancy(depth, c) != Occupancy.EMPTY) == expected


def test_octree_from_boxes_marks_box_cells():
    boxes = [Aabb((0.25, 0.25, 0.25), (0.1, 0.1, 0.1))]
    t = scene.octree_from_boxes(boxes, Aabb((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)), max_depth=4)
    c, h = t.occupied_boxes()
    assert len(c) > 0
    assert np.all(np.abs(c - 0.25) <= 0.1 + h + 1e-12)


# --- sphere BVH --------------------------------------------------------------------------------------


def test_bvh_single_sphere_is_leaf():
    b = scene.build_sphere_bvh(np.zeros((1, 3)), 0.1)
    assert b.num_nodes == 1 and b.is_leaf(0) and b.depth == 0


def test_bvh_invariants_and_depth():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(4096, 3))
    b = scene.build_sphere_bvh(pts, 0.02, leaf_size=8)
    assert sorted(b.order.tolist()) == list(range(4096))
    assert b.depth <= int(np.ceil(np.log2(4096 / 8))) + 1
    for node in range(b.num_nodes):
        if b.is_leaf(node):
            s = b.leaf_spheres(node)
            assert 1 <= len(s) <= 8
            assert np.all(pts[s] - 0.02 >= b.lo[node] - 1e-12) and np.all(pts[s] + 0.02 <= b.hi[node] + 1e-12)
        else:
            for child in (b.left[node], b.right[node]):
                assert np.all(b.lo[child] >= b.lo[node] - 1e-12) and np.all(b.hi[child] <= b.hi[node] + 1e-12)


@pytest.mark.parametrize("n,expected", [(512, 6), (65536, 13)])
def test_bvh_depth_near_log2(n, expected):
    rng = np.random.default_rng(n)
    b = scene.build_sphere_bvh(rng.uniform(0, 1, size=(n, 3)), 0.01, 8)
    assert abs(b.depth - expected) <= 2


def test_bvh_radius_search_equals_brute_force():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, size=(3000, 3))
    b = scene.build_sphere_bvh(pts, 0.07, 8)
    for q in rng.uniform(0, 1, size=(1000, 3)):
        assert np.array_equal(scene.bvh_radius_search(b, q), oracle.radius_search_ref(pts, q, 0.07))


# --- grid ---------------------------------------------------------------------------------------------


def test_build_grid_marks_point_cells():
    pc = PointCloud(np.array([[0.05, 0.05, 0.05], [0.95, 0.15, 0.05]]))
    g = scene.build_grid(pc, 0.1, origin=(0, 0, 0), dims=(10, 10, 1))
    assert g.occupancy.sum() == 2
    assert g.occupancy[0, 0, 0] and g.occupancy[9, 1, 0]
    assert tuple(g.cell_of((0.95, 0.15, 0.05))) == (9, 1, 0)


# --- serialization -----------------------------------------------------------------------------------


def test_scene_roundtrip(tmp_path, small_env):
    sc = small_env.to_scene()
    path = scene.save_scene(sc, tmp_path / "a.scene.json")
    back = scene.load_scene(path)
    assert back == sc
    scene.save_scene(back, tmp_path / "b.scene.json")
    assert (tmp_path / "a.scene.json").read_bytes() == (tmp_path / "b.scene.json").read_bytes()


def test_grid_scene_roundtrip(tmp_path):
    occ = np.zeros((4, 5, 2), dtype=bool)
    occ[1, 2, 0] = True
    sc = scene.Scene(points=PointCloud(np.zeros((0, 3))), grid=scene.OccupancyGrid((0, 0, 0), 0.5, occ), seed=1)
    assert scene.load_scene(scene.save_scene(sc, tmp_path / "g.scene.json")) == sc


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        json.dumps({"format": "something-else"}),
        json.dumps({"format": "robocore-scene", "version": 999}),
    ],
)
def test_malformed_scene_rejected(text):
    with pytest.raises(scene.SceneFormatError):
        scene.scene_from_json(text)


def test_golden_fixture_hash_and_results():
    assert hashlib.sha256(GOLDEN.read_bytes()).hexdigest() == GOLDEN_SHA256
    wl = workloads.CollisionWorkload.from_scene(scene.load_scene(GOLDEN))
    res = simcore.run(isa.assemble_sact("rc_cr_cu"), wl.octree, wl.obbs)
    assert res.results.astype(int).tolist() == GOLDEN_COLLIDES
    assert res.nodes_traversed.tolist() == GOLDEN_NODES


def test_golden_fixture_regenerates_identically(tmp_path):
    wl = workloads.gen_env("tabletop", 7, n_points=2048, n_obbs=32, max_depth=5)
    path = scene.save_scene(wl.to_scene(), tmp_path / "g.scene.json")
    assert hashlib.sha256(path.read_bytes()).hexdigest() == GOLDEN_SHA256
