"""Occupancy octrees built from point clouds, and the scene file format.

Every octree cell is Empty, Full or Partial.  Partial cells split into eight
children until the depth limit, where any occupied cell becomes Full.
"""

import tempfile
from pathlib import Path

import numpy as np

from robocore import scene, workloads
from robocore.scene import Occupancy

# A synthetic shelf scene: points sampled on the surfaces of its boards.
wl = workloads.gen_env("cubby", seed=4, n_points=16384, n_obbs=128, max_depth=6)
tree = wl.octree
print(f"{len(wl.points)} points -> {tree.num_nodes} nodes, depth {tree.tree_depth()}")
for state in Occupancy:
    print(f"  {state.name:8s} {int(np.sum(tree.occupancy == state))}")

# The same occupancy can be read back cell by cell at any depth.
cells = scene.cell_coords(wl.points.points, tree.bounds, 3)
c = tuple(int(v) for v in cells[0])
print("cell", c, "at depth 3 is", tree.cell_occupancy(3, c).name)

# A sphere BVH over the same points, as used for neighbor search.
bvh = scene.build_sphere_bvh(wl.points.points, radius=0.02, leaf_size=8)
hits = scene.bvh_radius_search(bvh, wl.points.points[0])
print(f"BVH depth {bvh.depth}; {len(hits)} points within 2 cm of the first point")

# Scenes round-trip through a deterministic JSON file.
with tempfile.TemporaryDirectory() as d:
    path = scene.save_scene(wl.to_scene(), Path(d) / "cubby.scene.json")
    back = workloads.CollisionWorkload.from_scene(scene.load_scene(path))
    print(f"{path.name}: {path.stat().st_size // 1024} KiB, octree digest match:",
          back.octree.digest() == tree.digest())
