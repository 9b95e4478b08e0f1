"""Staged separating-axis test between an oriented box and an axis-aligned box.

The test checks 15 candidate axes in a fixed order and stops at the first one
that separates the boxes.  Optional sphere checks in front can settle easy
pairs before any axis is tried.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from robocore import geom
from robocore.geom import Aabb, ExitStage, Obb

box = Aabb((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))

# A cube turned 45 degrees about z, sitting just off the box's corner.
turned = Obb((1.1, 1.1, 0.0), (0.5, 0.5, 0.5), Rotation.from_euler("z", 45, degrees=True).as_matrix())
r = geom.sat_staged(turned, box, enable_spheres=False)
print("turned cube:", r.collides, r.exit.label, "after", r.axes_tested, "axes")

# Far away: the bounding sphere alone rules the pair out.
far = turned.translated((5.0, 0.0, 0.0))
print("far cube:", geom.sat_staged(far, box, enable_spheres=True).exit.label)

# Deep inside: the inscribed sphere already touches the box.
inside = Obb((0.1, 0.0, 0.0), (0.2, 0.2, 0.2), np.eye(3))
print("small cube inside:", geom.sat_staged(inside, box, enable_spheres=True).exit.label)

# Touching faces count as a collision.
touching = Obb((1.0, 0.0, 0.0), (0.5, 0.5, 0.5), np.eye(3))
print("touching faces collide:", geom.sat_full(touching, box))

# Where do random pairs exit?  Count the stages over a few thousand pairs.
rng = np.random.default_rng(0)
counts = {}
for _ in range(3000):
    o = Obb(rng.uniform(-1, 1, 3), rng.uniform(0.05, 0.5, 3), Rotation.random(random_state=rng).as_matrix())
    b = Aabb(rng.uniform(-1, 1, 3), rng.uniform(0.05, 0.5, 3))
    stage = geom.sat_staged(o, b, enable_spheres=True).exit
    counts[stage] = counts.get(stage, 0) + 1
for stage in ExitStage:
    if stage in counts:
        print(f"  {stage.label:24s} {counts[stage]:5d}")

# The signed margin says how far a pair is from flipping its answer.
print("margin of the turned cube:", round(geom.signed_margin(turned, box), 4))
