"""Intersection programs: the μop sequences each accelerator variant executes.

A variant combines an early-exit style (none, predication or conditional
return) with a unit style (scalar OP units, clusters or fused collision
units).  The assembler emits the program and its destination table, and the
validator checks routing and register use.
"""

from dataclasses import replace

import numpy as np

from robocore import isa
from robocore.geom import Aabb, Obb

for name in ("tta+", "rc_p", "rc_cr", "rc_cr_cu"):
    for spheres in (False, True):
        p = isa.assemble_sact(name, spheres)
        kinds = ", ".join(f"{k.value} {n}" for k, n in sorted(p.kind_counts().items(), key=lambda kv: kv[0].value))
        print(f"{p.name:28s} {p.test_uop_count:3d} uops  [{kinds}]")

# The listing shows the destination table; compares in conditional-return
# programs carry a second route to the RETURN unit.
print()
print("\n".join(isa.assemble_sact("rc_cr_cu").dump().splitlines()[:8]))

# Validation catches malformed programs, for example a fused axis test on a
# variant without collision units.
bad = replace(isa.assemble_sact("rc_p_cu"), variant=isa.variant("rc_p"))
print()
for d in isa.validate(bad)[1:3]:
    print("diagnostic:", d)

# Interpreting one node test shows what early exit saves.
obb = Obb((2.5, 0.0, 0.0), (1.0, 1.0, 1.0), np.eye(3))
box = Aabb((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
print()
for name in ("tta+", "rc_p", "rc_cr"):
    r = isa.interpret(isa.assemble_sact(name), obb, box)
    print(f"{name:6s} exit {r.exit.label:18s} decoded {r.uops_executed:2d} computed {r.uops_computed:2d}")
