"""Simulating collision queries on each accelerator variant.

The simulator walks every query through the octree, runs the variant's
program for each node test, and replays the trace on a timing model of the
cores, caches and interconnect.
"""

from robocore import isa, simcore, workloads

wl = workloads.gen_env("tabletop", seed=1, n_points=32768, n_obbs=1024, max_depth=8)
print(f"tabletop: {len(wl.obbs)} arm-link boxes, {wl.expected_collisions} collide")

rows = []
for name in ("tta+", "rc_p", "rc_cr", "rc_p_cu", "rc_cr_cu"):
    r = simcore.run(isa.assemble_sact(name), wl.octree, wl.obbs)
    st = r.stats
    print(f"{name:9s} cycles {st.total_cycles:9.0f}  packets {st.interconnect_packets:8d}  "
          f"decoded {st.uops_decoded:8d}  computed {st.uops_computed:8d}")
    rows.append(simcore.stats_row(st, scene="tabletop", variant=name))

base = rows[-1]["cycles"]
print("slowdown vs rc_cr_cu:", {r["variant"]: round(r["cycles"] / base, 2) for r in rows})

# The same rows serialize to CSV with a config hash for provenance.
print(simcore.rows_to_csv(rows[-1:]).splitlines()[0][:100], "...")

# A latency sweep: slower collision units barely move the total.
for scale in (0.5, 1.0, 2.0):
    cfg = simcore.SimConfig(collision_unit_latency_scale=scale)
    c = simcore.run(isa.assemble_sact("rc_cr_cu"), wl.octree, wl.obbs, cfg).stats.total_cycles
    print(f"collision-unit latency x{scale}: {c:.0f} cycles")
