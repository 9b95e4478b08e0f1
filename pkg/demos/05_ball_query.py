"""Fixed-radius neighbor search mapped onto ray traversal two ways.

P-Ray treats every point as a zero-length ray and the sampled centers as
spheres.  P-Sphere flips the roles: centers are rays and every point is a
sphere, so each ray can stop once it has K neighbors.
"""

from robocore import workloads

wl = workloads.gen_ball_query(seed=2, n=16384, k=128, r=0.05, K=32)
print(f"{len(wl.points)} points, {len(wl.centers)} centers, radius {wl.radius}, K {wl.k_max}")

results = {}
for form in ("pray", "psphere"):
    for early in (False, True):
        res = workloads.run_ball_query(wl, form, early_exit=early)
        results[form, early] = res
        row = res.row()
        print(f"{row['formulation']:8s} early exit {str(early):5s}  rays {row['total_rays']:6d}  "
              f"depth {row['tree_depth']:2d}  nodes {row['total_nodes_traversed']:8d}  cycles {row['cycles']:.0f}")

# Every group is checked against a brute-force radius search.
for key, res in results.items():
    bad = workloads.ball_query_oracle_check(wl, res, sample=None)
    print(key, "mismatching centers:", bad)

# Growing the radius hurts P-Ray far more than P-Sphere.
for scale in (1, 2, 4):
    c = {f: workloads.run_ball_query(wl, f, radius=wl.radius * scale).stats.total_cycles for f in ("pray", "psphere")}
    print(f"radius x{scale}: P-Ray {c['pray']:.0f} cycles, P-Sphere {c['psphere']:.0f} cycles")
