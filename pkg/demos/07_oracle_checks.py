"""Cross-checking the simulator against the brute-force references.

The simulator computes on a 32-bit datapath; the references use 64-bit
arithmetic.  Queries whose deciding margin sits within a few ulps of zero may
legitimately differ, and the oracle module can flag them.
"""

import numpy as np

from robocore import isa, oracle, simcore, workloads

wl = workloads.gen_env("dresser", seed=3, n_points=16384, n_obbs=256, max_depth=6)
run = simcore.run(isa.assemble_sact("rc_cr_cu", spheres_enabled=True), wl.octree, wl.obbs)

centers, halves = wl.octree.occupied_boxes()
tree = np.array([oracle.collide_ref(o, wl.octree)[0] for o in wl.obbs])
flat = np.array([oracle.collide_flat(o, centers, halves) for o in wl.obbs])
print("tree walk == flat scan:", bool(np.all(tree == flat)))
print("simulator == tree walk:", bool(np.all(run.results == tree)))

# The exit-stage histogram must match the reference walk test for test.
ref_hist = oracle.count_exit_stages(wl.obbs, wl.octree, enable_spheres=True)
print("exit histograms equal:", np.array_equal(ref_hist, run.stats.exit_histogram))
for label, n in oracle.histogram_dict(ref_hist).items():
    if n:
        print(f"  {label:24s} {n}")

# Independent random pairs, with precision-ambiguous ones set aside.
rng = np.random.default_rng(5)
obbs, ac, ah = workloads.random_pairs(rng, 20000)
sim, _ = simcore.test_pairs(isa.assemble_sact("rc_cr"), obbs, ac, ah)
ref = np.array([oracle.collide_flat(o, c, h) for o, c, h in zip(obbs, ac, ah)])
band = oracle.pair_in_band(obbs, ac, ah)
print(f"pairs: {int(np.sum(sim != ref))} differ, {int(band.sum())} in the margin band, "
      f"{int(np.sum((sim != ref) & ~band))} differ outside it")
