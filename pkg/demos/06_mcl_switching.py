"""Ray casting for Monte Carlo localization, with a dynamic host/accelerator policy.

Particles converge on the true pose over the iterations, so rays get shorter.
Long rays favor the accelerator and short ones favor the host.  The dynamic
policy picks each iteration's path from the previous iteration's average
steps per ray.
"""

from robocore import workloads

wl = workloads.gen_mcl(seed=1, iterations=80)
print(f"grid {wl.grid.dims}, {wl.iterations} iterations, threshold {wl.switch_threshold} steps/ray")

res = workloads.run_mcl(wl)
for row in res.rows[::10]:
    print(f"iter {row['iteration']:3d}  avg steps {row['avg_nodes_per_ray']:5.1f}  "
          f"sim {row['cost_sim']:9.0f}  host {row['cost_host']:9.0f}  -> {row['path']}")

t = res.totals
print(f"totals: dynamic {t['dynamic']:.0f}, always-sim {t['always_sim']:.0f}, "
      f"always-host {t['always_host']:.0f}; {res.switches} switch(es)")
