"""Covariate effects across a range of G.

The estimates move while G is too small and settle once the grouping can
absorb the group-specific time paths (here the true G is 4).
"""

from gfe import g_sweep, simulate_panel
from _dgp import demo_spec

panel, _ = simulate_panel(demo_spec(N=1000), seed=2)
res = g_sweep(panel, range(1, 7), n_starts=30, seed=0)

table = res.estimates.pivot(index="G", columns="covariate", values="estimate")
table["objective"] = res.objectives
print(table.round(4))
