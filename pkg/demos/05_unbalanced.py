"""Why the time dummies are demeaned per unit on unbalanced panels.

With raw dummies the fitted period effects need not sum to zero once units
are observed over different periods; with unit-demeaned dummies they do,
and the one-group fit reproduces two-way fixed effects.
"""

import numpy as np

from gfe import PanelData, fit_2wfe, fit_time_effects, gfe_fit, within_transform

# three units, two periods, the second unit seen only once
y = np.array([[1.0, 2.0], [3.0, 0.0], [4.0, 5.0]])
mask = np.array([[True, True], [True, False], [True, True]])
small = PanelData(("a", "b", "c"), (1, 2), y, np.zeros((3, 2, 0)), mask)
dp = within_transform(small)
for method in (1, 3):
    a = fit_time_effects(dp, method).alpha_dot
    print(f"method {method}: alpha = {np.round(a, 4)}, sum = {a.sum():+.4f}")

# a larger random unbalanced panel
rng = np.random.default_rng(0)
N, T = 200, 8
x = rng.normal(size=(N, T, 1))
y = 0.7 * x[:, :, 0] + rng.normal(size=T) + rng.normal(size=(N, 1)) + 0.3 * rng.normal(size=(N, T))
mask = rng.random((N, T)) > 0.3
mask[:, 0] = True
panel = PanelData(range(N), range(1, T + 1), y, x, mask, ("x",))

two = fit_2wfe(panel)
mod = gfe_fit(panel, 1, n_starts=1, seed=0)
unmod = gfe_fit(panel, 1, n_starts=1, seed=0, method="unmodified")
print("2WFE theta      ", two.theta.round(6))
print("modified G=1    ", mod.theta.round(6), " max profile gap",
      float(np.abs(mod.alpha_dot[0] - two.alpha_dot).max()))
print("unmodified G=1  ", unmod.theta.round(6), " profile sum", round(float(unmod.alpha_dot.sum()), 4))
