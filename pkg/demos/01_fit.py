"""Fit grouped fixed effects to a simulated panel and compare with two-way FE.

Run from the repository root:  python3 demos/01_fit.py
"""

import numpy as np

from gfe import fit_2wfe, gfe_fit, match_labels, simulate_panel
from _dgp import demo_spec

spec = demo_spec()
panel, truth = simulate_panel(spec, seed=1)
print(panel)

# Covariates are correlated with the group paths, so a single common time
# effect leaves that correlation in the error term.
two = fit_2wfe(panel)
print("2WFE theta:", np.round(two.theta, 4), " true:", spec.theta0)

fit = gfe_fit(panel, G=4, n_starts=50, seed=0)
print("GFE theta: ", np.round(fit.theta, 4))
print(f"objective {fit.objective:.2f} after {fit.iterations} iterations "
      f"(best start {fit.start_index}, converged={fit.converged})")

# Group labels are arbitrary; align them with the truth before comparing.
perm = match_labels(truth.shifted_profiles0, fit.alpha_shifted)
labels = perm.apply_labels(fit.gamma)
print("misclassified units:", int(np.sum(labels != truth.gamma0)), "of", panel.n_units)
print("max profile error:", float(np.abs(perm.apply_profiles(fit.alpha_shifted)
                                          - truth.shifted_profiles0).max()))
