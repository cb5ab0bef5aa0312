"""Small Monte Carlo: bias, simulated standard errors and misclassification."""

from gfe import monte_carlo
from _dgp import demo_spec

spec = demo_spec(N=1000)
res = monte_carlo(spec, M=20, n_starts=30, seed=0)

print(res.summary().round(4).to_string(index=False))
print("mean misclassification:", round(float(res.scores.misclassification.mean()), 4))
print("replications converged:", int(res.scores.converged.sum()), "of", len(res.scores))

# the same panels fitted with too few groups
under = monte_carlo(spec, M=20, G_fit=2, n_starts=30, seed=0)
print("G = 2 bias:", under.theta_bias.round(4))
