"""
Selecting eigenvectors four ways
================================

One data set with spatially filtered structure, four selection rules, and
what each reports.
"""

import warnings

import numpy as np

from milasso.estimators import Dataset, FstepZConfig, chun_selection, cv_lasso, fstep_z, mi_lasso, ols_baseline
from milasso.montecarlo import SimulationSpec, simulate_y
from milasso.weights import build_bernoulli_swm, decompose, normalize_max_row_sum

n = 250
w = normalize_max_row_sum(build_bernoulli_swm(n, 8, 11))
basis = decompose(w)
spec = SimulationSpec(n=n, mu=8, rho=(0.7,))
y, x = simulate_y(spec, w, basis, np.random.default_rng(5))
data = Dataset.from_arrays(y, x, names=["x"])

print(ols_baseline(data, w).summary(), "\n")

# tuning parameter set to 1 / Z^2 from the OLS residuals; no search
print(mi_lasso(data, basis, w).summary(), "\n")
print(mi_lasso(data, basis, w, post=True).summary(), "\n")

# tuning parameter chosen by 5-fold cross-validation
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    print(cv_lasso(data, basis, w, rng_seed=1).summary(), "\n")

# greedy search on |Z| until it falls below 0.1
print(fstep_z(data, basis, w, FstepZConfig(epsilon=0.1)).summary(), "\n")

# the eigenvector count rule, paired with a correlation ordering
print(chun_selection(data, basis, w).summary())
