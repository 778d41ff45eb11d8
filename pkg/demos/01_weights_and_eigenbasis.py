"""
Spatial weights and their eigenvectors
======================================

A random symmetric weights matrix, its max-row-sum normalization, and the
eigenvector basis that every estimator draws its candidates from.
"""

import numpy as np

from milasso.weights import build_bernoulli_swm, decompose, matrix_power_via_basis, normalize_max_row_sum

# 300 units, each pair linked with probability mu / (n - 1); redrawn until
# no unit is isolated
w = build_bernoulli_swm(300, mu=8, rng_seed=42)
print("mean number of neighbours:", w.row_sums().mean())

# divide by the largest row sum so the spectrum lies in [-1, 1]
w = normalize_max_row_sum(w)
print("normalization factor:", w.norm_factor)

basis = decompose(w)
print("largest eigenvalues:", np.round(basis.values[:5], 4))
print("smallest eigenvalues:", np.round(basis.values[-3:], 4))
print("positive eigenvalues:", basis.positive().size)

# the basis reproduces powers of W: W^2 from the spectrum versus a direct product
w2 = matrix_power_via_basis(basis, 2)
print("max |W^2 error|:", np.abs(w2 - w.values @ w.values).max())

# the leading eigenvector is a smooth, positively autocorrelated map pattern;
# the trailing one alternates between neighbours
from milasso.moran import moran_i

print("Moran's I of first / last eigenvector:",
      round(moran_i(basis.vectors[:, 0], w), 4), round(moran_i(basis.vectors[:, -1], w), 4))
