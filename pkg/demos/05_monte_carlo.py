"""
A small Monte Carlo grid
========================

Bias, MSE and selection counts for the spatial lag design, at a scale that
runs in seconds. The command line ``simulate`` runs the same code on the
full grids.
"""

from milasso.montecarlo import run_grid, run_timing_benchmark, setup_a

# first-order lag, two correlation levels, 30 replications each
specs = setup_a(n_list=(100,), mu_list=(8,), rho_list=(0.3, 0.9), reps=30, seed=1,
                estimators=("mi_lasso", "mi_plasso", "fstep_z"))
summary = run_grid(specs)
print(summary.to_csv())

# the same grid run twice gives identical tables
assert run_grid(specs).to_csv() == summary.to_csv()

# Mi-Lasso picks its tuning parameter without a search, which shows in the clock
for row in run_timing_benchmark([200], methods=["mi_lasso", "fstep_z"]):
    print(f"n={row['n']} {row['method']:9s} {row['seconds']:.4f}s  relative {row['relative']:.1f}")
