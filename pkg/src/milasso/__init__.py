"""
Eigenvector spatial filtering with a Moran-tuned Lasso (Mi-Lasso).

Modules
-------
weights     spatial weights matrices, normalization, eigendecomposition, file formats
moran       Moran's I of regression residuals and its standardized form
lasso       partialled Lasso solver, OLS and post-Lasso refits
estimators  Mi-Lasso, CV-Lasso, FstepZ and OLS baselines
montecarlo  simulation grids, timing benchmark, theory-consequence suite
cli         command-line entry point
"""

__version__ = "0.1.0"

from .weights import (
    EigenBasis,
    SpatialWeights,
    WeightsError,
    build_bernoulli_swm,
    decompose,
    matrix_power_via_basis,
    normalize_max_row_sum,
    normalize_spectral,
    read_weights,
)
from .moran import MoranResult, ResidualMaker, moran_i, residuals, standardized_moran
from .lasso import (
    LassoSolution,
    PartialLassoProblem,
    fwl_partial_out,
    post_lasso_refit,
    solve_partial_lasso,
    theta_max,
)
from .estimators import (
    Dataset,
    EstimationReport,
    FstepZConfig,
    chun_candidate_count,
    cv_lasso,
    estimate,
    fstep_z,
    mi_lasso,
    ols_baseline,
)
from .montecarlo import SimulationSpec, SimulationSummary, run_grid, run_timing_benchmark, simulate_y, theory_suite
