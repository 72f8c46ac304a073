"""Design-based cluster-robust variance estimation for M-estimators.

Library surface: data containers (``data_model``), model fitting and scores
(``mestimation``), classical meats and sandwiches (``variance``), the
covariate-projection adjusted estimators (``shrinkage``), average partial
effects (``ape``), seeded simulation populations and exact enumeration
oracles (``dgp``), and the replication driver (``montecarlo``).
"""

__version__ = "0.1.0"

from .data_model import (
    ClusterIndex,
    DesignDescriptor,
    ObservedDataset,
    canonicalize,
    intersection_cells,
    make_dataset,
)
from .mestimation import (
    FittedModel,
    RegressorSpec,
    ScoreBundle,
    fit_diff_in_means,
    fit_ols,
    fit_one_way_fe,
    fit_probit,
    fit_triple_diff,
    fit_two_way_fe,
    generic_scores,
    ols_scores,
    owfe_weights,
    probit_scores,
    twfe_residualize,
)
from .variance import (
    MeatMatrix,
    VarianceReport,
    cgm2_meat,
    cgm_meat,
    critical_value,
    lz_meat,
    meat_cluster,
    meat_ehw,
    sandwich,
    v_cgm,
    v_cgm2,
    v_ehw,
    v_lz_oneway,
)
from .shrinkage import (
    AdjustedVariance,
    AdjustmentInputs,
    adjusted_oneway,
    adjusted_twoway,
    delta_z,
    delta_z_ce,
    delta_z_dim,
    oneway_case_for,
    twoway_case_for,
)
from .ape import ApeResult, ape_adjustment_inputs, ape_variance, generic_ape, probit_ape_binary
from .dgp import (
    PopulationSpec,
    bernoulli_two_stage_sample,
    build_population,
    build_probit_population,
    build_tripled_population,
    build_twovar_population,
    default_spec,
    draw_assignment,
)
from .montecarlo import SummaryTable, coverage, run_study, summarize, truth_for

__all__ = [name for name in dir() if not name.startswith("_")]
