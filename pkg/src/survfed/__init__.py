"""Multi-source causal survival analysis with federated aggregation."""

from .curves import (
    CurveKind,
    StepCurve,
    TimeGrid,
    isotonic_correct,
    km_fit,
    nelson_aalen_fit,
    pava_non_increasing,
    product_integral,
    survival_to_cumhaz,
)
from .cox import CoxModel, cox_fit, cox_fit_design, predict_conditional_survival
from .data import Dataset, Observation
from .folds import FoldAssignment, make_folds
from .bundle import NuisanceBundle, build_nuisance_bundle
from .eif import (
    EifEngine,
    EstimateWithCI,
    InfluenceTable,
    build_influence_table,
    discrepancy,
    eif_ccod,
    eif_site,
    eif_target,
    estimator_variance,
    h_functional,
)
from .fedopt import (
    CellStats,
    FedCurveConfig,
    WeightSolution,
    build_quadratic,
    choose_lambda,
    default_lambda_grid,
    fed_estimate,
    solve_weights,
    solve_weights_bootstrap,
)
from .models import (
    SiteCovariateSummary,
    fit_density_ratio_coarse,
    fit_density_ratio_pooled,
    fit_propensity,
    fit_survival_ensemble,
)

__version__ = "0.1.0"
