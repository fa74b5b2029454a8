"""G-estimation of optimal dynamic treatment regimes.

Linear and log-linear structural nested mean models fit stage by stage,
sandwich inference with a quasi-likelihood information criterion for blip
model selection, and a seeded Monte Carlo harness.
"""

from .continuous import (
    ContinuousStageFit,
    optimal_dose,
    quasi_likelihood_continuous,
    stage_fit_continuous,
)
from .data import (
    Dataset,
    DesignMatrices,
    ModelSpec,
    StageModel,
    StageRecord,
    Subject,
    ValidationReport,
    build_design,
    validate_dataset,
)
from .engine import (
    DtrFit,
    SelectionResult,
    StageResult,
    TrailEntry,
    exhaustive_select,
    fit_dtr,
    optimal_treatment_binary,
    stepwise_select,
)
from .exceptions import (
    AggregationError,
    CalibrationError,
    DimensionError,
    DivergenceError,
    DomainError,
    GestError,
    IdentifiabilityError,
    SelectionError,
    SeparationError,
    SingularityError,
    SpecificationError,
    StateError,
)
from .inference import (
    StageInference,
    info_matrices,
    qic,
    sandwich_variance,
    score_matrix,
    stage_inference,
    trace_term,
    wald_pvalues,
)
from .linear import (
    LinearStageFit,
    pseudo_outcome_linear,
    quasi_likelihood_linear,
    stage_fit_linear,
)
from .loglinear import (
    IrlsOptions,
    LoglinearStageFit,
    irls_stage_fit,
    pseudo_outcome_loglinear,
    quasi_likelihood_loglinear,
)
from .nuisance import (
    TreatmentFit,
    expit,
    fit_continuous_treatment,
    fit_logistic,
    treatment_residuals,
)
from .simulation import (
    Analysis,
    ReplicationReport,
    Scenario,
    aggregate_selection,
    analysis_spec,
    calibrate_beta0,
    candidate_terms,
    generate,
    nested_candidate_models,
    run_replications,
    true_blip_terms,
)

__version__ = "0.1.0"
