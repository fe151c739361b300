"""Decentralized consensus optimization with DQM, DLM and DADMM."""

from .analysis import (
    AuditReport,
    OptimalCertificate,
    RateParameters,
    approx_error,
    audit,
    dadmm_rate_limit,
    energy,
    optimal_certificate,
    rate_constant,
    recover_alpha,
)
from .data import Dataset, generate_dataset, logistic_problem
from .graph import (
    IncidenceOperators,
    Network,
    SpectralData,
    build_random_graph,
    incidence_operators,
    spectral_bounds,
)
from .objective import (
    ConsensusProblem,
    CurvatureEstimates,
    LogisticLocal,
    QuadraticLocal,
    aggregate_eval,
    curvature_estimates,
)
from .solvers import (
    FullState,
    IterationTrace,
    ReducedState,
    SolverConfig,
    centralized_solve,
    dadmm_step,
    dlm_step,
    dqm_step,
    full_form_step,
    run,
)

__version__ = "0.1.0"
