"""Numerical laboratory for semi-linear stochastic differential equations with
time delay on a weighted segment space: mild-solution simulation, change-of-
measure reweighting, drift-regularizing transforms, coupling constructions and
Harnack-type estimate checks.
"""

from .measure import (
    DelayMeasure,
    GridMismatchError,
    Segment,
    check_shift_domination,
    constant_segment,
    extract_segment,
    make_measure,
    seg_inner,
    seg_norm,
    segments_equal,
)
from .model import (
    BihariData,
    DiniModulus,
    ModelSpec,
    OperatorA,
    dini_check,
    make_functional,
    make_model,
    semigroup_factors,
    validate_assumptions,
)
from .rng import coarsen_increments, normal_increments, path_generator
from .solver import (
    PathBatch,
    SamplePath,
    SolverConfig,
    apriori_check,
    bihari_bound,
    cutoff_psi,
    simulate,
    solve_path,
    step,
    truncate_coefficients,
)
from .girsanov import direct_estimate, girsanov_shift, weak_estimate
from .zvonkin import (
    TransformedModel,
    ZvonkinSolution,
    ou_apply,
    simulate_transformed,
    solve_u,
    theta,
    theta_inverse,
    transformed_model,
    verify_decay,
)
from .coupling import (
    CouplingConfig,
    CouplingResult,
    entropy_cost,
    fit_entropy_cost,
    gamma,
    run_coupling,
    run_coupling_batch,
)
from .harnack import check_gradient_estimate, check_log_harnack, estimate_P

__version__ = "0.1.0"
