"""Lattice Weyl-string algebra, Lindblad semigroups and flow matrix elements."""

from .algebra import (
    AlgebraParams,
    GnsVector,
    LocalOperator,
    WeylLabel,
    c_const,
    commutator,
    gns_inner,
    gns_norm,
    seminorm_one,
    theta,
    weyl_adjoint,
    weyl_mul,
)
from .dense import (
    DenseOperator,
    SiteWindow,
    StateSpec,
    WindowSuperoperator,
    choi_matrix,
    clock_shift,
    expm_evolve,
    matrix_to_local,
    operator_norm,
    realize,
    state_kraus,
    superoperator,
    window,
    window_basis,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    FitError,
    ParamsMismatchError,
    SizeGuardError,
    StateError,
    UhfflowError,
    WindowError,
)
from .fock import (
    ExponentialVectorSpec,
    FlowGeneratorSystem,
    MatrixElementTrajectory,
    PairTrajectory,
    StepFunction,
    TestFunction,
    build_generator_system,
    contraction_check,
    covariance_check,
    eta_ergodicity_scan,
    eta_product_flow,
    eta_site_flow,
    exp_inner,
    flow_element,
    homomorphism_defect,
    hp_divergence_witness,
    pair_element,
    picard_error_bound,
    picard_tail_bound,
    smallest_certified_depth,
)
from .lindblad import (
    EvolutionResult,
    KrausFamily,
    LemmaBoundReport,
    Lindbladian,
    MultiIndex,
    QuadratureSpec,
    decay_rate_fit,
    default_window,
    ergodic_state,
    evolve,
    lemma_bound_report,
    leibniz_expansion_check,
    multi_derivation,
    partial_semigroup_exact,
    perturbed_ergodic_state,
)

__version__ = "0.1.0"
