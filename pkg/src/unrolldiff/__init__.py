"""Bilevel optimization by unrolled differentiation.

Solves hyperparameter-optimization and meta-learning problems by unrolling an
inner optimization dynamics for T steps and computing exact hypergradients of
the truncated objective by reverse-mode (adjoint) and forward-mode (tangent)
iterative differentiation, verified against closed-form and finite-difference
oracles.
"""
from .core import (
    BilevelProblem,
    Dynamics,
    HyperVector,
    InitMap,
    InnerObjective,
    InnerState,
    OuterObjective,
    Segment,
    TransposeReport,
    assemble_problem,
    check_transpose_consistency,
    jitter,
    transpose_defect,
)
from .dynamics import (
    ConstantInit,
    GaussianInit,
    GradientDescent,
    HeavyBallMomentum,
    HyperLRGradientDescent,
    zero_init,
)
from .hypergrad import (
    HypergradResult,
    Trajectory,
    WarmStartState,
    fd_hypergrad,
    forward_hypergrad,
    reverse_hypergrad,
    unroll,
)
from .oracle import (
    ConvergenceReport,
    QuadraticInner,
    convergence_harness,
    exact_hypergrad,
    exact_minimizer,
    ridge_quadratic,
)
from .outer import OuterConfig, OuterTrace, project_box, run_outer
from .problems import (
    EpochSampler,
    Episode,
    HyperCleanSpec,
    HyperReprSpec,
    MetaDataset,
    SupervisedData,
    evaluate_meta,
    generate_synthetic,
    hyperclean_problem,
    hyperrepr_problem,
    ridge_problem,
    sample_meta_batch,
    save_mask_csv,
    save_supervised_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
