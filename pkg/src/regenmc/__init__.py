"""Regeneration-based law-of-large-numbers toolkit for time-inhomogeneous
Markov chains: kernel families, condition certificates, invariant measure
families, split-chain simulation, and LLN diagnostics."""

__version__ = "0.1.0"

from .kernels import (
    BUILTIN_MODELS,
    EmpiricalMeasure,
    FiniteKernelFamily,
    KernelFamily,
    ObservableG,
    ProbMeasure,
    SamplerKernelFamily,
    TimeIndex,
    Waveform,
    as_sampler,
    builtin_model,
    compose_interval,
    eval_step_kernel,
    from_step_matrix,
    load_model,
    pushforward,
    semigroup_apply,
    tv_distance,
    weighted_norm,
)
from .conditions import (
    ContractionCertificate,
    DoeblinCertificate,
    DriftSpec,
    check_drift,
    contraction_from_doeblin,
    dobrushin_pair_bound,
    find_doeblin_certificate,
    load_certificate,
    save_certificate,
    verify_doeblin,
)
from .invariant import (
    ConvergenceError,
    ErgodicityFit,
    InvariantFamily,
    check_invariance,
    fit_ergodic_rate,
    mu_weight_series,
    solve_backward,
    solve_family,
    v_moment,
    write_family_table,
)
from .splitting import (
    RegenerationLog,
    SplitModel,
    SplitState,
    SplitTrajectory,
    cycle_independence_check,
    cycle_sums,
    derive_stream,
    eval_split_kernel,
    marginal_consistency,
    simulate_split_chain,
    split_measure,
    write_regeneration_log,
    write_trajectory,
)
from .lln import (
    CovarianceTable,
    CouplingReport,
    LLNReport,
    TailFit,
    cesaro_invariant_mean,
    check_drift_tail_bound,
    coalescing_couple,
    empirical_return_survival,
    slln_run,
    staircase_model,
    tail_fit,
    taboo_tail_exact,
    wlln_covariance_exact,
    wlln_variance_bound,
    wlln_variance_curve,
)
