"""Counterfactual active learning from logged observational data.

A library and CLI around three pieces: variance-controlled importance
weighted learning on logged data (second-moment regularization plus
principled weight clipping), a disagreement-based active loop that combines
the logged phase with an online stream through mixture weighting and an
under-coverage query gate, and an exact finite simulation environment in
which every population quantity the theory talks about is computable and
testable.
"""

from .active import (
    Ablations,
    AlgoConfig,
    EpochState,
    RunRecord,
    epoch_confidence,
    final_output,
    moment_scale,
    run,
    run_epoch,
    shrink_candidates,
    threshold_slack,
)
from .estimators import (
    NO_CLIP,
    ClipConfig,
    PolicyStack,
    Sample,
    SampleSet,
    choose_clip_threshold,
    clipped_iw_loss,
    debias_closed_form,
    debias_policy,
    empirical_weight_distribution,
    iw_loss,
    mis_loss,
    mis_loss_gap,
    mis_second_moment,
    mis_second_moment_pair,
    mis_weight,
    second_moment,
)
from .harness import CurvePoint, ExperimentConfig, auc, run_experiment, sweep
from .linear import (
    LinearModel,
    approx_in_disagreement,
    ogd_step,
    regularized_objective_gradient,
    run_linear_passive,
    run_linear_vc_active,
)
from .passive import binomial_tail_lower_bound, erm, regularized_erm, variance_trap_world
from .sim import (
    Environment,
    LinearWorld,
    clipping_ladder_world,
    debias_savings_class,
    debias_savings_world,
    doubling_schedule,
    noisy_benchmark_world,
    sample_linear_dataset,
)
from .worlds import (
    CandidateSet,
    FiniteWorld,
    HypothesisClass,
    ball,
    best_hypothesis,
    disagreement_coefficient,
    disagreement_region,
    hypothesis_distance,
    modified_dis_coefficient,
    population_error,
    sup_modified_dis_coefficient,
)

__version__ = "0.1.0"
