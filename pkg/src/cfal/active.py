"""Disagreement-based active learning over logged observational data.

The run alternates epochs of: pick a clip bound from the pooled weight
distribution, find the empirical loss minimizer, shrink the candidate set by
a loss-plus-moment threshold, derive the under-coverage query policy, then
consume the next slice of the online stream, querying labels only inside the
candidate set's disagreement region and inferring them elsewhere.  The final
classifier minimizes the clipped mixture loss with a second-moment penalty
over everything collected.

Inferred labels are only ever attached where every surviving candidate
agrees, which keeps loss differences between candidates identical to what
they would be under the true labels; the per-run assertions check exactly
that, plus the one-sided bias they induce, on every epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    PolicyStack,
    SampleSet,
    WeightScheme,
    _error_term_sum,
    _gap_term_sum,
    _pair_term_sum,
    choose_clip_threshold,
    debias_closed_form,
)
from .sim import Environment
from .worlds import (
    CandidateSet,
    HypothesisClass,
    disagreement_region,
    population_error,
    region_mass,
)

__all__ = [
    "Ablations",
    "AlgoConfig",
    "EpochState",
    "EpochRow",
    "RunRecord",
    "threshold_slack",
    "moment_scale",
    "epoch_confidence",
    "epoch_clip_bound",
    "shrink_candidates",
    "run_epoch",
    "final_output",
    "interim_output",
    "run",
]


def threshold_slack(count: int, log_term: float, clip_bound: float) -> float:
    """Additive slack (M/N + M^2/N^{3/2}) * log_term used by the shrink rule."""
    return (clip_bound / count + clip_bound**2 / count**1.5) * log_term


def moment_scale(count: int, log_term: float) -> float:
    """Multiplier log_term / N under the square root of the moment penalty."""
    return log_term / count


def epoch_confidence(delta: float, k: int) -> float:
    """Per-epoch confidence budget delta / (2 (k+1) (k+2)); sums below delta/2."""
    return delta / (2.0 * (k + 1) * (k + 2))


@dataclass(frozen=True)
class Ablations:
    """Feature switches; everything on is the full algorithm.

    clipping off: the clip bound is +inf (and the additive slack with it).
    regularizer off: the square-root moment terms are dropped from the shrink
    rule and the final objective.  debias off: every epoch queries everywhere.
    mis off: samples are weighted by their own epoch's inverse propensity
    instead of the pooled mixture.  dbal off: the candidate set stays the full
    class and the disagreement region the whole space.
    """

    clipping: bool = True
    regularizer: bool = True
    debias: bool = True
    mis: bool = True
    dbal: bool = True

    @classmethod
    def from_off_list(cls, off: list[str]) -> "Ablations":
        known = {"clipping", "regularizer", "debias", "mis", "dbal"}
        bad = set(off) - known
        if bad:
            raise ValueError(f"unknown ablation flags: {sorted(bad)}")
        return cls(**{name: name not in off for name in known})


@dataclass(frozen=True)
class AlgoConfig:
    delta: float
    schedule: tuple[int, ...]
    gamma1: float = 4.0
    ablations: Ablations = field(default_factory=Ablations)
    check_invariants: bool = True

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.gamma1 <= 0:
            raise ValueError("slack factor must be positive")
        taus = tuple(int(t) for t in self.schedule)
        if any(a > b for a, b in zip(taus, taus[1:])):
            raise ValueError("epoch schedule must be nondecreasing")
        object.__setattr__(self, "schedule", taus)


@dataclass
class EpochState:
    """Everything the loop carries between epochs.

    ``data`` is the working set with inferred labels where applicable;
    ``truth`` is its fully-true-labeled twin, retained for diagnostics and
    never consulted by the learning rules.
    """

    hclass: HypothesisClass
    k: int
    candidate: CandidateSet
    dis_region: np.ndarray
    data: SampleSet
    truth: SampleSet
    stack: PolicyStack
    clip_bound: float = math.inf
    erm_index: int = -1
    queries: list[int] = field(default_factory=list)
    clip_bounds: list[float] = field(default_factory=list)
    rows: list["EpochRow"] = field(default_factory=list)


@dataclass(frozen=True)
class EpochRow:
    k: int
    clip_bound: float
    cand_size: int
    dis_mass: float
    queries: int
    cum_queries: int
    erm_error: float


@dataclass(frozen=True)
class RunRecord:
    """Per-epoch trace plus the final diagnostics of one run."""

    epochs: tuple[EpochRow, ...]
    final_index: int
    final_error: float
    final_clip_bound: float
    min_clip_to_cap_ratio: float
    max_clip_bound: float
    logged_online_ratio: float
    total_queries: int

    def to_csv(self) -> str:
        lines = ["k,M_k,cand_size,dis_mass,queries,cum_queries,test_error_of_erm_k"]
        for r in self.epochs:
            lines.append(
                f"{r.k},{r.clip_bound!r},{r.cand_size},{r.dis_mass!r},"
                f"{r.queries},{r.cum_queries},{r.erm_error!r}"
            )
        lines.append(
            f"final,{self.final_clip_bound!r},{self.final_index},,"
            f"{self.total_queries},{self.total_queries},{self.final_error!r}"
        )
        return "\n".join(lines) + "\n"


class _EpochEvaluator:
    """Cached per-epoch evaluation of losses and moments over the working set.

    Shares the exact accumulation core with the public estimators, so a value
    computed here is bit-identical to the corresponding public call.
    """

    def __init__(self, state: EpochState, mis: bool, clip_bound: float):
        self.samples = state.data
        self.n = len(state.data)
        self.clip_bound = clip_bound
        if mis:
            self.scheme = WeightScheme.per_instance(
                state.data, state.stack.weights(state.k)
            )
        else:
            self.scheme = WeightScheme.per_policy(state.data, state.stack.world)

    def loss(self, h: np.ndarray) -> float:
        return _error_term_sum(self.samples, self.scheme, self.clip_bound, h, 1) / self.n

    def moment(self, h: np.ndarray) -> float:
        return _error_term_sum(self.samples, self.scheme, self.clip_bound, h, 2) / self.n

    def pair_moment(self, h1: np.ndarray, h2: np.ndarray) -> float:
        return _pair_term_sum(self.samples, self.scheme, self.clip_bound, h1, h2) / self.n

    def gap(self, h1: np.ndarray, h2: np.ndarray) -> float:
        return _gap_term_sum(self.samples, self.scheme, self.clip_bound, h1, h2) / self.n


def epoch_clip_bound(state: EpochState, config: AlgoConfig) -> float:
    """Clip bound for the current epoch from the pooled weight profile.

    The measured variable is the weight every sample would carry had all
    online epochs queried everywhere; its tail is compared at half the bound,
    matching how the loop's threshold rule is stated.
    """
    if not config.ablations.clipping:
        return math.inf
    stack = state.stack
    log_term = math.log(state.hclass.size / epoch_confidence(config.delta, state.k))
    return choose_clip_threshold(
        stack.allquery_weights(state.k),
        stack.world.mass,
        stack.count(state.k),
        log_term,
        variant="active",
    )


def _erm_over(cand: CandidateSet, hclass: HypothesisClass, evaluator) -> int:
    best_idx, best_val = -1, math.inf
    for i in cand.member_indices:
        val = evaluator.loss(hclass.vector(i))
        if val < best_val:
            best_idx, best_val = i, val
    return best_idx


def shrink_candidates(
    state: EpochState, config: AlgoConfig, evaluator: _EpochEvaluator | None = None
) -> CandidateSet:
    """Keep candidates whose loss clears the minimizer's by at most the slack.

    The slack is gamma1 * additive term + gamma1 * sqrt(moment term); the
    moment is the label-free pairwise second moment against the minimizer, so
    the rule never depends on labels outside the current disagreement region.
    The minimizer itself always survives.
    """
    if evaluator is None:
        evaluator = _EpochEvaluator(state, config.ablations.mis, state.clip_bound)
    hclass = state.hclass
    erm_idx = state.erm_index
    if erm_idx < 0:
        raise ValueError("shrink needs the epoch's empirical minimizer")
    count = state.stack.count(state.k)
    delta_k = epoch_confidence(config.delta, state.k)
    log_term = math.log(hclass.size / delta_k)
    base = evaluator.loss(hclass.vector(erm_idx))
    slack0 = config.gamma1 * threshold_slack(count, log_term, state.clip_bound)
    survivors = []
    for i in state.candidate.member_indices:
        h = hclass.vector(i)
        threshold = base + slack0
        if config.ablations.regularizer:
            pair = evaluator.pair_moment(h, hclass.vector(erm_idx))
            threshold += config.gamma1 * math.sqrt(
                moment_scale(count, log_term) * pair
            )
        if evaluator.loss(h) <= threshold:
            survivors.append(i)
    result = CandidateSet(tuple(survivors))
    if erm_idx not in result:
        raise AssertionError("empirical minimizer fell out of its own threshold")
    return result


def _assert_inferred_label_bias(state: EpochState, evaluator, config: AlgoConfig):
    """Inferred labels can only help surviving candidates, never hurt them.

    For every candidate h: working-set loss <= true-label loss at the same
    clip <= unclipped true-label loss.  Exact inequalities, no tolerance.
    """
    truth_eval = _EpochEvaluator(
        replace_data(state, state.truth), config.ablations.mis, state.clip_bound
    )
    truth_eval_noclip = _EpochEvaluator(
        replace_data(state, state.truth), config.ablations.mis, math.inf
    )
    for i in state.candidate.member_indices:
        h = state.hclass.vector(i)
        tilde = evaluator.loss(h)
        true_clipped = truth_eval.loss(h)
        true_plain = truth_eval_noclip.loss(h)
        if not (tilde <= true_clipped <= true_plain):
            raise AssertionError(
                f"label inference bias flipped sign for candidate {i}: "
                f"{tilde} vs {true_clipped} vs {true_plain}"
            )


def replace_data(state: EpochState, data: SampleSet) -> EpochState:
    clone = EpochState(
        hclass=state.hclass,
        k=state.k,
        candidate=state.candidate,
        dis_region=state.dis_region,
        data=data,
        truth=state.truth,
        stack=state.stack,
        clip_bound=state.clip_bound,
        erm_index=state.erm_index,
    )
    return clone


def run_epoch(state: EpochState, config: AlgoConfig, env: Environment) -> EpochState:
    """One full iteration: clip bound, minimizer, shrink, policy, stream slice."""
    k = state.k
    stack = state.stack
    if k >= len(config.schedule):
        raise RuntimeError("schedule exhausted")
    hclass = state.hclass
    world = stack.world

    state.clip_bound = epoch_clip_bound(state, config)
    evaluator = _EpochEvaluator(state, config.ablations.mis, state.clip_bound)
    if config.check_invariants:
        _assert_inferred_label_bias(state, evaluator, config)
    state.erm_index = _erm_over(state.candidate, hclass, evaluator)

    if config.ablations.dbal:
        next_cand = shrink_candidates(state, config, evaluator)
        next_region = disagreement_region(hclass, next_cand)
    else:
        next_cand = CandidateSet(tuple(range(hclass.size)))
        next_region = np.arange(world.size)

    if config.ablations.debias:
        q_next = np.array(
            [debias_closed_form(x, k + 1, stack) for x in range(world.size)],
            dtype=np.int8,
        )
    else:
        q_next = np.ones(world.size, dtype=np.int8)

    tau = config.schedule[k]
    batch = env.stream_online(tau)
    truth_labels = batch.true_labels_for_diagnostics()
    in_region = np.zeros(world.size, dtype=bool)
    in_region[next_region] = True
    inferred = hclass.vector(state.erm_index)

    zs = q_next[batch.instances].astype(np.int8)
    ys = np.zeros(tau, dtype=np.int8)
    queried = 0
    for t in range(tau):
        if zs[t] == 1:
            x = int(batch.instances[t])
            if in_region[x]:
                ys[t] = batch.reveal(t)
                queried += 1
            else:
                ys[t] = inferred[x]
    epoch_col = np.full(tau, k + 1, dtype=np.int32)
    new_tilde = SampleSet(batch.instances, zs, ys, epoch_col)
    new_true = SampleSet(
        batch.instances, zs, np.where(zs == 1, truth_labels, 0).astype(np.int8), epoch_col
    )

    erm_error = population_error(world, hclass.vector(state.erm_index))
    row = EpochRow(
        k=k,
        clip_bound=state.clip_bound,
        cand_size=len(next_cand),
        dis_mass=region_mass(world, next_region),
        queries=queried,
        cum_queries=sum(state.queries) + queried,
        erm_error=erm_error,
    )

    return EpochState(
        hclass=hclass,
        k=k + 1,
        candidate=next_cand,
        dis_region=next_region,
        data=state.data.concat(new_tilde),
        truth=state.truth.concat(new_true),
        stack=stack.with_policy(q_next),
        clip_bound=state.clip_bound,
        erm_index=state.erm_index,
        queries=state.queries + [queried],
        clip_bounds=state.clip_bounds + [state.clip_bound],
        rows=state.rows + [row],
    )


def _final_clip_bound(state: EpochState, config: AlgoConfig) -> float:
    if not config.ablations.clipping:
        return math.inf
    stack = state.stack
    delta_k = epoch_confidence(config.delta, state.k)
    log_term = math.log(state.hclass.size / delta_k)
    return choose_clip_threshold(
        stack.allquery_weights(state.k),
        stack.world.mass,
        stack.count(state.k),
        log_term,
        variant="active",
    )


def _regularized_argmin(
    state: EpochState, config: AlgoConfig, clip_bound: float
) -> int:
    count = state.stack.count(state.k)
    delta_k = epoch_confidence(config.delta, state.k)
    log_term = math.log(state.hclass.size / delta_k)
    evaluator = _EpochEvaluator(state, config.ablations.mis, clip_bound)
    best_idx, best_val = -1, math.inf
    for i in state.candidate.member_indices:
        h = state.hclass.vector(i)
        val = evaluator.loss(h)
        if config.ablations.regularizer:
            val += config.gamma1 * math.sqrt(
                moment_scale(count, log_term) * evaluator.moment(h)
            )
        if val < best_val:
            best_idx, best_val = i, val
    return best_idx


def final_output(state: EpochState, config: AlgoConfig) -> int:
    """Regularized clipped-loss minimizer over the surviving candidates."""
    return _regularized_argmin(state, config, _final_clip_bound(state, config))


def interim_output(state: EpochState, config: AlgoConfig) -> int:
    """Anytime output: same objective as the final step at the current epoch."""
    return _regularized_argmin(state, config, _final_clip_bound(state, config))


def run(
    hclass: HypothesisClass, config: AlgoConfig, env: Environment
) -> tuple[int, RunRecord]:
    """Full multi-epoch run; returns the chosen index and its trace record.

    Deterministic given (config, environment seed).  Asserts the structural
    invariants on every epoch: nested candidate sets, nonincreasing
    disagreement mass, favorable bias of inferred labels, and query counts
    that match the environment's oracle ledger exactly.
    """
    world = env.world
    if hclass.n_instances != world.size:
        raise ValueError("hypothesis class and world disagree on instance count")
    n = sum(config.schedule)
    if n != env.n:
        raise ValueError("schedule total must match the environment's online budget")
    logged = env.generate_logged()
    stack = PolicyStack(world=world, m=env.m, taus=config.schedule)
    state = EpochState(
        hclass=hclass,
        k=0,
        candidate=CandidateSet(tuple(range(hclass.size))),
        dis_region=np.arange(world.size),
        data=logged,
        truth=logged,
        stack=stack,
    )
    prev_dis_mass = math.inf
    baseline_queries = env.queries_used
    for k in range(len(config.schedule)):
        state = run_epoch(state, config, env)
        if config.check_invariants:
            row = state.rows[-1]
            if row.dis_mass > prev_dis_mass + 1e-15:
                raise AssertionError("disagreement mass increased across epochs")
            prev_dis_mass = row.dis_mass

    final_bound = _final_clip_bound(state, config)
    final_idx = _regularized_argmin(state, config, final_bound)
    total_queries = sum(state.queries)
    if total_queries != env.queries_used - baseline_queries:
        raise AssertionError("query ledger mismatch between run and environment")

    # Ratio diagnostics over the thresholds chosen at counts m + n_k, k >= 1.
    caps = [
        float(stack.count(k) / (stack.m * world.min_propensity + stack.n(k)))
        for k in range(1, len(config.schedule) + 1)
    ]
    if caps:
        per_epoch_bounds = state.clip_bounds[1:] + [final_bound]
        ratio = min(b / c for b, c in zip(per_epoch_bounds, caps))
        max_bound = max(per_epoch_bounds)
    else:  # no online epochs at all
        ratio = final_bound / (1.0 / world.min_propensity)
        max_bound = final_bound
    record = RunRecord(
        epochs=tuple(state.rows),
        final_index=final_idx,
        final_error=population_error(world, hclass.vector(final_idx)),
        final_clip_bound=final_bound,
        min_clip_to_cap_ratio=ratio,
        max_clip_bound=max_bound,
        logged_online_ratio=env.m / env.n if env.n else math.inf,
        total_queries=total_queries,
    )
    return final_idx, record
