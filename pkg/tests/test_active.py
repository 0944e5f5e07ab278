"""The interactive loop: thresholds, shrinking, querying, end-to-end runs."""

import math

import numpy as np
import pytest

from cfal.active import (
    Ablations,
    AlgoConfig,
    EpochState,
    epoch_confidence,
    final_output,
    moment_scale,
    run,
    run_epoch,
    shrink_candidates,
    threshold_slack,
)
from cfal.estimators import (
    ClipConfig,
    PolicyStack,
    Sample,
    SampleSet,
    choose_clip_threshold,
    mis_loss,
    mis_second_moment,
    mis_second_moment_pair,
)
from cfal.passive import regularized_erm
from cfal.sim import (
    Environment,
    debias_savings_class,
    debias_savings_world,
    doubling_schedule,
    noisy_benchmark_world,
)
from cfal.worlds import (
    CandidateSet,
    FiniteWorld,
    HypothesisClass,
    best_hypothesis,
    disagreement_region,
)


def make_set(rows):
    return SampleSet.from_samples([Sample(*r) for r in rows])


class TestSlackFormulas:
    def test_threshold_slack_substitution(self):
        assert threshold_slack(100, 3.0, 2.0) == pytest.approx(0.072)

    def test_moment_scale_substitution(self):
        assert moment_scale(100, 3.0) == pytest.approx(0.03)

    def test_epoch_confidence(self):
        assert epoch_confidence(0.1, 0) == pytest.approx(0.025)
        assert epoch_confidence(0.1, 1) == pytest.approx(0.1 / 12)
        # the series sums below delta / 2
        total = sum(epoch_confidence(0.1, k) for k in range(10_000))
        assert total < 0.05

    def test_infinite_bound_gives_infinite_slack(self):
        assert threshold_slack(100, 3.0, math.inf) == math.inf


def state_on(world, hclass, samples, taus=(), policies=(), k=0, clip=math.inf):
    stack = PolicyStack(world=world, m=int((samples.epoch == 0).sum()), taus=taus)
    for q in policies:
        stack = stack.with_policy(np.asarray(q, dtype=np.int8))
    return EpochState(
        hclass=hclass,
        k=k,
        candidate=CandidateSet(tuple(range(hclass.size))),
        dis_region=np.arange(world.size),
        data=samples,
        truth=samples,
        stack=stack,
        clip_bound=clip,
    )


class TestShrinkCandidates:
    def fixture(self):
        world = FiniteWorld(
            mass=[0.4, 0.3, 0.3], label_prob=[0.95, 0.9, 0.1], q0=[1.0, 0.5, 0.5]
        )
        hclass = HypothesisClass(
            np.array([[1, 1, -1], [1, -1, -1], [-1, -1, 1]], dtype=np.int8)
        )
        rng = np.random.default_rng(3)
        n = 60
        xs = rng.choice(3, size=n, p=world.mass)
        ys = np.where(rng.random(n) < world.label_prob[xs], 1, -1)
        zs = np.ones(n, dtype=np.int8)
        samples = SampleSet(xs, zs, ys, np.zeros(n, dtype=np.int32))
        return world, hclass, samples

    def test_singleton_unchanged(self):
        world, hclass, samples = self.fixture()
        state = state_on(world, hclass, samples)
        state.candidate = CandidateSet((1,))
        state.erm_index = 1
        config = AlgoConfig(delta=0.1, schedule=())
        assert shrink_candidates(state, config).member_indices == (1,)

    def test_huge_slack_keeps_everyone(self):
        world, hclass, samples = self.fixture()
        state = state_on(world, hclass, samples)
        state.erm_index = 0
        config = AlgoConfig(delta=0.1, schedule=(), gamma1=1e9)
        assert len(shrink_candidates(state, config)) == hclass.size

    def test_rule_matches_hand_evaluation(self):
        world, hclass, samples = self.fixture()
        state = state_on(world, hclass, samples, clip=4.0)
        config = AlgoConfig(delta=0.1, schedule=(), gamma1=1.0)
        stack = state.stack
        clip = ClipConfig.at(4.0)
        losses = [mis_loss(hclass.vector(i), samples, stack, k=0, clip=clip) for i in range(3)]
        erm_idx = int(np.argmin(losses))
        state.erm_index = erm_idx
        count = stack.count(0)
        delta0 = epoch_confidence(0.1, 0)
        log_term = math.log(3 / delta0)
        survivors = []
        for i in range(3):
            pair = mis_second_moment_pair(
                hclass.vector(i), hclass.vector(erm_idx), samples, stack, k=0, clip=clip
            )
            bound = (
                losses[erm_idx]
                + 1.0 * threshold_slack(count, log_term, 4.0)
                + 1.0 * math.sqrt(moment_scale(count, log_term) * pair)
            )
            if losses[i] <= bound:
                survivors.append(i)
        got = shrink_candidates(state, config)
        assert got.member_indices == tuple(survivors)
        assert erm_idx in got
        assert len(got) == 2  # the far-off classifier is eliminated at gamma1=1


class TestRunEpoch:
    def test_empty_disagreement_means_no_queries(self):
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[1.0, 0.0], q0=[1.0, 1.0])
        hclass = HypothesisClass(np.array([[1, -1]], dtype=np.int8))  # singleton class
        env = Environment(world, m=20, n=10, seed=0)
        config = AlgoConfig(delta=0.1, schedule=(10,))
        idx, rec = run(hclass, config, env)
        assert rec.total_queries == 0
        assert all(r.queries == 0 for r in rec.epochs)

    def test_closed_query_gate_adds_nothing_observed(self):
        # plenty of logged coverage: the gate never opens, so all stream
        # samples join with z = 0
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[0.9, 0.2], q0=[1.0, 1.0])
        hclass = HypothesisClass(np.array([[1, -1], [-1, 1]], dtype=np.int8))
        env = Environment(world, m=1000, n=4, seed=1)
        config = AlgoConfig(delta=0.1, schedule=(4,))
        idx, rec = run(hclass, config, env)
        assert rec.total_queries == 0

    def test_query_count_matches_replay(self):
        world = FiniteWorld(mass=[0.6, 0.4], label_prob=[0.8, 0.3], q0=[1.0, 0.05])
        hclass = HypothesisClass(np.array([[1, 1], [1, -1]], dtype=np.int8))
        config = AlgoConfig(delta=0.1, schedule=(6, 12))
        env = Environment(world, m=40, n=18, seed=9)
        idx, rec = run(hclass, config, env)
        # replay oracle: same seed, walk the stream manually with the
        # closed-form gate; the candidate set never shrinks to a singleton
        # here (checked), so the disagreement region is {x1} throughout
        assert all(r.cand_size == 2 for r in rec.epochs)
        env2 = Environment(world, m=40, n=18, seed=9)
        env2.generate_logged()
        expected = 0
        n_seen = 0
        for tau in (6, 12):
            n_next = n_seen + tau
            batch = env2.stream_online(tau)
            for x in batch.instances:
                if 2 * n_next - 40 * world.q0[x] > 0 and x == 1:
                    expected += 1
            n_seen = n_next
        assert rec.total_queries == expected


class TestRunEndToEnd:
    def test_no_online_epochs_reduce_to_clipped_regularized_erm(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=())
        env = Environment(world, m=300, n=0, seed=4)
        idx, rec = run(hclass, config, env)
        # same draw, evaluated by the passive learner with matching knobs
        env2 = Environment(world, m=300, n=0, seed=4)
        samples = env2.generate_logged()
        delta0 = epoch_confidence(0.1, 0)
        log_term = math.log(hclass.size / delta0)
        m0 = choose_clip_threshold(
            world.inverse_weights(), world.mass, 300, log_term, variant="active"
        )
        expect = regularized_erm(
            hclass,
            samples,
            world,
            log_term,
            clip=ClipConfig.at(m0),
            lam=config.gamma1**2 * log_term,
        )
        assert rec.final_clip_bound == m0
        assert idx == expect

    def test_candidate_sets_nested_and_dis_mass_monotone(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(100))
        env = Environment(world, m=300, n=100, seed=11)
        idx, rec = run(hclass, config, env)
        sizes = [r.cand_size for r in rec.epochs]
        masses = [r.dis_mass for r in rec.epochs]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))
        assert all(a >= b - 1e-15 for a, b in zip(masses, masses[1:]))

    def test_total_queries_match_environment_ledger(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(60))
        env = Environment(world, m=200, n=60, seed=21)
        idx, rec = run(hclass, config, env)
        assert rec.total_queries == env.queries_used
        assert rec.total_queries == sum(r.queries for r in rec.epochs)

    def test_deterministic_replay(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(60))
        runs = []
        for _ in range(2):
            env = Environment(world, m=200, n=60, seed=77)
            runs.append(run(hclass, config, env))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1].to_csv() == runs[1][1].to_csv()

    def test_pinned_regression(self):
        # frozen after the first verified run of this configuration
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(60))
        env = Environment(world, m=200, n=60, seed=77)
        idx, rec = run(hclass, config, env)
        assert idx == PINNED_INDEX
        assert rec.total_queries == PINNED_QUERIES

    def test_final_output_singleton(self):
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[1.0, 0.0], q0=[1, 1])
        hclass = HypothesisClass(np.array([[1, -1]], dtype=np.int8))
        config = AlgoConfig(delta=0.1, schedule=(4,))
        env = Environment(world, m=20, n=4, seed=2)
        idx, rec = run(hclass, config, env)
        assert idx == 0

    def test_separable_world_converges_to_optimum(self):
        world = FiniteWorld(
            mass=[0.3, 0.3, 0.4], label_prob=[1.0, 0.0, 1.0], q0=[1.0, 0.6, 0.4]
        )
        hclass = HypothesisClass(
            np.array([[1, -1, 1], [1, 1, 1], [-1, -1, -1], [1, -1, -1]], dtype=np.int8)
        )
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(120))
        env = Environment(world, m=400, n=120, seed=3)
        idx, rec = run(hclass, config, env)
        assert idx == 0
        assert rec.final_error == 0.0


class TestOptimumRetention:
    def test_optimum_stays_in_candidate_sets(self):
        # soft acceptance property: the optimum survives every shrink in at
        # least 90% of seeded runs at the default slack factor
        world, hclass = noisy_benchmark_world()
        star, _ = best_hypothesis(world, hclass)
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(60))
        kept = 0
        runs = 500
        for trial in range(runs):
            env = Environment(world, m=200, n=60, seed=50_000 + trial)
            state = _run_collecting_states(hclass, config, env)
            if all(star in cand for cand in state):
                kept += 1
        assert kept / runs >= 0.90, kept


def _run_collecting_states(hclass, config, env):
    from cfal.estimators import PolicyStack

    world = env.world
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
    candidates = []
    for _ in range(len(config.schedule)):
        state = run_epoch(state, config, env)
        candidates.append(state.candidate)
    return candidates


class TestLabelFlipInvariance:
    def test_gap_and_pair_moment_fixed_outside_region(self):
        # a tight slack factor so the candidate set actually prunes and a
        # genuine out-of-region set exists
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(delta=0.1, schedule=doubling_schedule(200), gamma1=0.5)
        env = Environment(world, m=600, n=200, seed=13)
        from cfal.estimators import mis_loss_gap

        logged = env.generate_logged()
        stack = PolicyStack(world=world, m=600, taus=config.schedule)
        state = EpochState(
            hclass=hclass,
            k=0,
            candidate=CandidateSet(tuple(range(hclass.size))),
            dis_region=np.arange(world.size),
            data=logged,
            truth=logged,
            stack=stack,
        )
        for _ in range(len(config.schedule)):
            state = run_epoch(state, config, env)
        cand = state.candidate
        assert len(cand) < hclass.size  # pruning happened
        region = set(disagreement_region(hclass, cand).tolist())
        assert len(region) < world.size
        clip = ClipConfig.at(state.clip_bound)
        members = list(cand.member_indices)[:4]
        base_gap = {}
        base_pair = {}
        for a in members:
            for b in members:
                if a < b:
                    base_gap[(a, b)] = mis_loss_gap(
                        hclass.vector(a), hclass.vector(b), state.data, state.stack, clip=clip
                    )
                    base_pair[(a, b)] = mis_second_moment_pair(
                        hclass.vector(a), hclass.vector(b), state.data, state.stack, clip=clip
                    )
        flipped = 0
        for i in range(len(state.data)):
            if state.data.z[i] == 1 and int(state.data.x[i]) not in region:
                mutated = state.data.with_flipped_label(i)
                for (a, b), want in base_gap.items():
                    got = mis_loss_gap(
                        hclass.vector(a), hclass.vector(b), mutated, state.stack, clip=clip
                    )
                    assert got == want  # bit identical
                for (a, b), want in base_pair.items():
                    got = mis_second_moment_pair(
                        hclass.vector(a), hclass.vector(b), mutated, state.stack, clip=clip
                    )
                    assert got == want
                flipped += 1
                if flipped >= 25:
                    break
        assert flipped > 0


class TestAblationQueryOrdering:
    def test_coverage_gate_saves_queries(self):
        world = debias_savings_world(mu=0.1, alpha=0.0025, lam=2.0)
        hclass = debias_savings_class()
        schedule = doubling_schedule(400)
        on = AlgoConfig(delta=0.1, schedule=schedule)
        off = AlgoConfig(delta=0.1, schedule=schedule, ablations=Ablations(debias=False))
        for seed in (1, 2, 3):
            env_on = Environment(world, m=800, n=400, seed=seed)
            env_off = Environment(world, m=800, n=400, seed=seed)
            q_on = run(hclass, on, env_on)[1].total_queries
            q_off = run(hclass, off, env_off)[1].total_queries
            assert q_on < q_off

    def test_dbal_off_queries_everything_gated(self):
        world = debias_savings_world(mu=0.1, alpha=0.0025, lam=2.0)
        hclass = debias_savings_class()
        schedule = doubling_schedule(100)
        config = AlgoConfig(
            delta=0.1, schedule=schedule, ablations=Ablations(debias=False, dbal=False)
        )
        env = Environment(world, m=200, n=100, seed=5)
        idx, rec = run(hclass, config, env)
        assert rec.total_queries == 100

    def test_clipping_off_reports_infinite_bound(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(
            delta=0.1, schedule=doubling_schedule(40), ablations=Ablations(clipping=False)
        )
        env = Environment(world, m=150, n=40, seed=6)
        idx, rec = run(hclass, config, env)
        assert rec.final_clip_bound == math.inf
        assert all(r.clip_bound == math.inf for r in rec.epochs)

    def test_mis_off_still_runs(self):
        world, hclass = noisy_benchmark_world()
        config = AlgoConfig(
            delta=0.1, schedule=doubling_schedule(40), ablations=Ablations(mis=False)
        )
        env = Environment(world, m=150, n=40, seed=8)
        idx, rec = run(hclass, config, env)
        assert 0 <= idx < hclass.size


class TestDeviationBoundSpotCheck:
    def test_pairwise_gap_concentration(self):
        # draws of the full stack-generated dataset: the pairwise estimated
        # gap stays within the printed radius for all pairs, in at least
        # 1 - delta of seeded draws
        from cfal.sim import draw_stack_dataset, variance_probe_world
        from cfal.estimators import debias_closed_form
        from cfal.worlds import population_error

        world, hclass = variance_probe_world()
        m, taus = 80, (20, 40)
        stack = PolicyStack(world=world, m=m, taus=taus)
        for k in range(1, 3):
            q = np.array(
                [debias_closed_form(x, k, stack) for x in range(world.size)], dtype=np.int8
            )
            stack = stack.with_policy(q)
        delta = 0.1
        count = stack.count(2)
        log_term = math.log(hclass.size / delta)
        M = choose_clip_threshold(
            stack.allquery_weights(2), world.mass, count, log_term, variant="active"
        )
        clip = ClipConfig.at(M)
        w = stack.weights(2)
        true_err = [population_error(world, hclass.vector(i)) for i in range(hclass.size)]
        # exact pairwise clipped second moments
        radius = {}
        for a in range(hclass.size):
            for b in range(a + 1, hclass.size):
                dis = hclass.vector(a) != hclass.vector(b)
                kept = w <= M
                var_pair = float((world.mass * w * dis * kept).sum())
                radius[(a, b)] = 10 * math.log(2 * hclass.size / delta) / (
                    3 * count
                ) * M + math.sqrt(4 * math.log(2 * hclass.size / delta) / count * var_pair)
        rng = np.random.default_rng(1234)
        bad_draws = 0
        draws = 2000
        for _ in range(draws):
            samples = draw_stack_dataset(world, stack, rng)
            ok = True
            for (a, b), rad in radius.items():
                gap_hat = mis_loss(hclass.vector(a), samples, stack, k=2, clip=clip) - mis_loss(
                    hclass.vector(b), samples, stack, k=2, clip=clip
                )
                # the clipped estimator is compared against the unclipped truth
                if abs(gap_hat - (true_err[a] - true_err[b])) > rad:
                    ok = False
                    break
            if not ok:
                bad_draws += 1
        assert bad_draws / draws <= delta


# frozen from the first verified run of the seed-77 configuration above
PINNED_INDEX = 0
PINNED_QUERIES = 32
