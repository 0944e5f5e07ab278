"""Self-contained property suites runnable from the CLI.

Each suite re-derives a structural identity or statistical guarantee through
an independent route (brute force, closed form, exact expectation, Monte
Carlo with a pinned seed, finite differences) and checks the library against
it.  ``run_suites`` prints a machine-readable ``suite,status,detail`` table
and reports an aggregate success flag.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from .estimators import (
    NO_CLIP,
    ClipConfig,
    PolicyStack,
    SampleSet,
    choose_clip_threshold,
    debias_closed_form,
    debias_policy,
    mis_loss,
    mis_loss_gap,
    mis_second_moment,
    mis_second_moment_pair,
    mis_weight,
)
from .linear import regularized_objective, regularized_objective_gradient
from .passive import binomial_tail_lower_bound, erm, regularized_erm, variance_trap_world
from .sim import draw_stack_dataset, random_class, random_world, variance_probe_world
from .worlds import FiniteWorld, HypothesisClass, population_error

__all__ = ["SUITES", "run_suite", "run_suites"]


def _derived_stack(world: FiniteWorld, m: int, taus: tuple[int, ...]) -> PolicyStack:
    """Stack with the closed-form coverage-gate policies attached for each epoch."""
    stack = PolicyStack(world=world, m=m, taus=taus)
    for k in range(1, len(taus) + 1):
        q = np.array(
            [debias_closed_form(x, k, stack) for x in range(world.size)], dtype=np.int8
        )
        stack = stack.with_policy(q)
    return stack


def check_decomposability(seed: int = 1001, splits: int = 200) -> tuple[bool, str]:
    """Second moments average exactly across any split of the data."""
    rng = np.random.default_rng(seed)
    world = random_world(rng, 6, q0_range=(0.08, 1.0))
    stack = _derived_stack(world, m=60, taus=(8, 16))
    samples = draw_stack_dataset(world, stack, rng)
    h = np.where(rng.random(world.size) < 0.5, 1, -1).astype(np.int8)
    clip = ClipConfig.at(float(np.quantile(stack.weights(2), 0.7)) + 1.0)
    worst = 0.0
    n = len(samples)
    for _ in range(splits):
        perm = rng.permutation(n)
        cut = int(rng.integers(1, n))
        s1, s2 = samples.subset(perm[:cut]), samples.subset(perm[cut:])
        whole = mis_second_moment(h, samples, stack, k=2, clip=clip)
        left = mis_second_moment(h, s1, stack, k=2, clip=clip)
        right = mis_second_moment(h, s2, stack, k=2, clip=clip)
        recombined = (len(s1) * left + len(s2) * right) / n
        worst = max(worst, abs(whole - recombined))
    return worst <= 1e-12, f"max split residual {worst:.3e}"


def check_mis_unbiased(seed: int = 1002, draws: int = 20000) -> tuple[bool, str]:
    """Unclipped mixture-weighted loss averages to the exact error."""
    rng = np.random.default_rng(seed)
    world = random_world(rng, 5, q0_range=(0.1, 1.0))
    hclass = random_class(rng, 5, 4)
    stack = _derived_stack(world, m=25, taus=(5, 10))
    h = hclass.vector(1)
    target = population_error(world, h)
    vals = np.empty(draws)
    for i in range(draws):
        samples = draw_stack_dataset(world, stack, rng)
        vals[i] = mis_loss(h, samples, stack, k=2)
    se = float(vals.std(ddof=1) / math.sqrt(draws))
    gap = abs(float(vals.mean()) - target)
    return gap <= 4 * se, f"gap {gap:.5f} vs 4*SE {4 * se:.5f}"


def check_qk_closed_form(seed: int = 1003, pairs: int = 100) -> tuple[bool, str]:
    """Recursive query policy equals its closed form everywhere."""
    rng = np.random.default_rng(seed)
    for _ in range(pairs):
        world = random_world(rng, int(rng.integers(2, 9)), q0_range=(0.01, 1.0))
        n_epochs = int(rng.integers(1, 6))
        taus = tuple(int(t) for t in np.sort(rng.integers(1, 30, size=n_epochs)))
        m = int(rng.integers(5, 400))
        stack = PolicyStack(world=world, m=m, taus=taus)
        for k in range(1, n_epochs + 1):
            for x in range(world.size):
                if debias_policy(x, k, stack) != debias_closed_form(x, k, stack):
                    return False, f"mismatch at x={x}, k={k}"
    return True, f"{pairs} stacks, exhaustive agreement"


def check_weight_bound(seed: int = 1004, trials: int = 100) -> tuple[bool, str]:
    """Mixture weights under derived policies never exceed the coverage bound."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        world = random_world(rng, int(rng.integers(2, 8)), q0_range=(0.01, 1.0))
        n_epochs = int(rng.integers(1, 6))
        taus = tuple(int(t) for t in np.sort(rng.integers(1, 40, size=n_epochs)))
        m = int(rng.integers(5, 500))
        stack = _derived_stack(world, m, taus)
        for k in range(1, n_epochs + 1):
            cap = stack.count(k) / (0.5 * m * world.q0 + stack.n(k))
            excess = float((stack.weights(k) - cap).max())
            worst = max(worst, excess)
    return worst <= 1e-9, f"max bound excess {worst:.3e}"


def check_label_flip(seed: int = 1005) -> tuple[bool, str]:
    """Loss gaps and pair moments ignore labels outside a shared-prediction region."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        world = random_world(rng, 6, q0_range=(0.1, 1.0))
        stack = _derived_stack(world, m=30, taus=(6, 12))
        samples = draw_stack_dataset(world, stack, rng)
        h1 = np.where(rng.random(6) < 0.5, 1, -1).astype(np.int8)
        h2 = h1.copy()
        flip_at = int(rng.integers(0, 6))
        h2[flip_at] = -h2[flip_at]
        clip = ClipConfig.at(2.0)
        base_gap = mis_loss_gap(h1, h2, samples, stack, k=2, clip=clip)
        base_pair = mis_second_moment_pair(h1, h2, samples, stack, k=2, clip=clip)
        for i in range(len(samples)):
            if samples.z[i] == 1 and samples.x[i] != flip_at:
                mutated = samples.with_flipped_label(i)
                if mis_loss_gap(h1, h2, mutated, stack, k=2, clip=clip) != base_gap:
                    return False, f"gap moved under out-of-region flip at row {i}"
                if (
                    mis_second_moment_pair(h1, h2, mutated, stack, k=2, clip=clip)
                    != base_pair
                ):
                    return False, f"pair moment moved under flip at row {i}"
    return True, "bit-identical under all out-of-region label flips"


def check_favorable_bias(seed: int = 1006, runs: int = 40) -> tuple[bool, str]:
    """Inferred labels only lower a surviving candidate's working-set loss."""
    from .active import AlgoConfig, run
    from .sim import Environment, doubling_schedule, noisy_benchmark_world

    world, hclass = noisy_benchmark_world()
    schedule = doubling_schedule(40)
    config = AlgoConfig(delta=0.1, schedule=schedule, check_invariants=True)
    for trial in range(runs):
        env = Environment(world, m=160, n=40, seed=9000 + trial)
        run(hclass, config, env)  # the run itself asserts the bias chain per epoch
    return True, f"{runs} runs, per-epoch bias assertions all held"


def check_variance_trap(seed: int = 1007, trials: int = 2000) -> tuple[bool, str]:
    """Unregularized ERM trips on the trap world; regularization mostly avoids it."""
    from .sim import Environment

    world, hclass = variance_trap_world(nu=0.3, m=1000)
    log_term = math.log(hclass.size / 0.01)
    plain_runner_up = 0
    reg_optimal = 0
    for t in range(trials):
        env = Environment(world, m=1000, n=0, seed=seed * 100000 + t)
        samples = env.generate_logged()
        if erm(hclass, samples, world) == 1:
            plain_runner_up += 1
        if regularized_erm(hclass, samples, world, log_term) == 0:
            reg_optimal += 1
    ok = plain_runner_up / trials >= 0.01 and reg_optimal / trials >= 0.9
    return ok, f"runner-up rate {plain_runner_up / trials:.3f}, regularized optimum rate {reg_optimal / trials:.3f}"


def check_m0_optimal(seed: int = 1008, worlds: int = 20) -> tuple[bool, str]:
    """The selected clip bound is within sqrt(2) of the best grid bound.

    Only worlds where the selection rule's two sides meet exactly qualify;
    at a jump of the tail the near-optimality argument does not apply.
    """
    rng = np.random.default_rng(seed)
    log_term = math.log(16 / 0.05)
    found = 0
    worst = 0.0
    while found < worlds:
        world = random_world(rng, 6, q0_range=(0.02, 0.9))
        m = int(rng.integers(50, 4000))
        weights = world.inverse_weights()
        m0 = choose_clip_threshold(weights, world.mass, m, log_term, variant="passive")
        tail = float(world.mass[weights > m0].sum())
        if abs(2.0 * m0 * log_term / m - tail) > 1e-9:
            continue  # no exact solution; skip
        found += 1

        def e_of(M: float) -> float:
            kept = weights <= M
            f1 = 4.0 * log_term / m * float((world.mass * weights)[kept].sum())
            f2 = float(world.mass[~kept].sum())
            return math.sqrt(f1) + f2

        grid = np.linspace(1.0, float(weights.max()) * 1.05, 1000)
        best = min(e_of(float(g)) for g in grid)
        ratio = e_of(m0) / best if best > 0 else 1.0
        worst = max(worst, ratio)
        if ratio > math.sqrt(2.0) + 1e-12:
            return False, f"ratio {ratio:.6f} exceeds sqrt(2)"
    return True, f"{worlds} qualifying worlds, worst ratio {worst:.6f}"


def check_binomial_tail(seed: int = 1009, cases: int = 200) -> tuple[bool, str]:
    """Closed-form tail lower bound stays below the exact binomial CDF."""
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        n = int(rng.integers(10, 5000))
        p = float(rng.uniform(0.01, 0.49))
        t = float(rng.uniform(p * 0.2, p * 0.95))
        if not 0 < t < p:
            continue
        bound = binomial_tail_lower_bound(n, p, t)
        # Pr(B < n t) = Pr(B <= ceil(n t) - 1)
        exact = float(stats.binom.cdf(math.ceil(n * t) - 1, n, p))
        if exact + 1e-12 < bound:
            return False, f"bound {bound:.3e} exceeds exact tail {exact:.3e} (n={n}, p={p:.3f}, t={t:.3f})"
    return True, f"{cases} sampled parameter triples"


def check_gradient_fd(seed: int = 1010, cases: int = 100) -> tuple[bool, str]:
    """Analytic batch gradient matches central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        dim = int(rng.integers(2, 8))
        n = int(rng.integers(3, 12))
        w = rng.normal(size=dim + 1) * 0.5
        xs = rng.uniform(size=(n, dim))
        ys = np.where(rng.random(n) < 0.5, 1, -1)
        sw = rng.uniform(1.0, 6.0, size=n)
        clip = float(rng.uniform(2.0, 7.0))
        lam = float(rng.uniform(0.5, 5.0))
        grad = regularized_objective_gradient(w, xs, ys, sw, clip, lam)
        fd = np.zeros_like(w)
        eps = 1e-6
        for j in range(len(w)):
            up, down = w.copy(), w.copy()
            up[j] += eps
            down[j] -= eps
            fd[j] = (
                regularized_objective(up, xs, ys, sw, clip, lam)
                - regularized_objective(down, xs, ys, sw, clip, lam)
            ) / (2 * eps)
        scale = max(float(np.linalg.norm(fd)), 1e-8)
        rel = float(np.linalg.norm(grad - fd)) / scale
        worst = max(worst, rel)
        if rel > 1e-4:
            return False, f"relative gradient error {rel:.2e}"
    return True, f"{cases} cases, worst relative error {worst:.2e}"


SUITES = {
    "decomposability": check_decomposability,
    "mis-unbiased": check_mis_unbiased,
    "qk-closed-form": check_qk_closed_form,
    "weight-bound": check_weight_bound,
    "label-flip": check_label_flip,
    "favorable-bias": check_favorable_bias,
    "variance-trap": check_variance_trap,
    "m0-optimal": check_m0_optimal,
    "binomial-tail": check_binomial_tail,
    "gradient-fd": check_gradient_fd,
}


def run_suite(name: str) -> tuple[bool, str]:
    if name not in SUITES:
        raise KeyError(f"unknown verification suite {name!r}")
    return SUITES[name]()


def run_suites(names=None, echo=print) -> bool:
    """Run the named suites (all by default); print a suite,status,detail table."""
    chosen = list(SUITES) if not names else list(names)
    echo("suite,status,detail")
    all_ok = True
    for name in chosen:
        ok, detail = run_suite(name)
        all_ok = all_ok and ok
        echo(f"{name},{'pass' if ok else 'FAIL'},{detail}")
    return all_ok
