"""Seeded data-generating environments and fixture worlds.

An :class:`Environment` owns one run's randomness and its query accounting:
logged-phase labels are free and revealed by independent coin flips with the
logging propensities, online labels cost one oracle call each and are only
reachable through the gated batch interface.  True labels of every online
draw are retained privately so diagnostics can compare against the
counterfactual fully-labeled stream.

The fixture constructors build the small worlds used across the test and
verification suites; each asserts its own advertised exact properties at
construction time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import SampleSet
from .worlds import FiniteWorld, HypothesisClass, population_error

__all__ = [
    "Environment",
    "OnlineBatch",
    "generate_logged",
    "stream_online",
    "LinearWorld",
    "LinearDataset",
    "fit_reference_hyperplane",
    "margin_propensity",
    "certainty_policy",
    "uncertainty_policy",
    "sample_linear_dataset",
    "clipping_ladder_world",
    "debias_savings_world",
    "debias_savings_class",
    "noisy_benchmark_world",
    "variance_probe_world",
    "doubling_schedule",
    "random_world",
    "random_class",
    "draw_stack_dataset",
    "RNG_KIND",
    "DEFAULT_Q_MIN",
]

RNG_KIND = "numpy.random.Generator(PCG64)"
DEFAULT_Q_MIN = 0.05


class OnlineBatch:
    """One epoch's unlabeled draws with a costed label oracle.

    ``instances`` is visible to the learner.  ``reveal(i)`` returns the label
    of draw ``i`` and increments the environment's query counter on every
    call.  The full truth is kept for diagnostics only.
    """

    def __init__(self, env: "Environment", instances: np.ndarray, labels: np.ndarray):
        self._env = env
        self.instances = instances
        self._labels = labels

    def __len__(self) -> int:
        return len(self.instances)

    def reveal(self, i: int) -> int:
        self._env._queries_used += 1
        return int(self._labels[i])

    def true_labels_for_diagnostics(self) -> np.ndarray:
        """Uncosted truth, for error accounting and replay checks only."""
        return self._labels.copy()


class Environment:
    """Seeded logged-then-online sampling process for a finite world.

    One environment backs exactly one run: it is not meant to be shared.
    Identical (world, m, n, seed) yields bit-identical streams and counters.
    """

    def __init__(self, world: FiniteWorld, m: int, n: int, seed: int):
        if m <= 0 or n < 0:
            raise ValueError("need a positive logged budget and nonnegative online budget")
        self.world = world
        self.m = m
        self.n = n
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._queries_used = 0
        self._logged_revealed = 0
        self._online_drawn = 0
        self._logged_generated = False
        self._logged_truth: np.ndarray | None = None

    @property
    def queries_used(self) -> int:
        return self._queries_used

    @property
    def logged_revealed(self) -> int:
        return self._logged_revealed

    @property
    def online_drawn(self) -> int:
        return self._online_drawn

    def _draw_instances(self, count: int) -> np.ndarray:
        return self._rng.choice(self.world.size, size=count, p=self.world.mass)

    def _draw_labels(self, xs: np.ndarray) -> np.ndarray:
        u = self._rng.random(len(xs))
        return np.where(u < self.world.label_prob[xs], 1, -1).astype(np.int8)

    def generate_logged(self) -> SampleSet:
        """Draw the logged phase: m iid pairs, labels revealed by propensity flips."""
        if self._logged_generated:
            raise RuntimeError("the logged phase can be generated only once")
        self._logged_generated = True
        xs = self._draw_instances(self.m)
        ys = self._draw_labels(xs)
        zs = (self._rng.random(self.m) < self.world.q0[xs]).astype(np.int8)
        self._logged_truth = ys.copy()
        self._logged_revealed = int(zs.sum())
        shown = np.where(zs == 1, ys, 0).astype(np.int8)
        return SampleSet(x=xs, z=zs, y=shown, epoch=np.zeros(self.m, dtype=np.int32))

    def stream_online(self, count: int) -> OnlineBatch:
        """Draw ``count`` more unlabeled instances from the online stream."""
        if self._online_drawn + count > self.n:
            raise RuntimeError(
                f"online stream exhausted: {self._online_drawn} drawn, "
                f"{count} requested, budget {self.n}"
            )
        self._online_drawn += count
        xs = self._draw_instances(count)
        ys = self._draw_labels(xs)
        return OnlineBatch(self, xs, ys)


def generate_logged(env: Environment, m: int | None = None) -> SampleSet:
    """Module-level alias; ``m`` must match the environment's budget if given."""
    if m is not None and m != env.m:
        raise ValueError("logged budget is fixed at environment construction")
    return env.generate_logged()


def stream_online(env: Environment, count: int) -> OnlineBatch:
    return env.stream_online(count)


# ---------------------------------------------------------------------------
# Linear-mode data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearWorld:
    """Recipe for the synthetic linear-separator dataset.

    Points are uniform on the unit cube, labels come from a random hyperplane
    through the cube's center with independent flip noise.  A small slice is
    held out to fit the reference hyperplane the logging policies are built
    from; the rest splits into train/test, and about half the train rows form
    the logged phase.
    """

    dim: int = 30
    n_points: int = 6000
    noise: float = 0.05
    test_fraction: float = 0.2
    logged_fraction: float = 0.5
    policy_fit_fraction: float = 0.1
    q_min: float = DEFAULT_Q_MIN

    def __post_init__(self):
        if not 0 < self.noise < 0.5:
            raise ValueError("flip noise must lie in (0, 0.5)")
        if not 0 < self.q_min < 1:
            raise ValueError("propensity floor must lie in (0, 1)")


@dataclass
class LinearDataset:
    """Materialized draw of a :class:`LinearWorld` under one logging policy."""

    logged_x: np.ndarray
    logged_y: np.ndarray  # revealed labels only meaningful where logged_z == 1
    logged_z: np.ndarray
    logged_q0: np.ndarray
    stream_x: np.ndarray
    stream_q0: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    _stream_y: np.ndarray = field(repr=False)
    queries_used: int = 0

    @property
    def m(self) -> int:
        return len(self.logged_x)

    @property
    def n(self) -> int:
        return len(self.stream_x)

    def reveal_stream_label(self, i: int) -> int:
        self.queries_used += 1
        return int(self._stream_y[i])

    def test_error(self, weights: np.ndarray) -> float:
        """Held-out error of a linear model; accepts a trailing bias weight."""
        if len(weights) == self.test_x.shape[1] + 1:
            margins = self.test_x @ weights[:-1] + weights[-1]
        else:
            margins = self.test_x @ weights
        pred = np.where(margins >= 0, 1, -1)
        return float(np.mean(pred != self.test_y))


def fit_reference_hyperplane(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One perceptron pass over (x, y); returns augmented weights (bias last)."""
    aug = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros(aug.shape[1])
    for i in range(len(aug)):
        if y[i] * (w @ aug[i]) <= 0:
            w = w + y[i] * aug[i]
    return w


def margin_propensity(
    fit: np.ndarray,
    reference_x: np.ndarray,
    q_min: float = DEFAULT_Q_MIN,
    increasing: bool = True,
):
    """Linear ramp of |margin| into [q_min, 1], normalized by the reference set.

    ``increasing=True`` reveals far-from-hyperplane points more often;
    ``increasing=False`` mirrors the ramp.  Raises if the reference margins
    are degenerate (all zero).
    """
    aug_ref = np.hstack([reference_x, np.ones((len(reference_x), 1))])
    ref_margins = np.abs(aug_ref @ fit)
    max_margin = float(ref_margins.max())
    if max_margin <= 0.0:
        raise ValueError("reference margins are all zero; cannot build a ramp")

    def propensity(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        aug = np.hstack([x, np.ones((len(x), 1))])
        frac = np.clip(np.abs(aug @ fit) / max_margin, 0.0, 1.0)
        ramp = frac if increasing else 1.0 - frac
        return np.clip(q_min + (1.0 - q_min) * ramp, q_min, 1.0)

    return propensity


def certainty_policy(fit: np.ndarray, reference_x: np.ndarray, q_min: float = DEFAULT_Q_MIN):
    """Reveal labels more often the farther a point sits from the hyperplane."""
    return margin_propensity(fit, reference_x, q_min, increasing=True)


def uncertainty_policy(fit: np.ndarray, reference_x: np.ndarray, q_min: float = DEFAULT_Q_MIN):
    """Reveal labels more often the closer a point sits to the hyperplane."""
    return margin_propensity(fit, reference_x, q_min, increasing=False)


def sample_linear_dataset(world: LinearWorld, policy: str, seed: int) -> LinearDataset:
    """Draw one seeded dataset under the named logging policy.

    ``policy`` is ``"certainty"`` or ``"uncertainty"``.  The policy-fit slice
    is carved off first and never enters train or test.
    """
    if policy not in ("certainty", "uncertainty"):
        raise ValueError(f"unknown logging policy {policy!r}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(world.n_points, world.dim))
    direction = rng.normal(size=world.dim)
    direction /= np.linalg.norm(direction)
    bias = float(direction @ np.full(world.dim, 0.5))
    clean = np.where(x @ direction - bias >= 0, 1, -1)
    flips = rng.random(world.n_points) < world.noise
    y = np.where(flips, -clean, clean).astype(np.int8)

    order = rng.permutation(world.n_points)
    n_fit = int(round(world.policy_fit_fraction * world.n_points))
    fit_idx, rest = order[:n_fit], order[n_fit:]
    n_test = int(round(world.test_fraction * len(rest)))
    test_idx, train_idx = rest[:n_test], rest[n_test:]
    n_logged = int(round(world.logged_fraction * len(train_idx)))
    logged_idx, stream_idx = train_idx[:n_logged], train_idx[n_logged:]

    fit = fit_reference_hyperplane(x[fit_idx], y[fit_idx])
    prop = margin_propensity(fit, x[fit_idx], world.q_min, increasing=(policy == "certainty"))
    logged_q0 = prop(x[logged_idx])
    stream_q0 = prop(x[stream_idx])
    logged_z = (rng.random(len(logged_idx)) < logged_q0).astype(np.int8)
    return LinearDataset(
        logged_x=x[logged_idx],
        logged_y=np.where(logged_z == 1, y[logged_idx], 0).astype(np.int8),
        logged_z=logged_z,
        logged_q0=logged_q0,
        stream_x=x[stream_idx],
        stream_q0=stream_q0,
        test_x=x[test_idx],
        test_y=y[test_idx],
        _stream_y=y[stream_idx],
    )


# ---------------------------------------------------------------------------
# Fixture worlds
# ---------------------------------------------------------------------------


def clipping_ladder_world(nu: float, alpha: float) -> tuple[FiniteWorld, HypothesisClass]:
    """Five-instance world whose weight ladder makes the clip rule's m-dependence visible.

    Three inverse-weight levels (1, 1/(4 alpha), 1/alpha) and four classifiers
    whose exact errors are nu, nu + 3 eps, nu + 15 eps and 1 - nu - 20 eps
    with eps = nu / (1 + 1/(100 alpha)).  Labels are deterministically -1,
    which is the labeling that realizes those printed errors; they are
    asserted here so a drifting construction fails loudly.
    """
    if not 0 < nu < 0.1:
        raise ValueError("need nu < 1/10")
    if not 0 < alpha < 0.01:
        raise ValueError("need alpha < 0.01")
    eps = nu / (1.0 + 1.0 / (100.0 * alpha))
    mass = [nu - eps, eps, 4.0 * eps, 16.0 * eps, 1.0 - nu - 20.0 * eps]
    world = FiniteWorld(
        mass=mass,
        label_prob=[0.0, 0.0, 0.0, 0.0, 0.0],
        q0=[1.0, alpha, alpha, 4.0 * alpha, 4.0 * alpha],
    )
    hclass = HypothesisClass(
        predictions=np.array(
            [
                [1, 1, -1, -1, -1],
                [1, -1, 1, -1, -1],
                [1, -1, -1, 1, -1],
                [-1, -1, -1, -1, 1],
            ],
            dtype=np.int8,
        )
    )
    expected = [nu, nu + 3 * eps, nu + 15 * eps, 1 - nu - 20 * eps]
    for i, want in enumerate(expected):
        got = population_error(world, hclass.vector(i))
        if abs(got - want) > 1e-12:
            raise AssertionError(f"ladder error {i}: {got!r} != {want!r}")
    return world, hclass


def debias_savings_world(mu: float, alpha: float, lam: float) -> FiniteWorld:
    """Two-instance world where the derived query policy touches only the rare instance.

    The common instance is always logged, the rare one almost never, so the
    accumulated-mass gate keeps querying only the rare one.  ``lam`` scales
    the preconditions mu <= 1/(4 lam) and alpha <= mu^2 / (2 lam).  Labels are
    pure coin flips so a complementary classifier pair stays statistically
    indistinguishable and the disagreement region never collapses.
    """
    if lam < 1:
        raise ValueError("scale parameter must be at least 1")
    if mu > 1.0 / (4.0 * lam):
        raise ValueError("rare-instance mass too large for this scale")
    if alpha > mu**2 / (2.0 * lam):
        raise ValueError("rare-instance propensity too large for this scale")
    return FiniteWorld(mass=[1.0 - mu, mu], label_prob=[0.5, 0.5], q0=[1.0, alpha])


def debias_savings_class() -> HypothesisClass:
    """Complementary pair disagreeing everywhere; companion to the savings world."""
    return HypothesisClass(predictions=np.array([[1, 1], [-1, -1]], dtype=np.int8))


def noisy_benchmark_world(
    nu: float = 0.05, seed: int = 50423
) -> tuple[FiniteWorld, HypothesisClass]:
    """20-instance, 32-hypothesis benchmark whose difficulty scales with data.

    Four "pocket" instances are rarely logged (propensity 0.03-0.05) and
    carry most of the label noise; sixteen well-covered core instances carry
    the rest, scaled so the optimum's error is exactly ``nu``.  The class is
    the optimum, its sixteen single-core-flip rivals (cheap to eliminate),
    and all fifteen pocket-subset flips, whose excess errors (roughly 0.008
    to 0.037) can only be resolved by actually observing pocket labels.
    With little data the pocket is invisible, every pocket rival ties the
    optimum exactly, and ties resolve by index, so the optimum deliberately
    sits last: convergence has to be earned, not granted by ordering.
    """
    import itertools

    rng = np.random.default_rng(seed)
    pocket_mass = np.array([0.022, 0.031, 0.04, 0.027])
    pocket_q0 = np.array([0.03, 0.04, 0.03, 0.05])
    pocket_flip = np.array([0.32, 0.36, 0.40, 0.34])
    core_mass_raw = 0.3 + rng.random(16)
    core_mass = core_mass_raw / core_mass_raw.sum() * (1.0 - pocket_mass.sum())
    core_q0 = np.round(0.3 + 0.7 * rng.random(16), 3)
    pocket_noise = float((pocket_mass * pocket_flip).sum())
    if nu <= pocket_noise:
        raise ValueError("optimal error too small for the pocket noise budget")
    core_flip_raw = rng.uniform(0.2, 1.0, 16)
    core_flip = core_flip_raw * (nu - pocket_noise) / float((core_mass * core_flip_raw).sum())

    mass = np.concatenate([pocket_mass, core_mass])
    q0 = np.concatenate([pocket_q0, core_q0])
    flip = np.concatenate([pocket_flip, core_flip])
    reference = np.where(rng.random(20) < 0.5, 1, -1).astype(np.int8)
    label_prob = np.where(reference > 0, 1.0 - flip, flip)

    rows = []
    for r in range(4, 0, -1):  # largest pocket flips first
        for combo in itertools.combinations(range(4), r):
            h = reference.copy()
            for i in combo:
                h[i] = -h[i]
            rows.append(h)
    for j in range(16):
        h = reference.copy()
        h[4 + j] = -h[4 + j]
        rows.append(h)
    rows.append(reference)
    hclass = HypothesisClass(predictions=np.array(rows, dtype=np.int8))
    world = FiniteWorld(mass=mass, label_prob=label_prob, q0=q0)
    got_nu = population_error(world, reference)
    if abs(got_nu - nu) > 1e-12:
        raise AssertionError(f"benchmark optimum drifted: {got_nu!r}")
    return world, hclass


def variance_probe_world() -> tuple[FiniteWorld, HypothesisClass]:
    """Small fixed world with uneven propensities, for deviation spot checks."""
    world = FiniteWorld(
        mass=[0.35, 0.25, 0.2, 0.15, 0.05],
        label_prob=[0.9, 0.8, 0.3, 0.15, 0.6],
        q0=[1.0, 0.6, 0.35, 0.2, 0.08],
    )
    hclass = HypothesisClass(
        predictions=np.array(
            [
                [1, 1, -1, -1, 1],
                [1, 1, -1, -1, -1],
                [1, -1, -1, 1, 1],
                [-1, 1, 1, -1, 1],
            ],
            dtype=np.int8,
        )
    )
    return world, hclass


def doubling_schedule(total: int, tau1: int = 1) -> tuple[int, ...]:
    """Doubling epoch sizes summing to ``total``; stays nondecreasing.

    The remainder after the last full doubling is merged into a final epoch,
    which is at least as large as its predecessor.
    """
    if total <= 0 or tau1 <= 0:
        raise ValueError("schedule sizes must be positive")
    taus: list[int] = []
    size, left = tau1, total
    while left > 0:
        if size * 3 > left:  # leftover would break monotonicity; absorb it
            taus.append(left)
            left = 0
        else:
            taus.append(size)
            left -= size
            size *= 2
    return tuple(taus)


def random_world(
    rng: np.random.Generator,
    size: int,
    q0_range: tuple[float, float] = (0.05, 1.0),
) -> FiniteWorld:
    """Random world for property tests: Dirichlet masses, free labels, boxed propensities."""
    mass = rng.dirichlet(np.ones(size))
    label_prob = rng.random(size)
    lo, hi = q0_range
    q0 = lo + (hi - lo) * rng.random(size)
    return FiniteWorld(mass=mass, label_prob=label_prob, q0=q0)


def random_class(rng: np.random.Generator, n_instances: int, count: int) -> HypothesisClass:
    preds = np.where(rng.random((count, n_instances)) < 0.5, 1, -1).astype(np.int8)
    return HypothesisClass(predictions=preds)


def draw_stack_dataset(world: FiniteWorld, stack, rng: np.random.Generator) -> SampleSet:
    """Draw a full true-labeled dataset for a fixed policy stack.

    Logged-phase observation flags are propensity coin flips; online epochs
    use their 0/1 indicator policies directly.  Labels are attached wherever
    z = 1.  Used by unbiasedness checks, where the estimators must see data
    generated exactly by the process the weights assume.
    """
    xs = rng.choice(world.size, size=stack.m, p=world.mass)
    zs = (rng.random(stack.m) < world.q0[xs]).astype(np.int8)
    all_x = [xs]
    all_z = [zs]
    all_e = [np.zeros(stack.m, dtype=np.int32)]
    for i, tau in enumerate(stack.taus[: len(stack.epoch_policies)]):
        ex = rng.choice(world.size, size=tau, p=world.mass)
        ez = stack.epoch_policies[i][ex].astype(np.int8)
        all_x.append(ex)
        all_z.append(ez)
        all_e.append(np.full(tau, i + 1, dtype=np.int32))
    x = np.concatenate(all_x)
    z = np.concatenate(all_z)
    epoch = np.concatenate(all_e)
    u = rng.random(len(x))
    y_true = np.where(u < world.label_prob[x], 1, -1).astype(np.int8)
    y = np.where(z == 1, y_true, 0).astype(np.int8)
    return SampleSet(x=x, z=z, y=y, epoch=epoch)
