"""Loss and second-moment estimators for logged plus actively collected data.

The estimators come in three families:

* plain inverse-propensity weighting over the logged phase,
* clipped inverse-propensity weighting, with a principled rule for picking
  the clip bound from the weight distribution, and
* mixture weighting over several collection policies at once, which treats
  every sample as if drawn from the pooled policy ``(m Q0 + sum tau_i Q_i)/N``.

All estimators stream over the samples in one pass and accumulate with
``math.fsum`` so that split/merge identities hold to float precision.
Samples are stored columnwise (:class:`SampleSet`) so the hot paths can
aggregate per instance before summing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .worlds import FiniteWorld

__all__ = [
    "Sample",
    "SampleSet",
    "PolicyStack",
    "ClipConfig",
    "NO_CLIP",
    "iw_loss",
    "second_moment",
    "clipped_iw_loss",
    "choose_clip_threshold",
    "empirical_weight_distribution",
    "mis_weight",
    "mis_loss",
    "mis_loss_gap",
    "mis_second_moment",
    "mis_second_moment_pair",
    "per_policy_iw_loss",
    "per_policy_second_moment",
    "per_policy_second_moment_pair",
    "debias_policy",
    "debias_closed_form",
    "samples_to_csv",
    "samples_from_csv",
]


@dataclass(frozen=True)
class Sample:
    """One observation record: instance, observation flag, label, epoch.

    ``y`` is meaningful only when ``z == 1``; epoch 0 is the logged phase.
    """

    x: int
    z: int
    y: Optional[int] = None
    epoch: int = 0

    def __post_init__(self):
        if self.z not in (0, 1):
            raise ValueError("observation flag must be 0 or 1")
        if self.z == 1 and self.y not in (-1, 1):
            raise ValueError("observed samples need a -1/+1 label")
        if self.z == 0 and self.y is not None:
            raise ValueError("unobserved samples carry no label")
        if self.epoch < 0:
            raise ValueError("epoch must be nonnegative")


class SampleSet:
    """Columnar batch of samples.

    ``y`` holds 0 for unobserved rows; estimator code only reads labels under
    the ``z == 1`` mask, so the sentinel never leaks into a value.
    """

    __slots__ = ("x", "z", "y", "epoch")

    def __init__(self, x, z, y, epoch):
        self.x = np.asarray(x, dtype=np.int64)
        self.z = np.asarray(z, dtype=np.int8)
        self.y = np.asarray(y, dtype=np.int8)
        self.epoch = np.asarray(epoch, dtype=np.int32)
        n = len(self.x)
        if not (len(self.z) == len(self.y) == len(self.epoch) == n):
            raise ValueError("sample columns must share a length")
        if np.any((self.z == 1) & (np.abs(self.y) != 1)):
            raise ValueError("observed samples need a -1/+1 label")
        if np.any((self.z == 0) & (self.y != 0)):
            raise ValueError("unobserved samples carry no label")

    # -- construction -----------------------------------------------------
    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "SampleSet":
        rows = list(samples)
        return cls(
            x=[s.x for s in rows],
            z=[s.z for s in rows],
            y=[0 if s.y is None else s.y for s in rows],
            epoch=[s.epoch for s in rows],
        )

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(x=[], z=[], y=[], epoch=[])

    def to_samples(self) -> list[Sample]:
        return [
            Sample(
                x=int(self.x[i]),
                z=int(self.z[i]),
                y=int(self.y[i]) if self.z[i] == 1 else None,
                epoch=int(self.epoch[i]),
            )
            for i in range(len(self))
        ]

    # -- basic protocol ----------------------------------------------------
    def __len__(self) -> int:
        return len(self.x)

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            x=np.concatenate([self.x, other.x]),
            z=np.concatenate([self.z, other.z]),
            y=np.concatenate([self.y, other.y]),
            epoch=np.concatenate([self.epoch, other.epoch]),
        )

    def subset(self, mask_or_index) -> "SampleSet":
        idx = np.asarray(mask_or_index)
        return SampleSet(self.x[idx], self.z[idx], self.y[idx], self.epoch[idx])

    def with_flipped_label(self, i: int) -> "SampleSet":
        """Copy of the set with sample ``i``'s observed label negated."""
        if self.z[i] != 1:
            raise ValueError("cannot flip the label of an unobserved sample")
        y = self.y.copy()
        y[i] = -y[i]
        return SampleSet(self.x.copy(), self.z.copy(), y, self.epoch.copy())

    def max_epoch(self) -> int:
        return int(self.epoch.max()) if len(self) else 0


def samples_to_csv(samples: SampleSet) -> str:
    """Rows ``epoch,x,z,y`` with an empty label field when z = 0."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["epoch", "x", "z", "y"])
    for i in range(len(samples)):
        y = str(int(samples.y[i])) if samples.z[i] == 1 else ""
        writer.writerow([int(samples.epoch[i]), int(samples.x[i]), int(samples.z[i]), y])
    return out.getvalue()


def samples_from_csv(text: str) -> SampleSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["epoch", "x", "z", "y"]:
        raise ValueError(f"unexpected sample CSV header: {header}")
    xs, zs, ys, epochs = [], [], [], []
    for row in reader:
        if not row:
            continue
        epochs.append(int(row[0]))
        xs.append(int(row[1]))
        z = int(row[2])
        zs.append(z)
        ys.append(int(row[3]) if z == 1 else 0)
    return SampleSet(xs, zs, ys, epochs)


# ---------------------------------------------------------------------------
# Clip configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClipConfig:
    """Clip bound for importance weights; ``math.inf`` disables clipping."""

    bound: float = math.inf

    def __post_init__(self):
        if self.bound < 1.0:
            raise ValueError("clip bound must be at least 1")

    @classmethod
    def none(cls) -> "ClipConfig":
        return cls(math.inf)

    @classmethod
    def at(cls, bound: float) -> "ClipConfig":
        return cls(float(bound))

    @property
    def active(self) -> bool:
        return math.isfinite(self.bound)


NO_CLIP = ClipConfig()


# ---------------------------------------------------------------------------
# Policy stacks and mixture weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyStack:
    """The logging policy plus the per-epoch online query policies.

    ``taus`` is the nondecreasing epoch schedule; ``epoch_policies[i]`` is the
    0/1 query indicator for epoch ``i + 1`` as an array over instances.  The
    logged phase contributes ``m`` samples under the world's propensities.
    """

    world: FiniteWorld
    m: int
    taus: tuple[int, ...]
    epoch_policies: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        if self.m <= 0:
            raise ValueError("logged sample count must be positive")
        if any(t <= 0 for t in taus):
            raise ValueError("epoch sizes must be positive")
        if any(a > b for a, b in zip(taus, taus[1:])):
            raise ValueError("epoch schedule must be nondecreasing")
        policies = []
        for q in self.epoch_policies:
            arr = np.asarray(q, dtype=np.int8)
            if arr.shape != (self.world.size,):
                raise ValueError("policy array must cover every instance")
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("online query policies must be 0/1 indicators")
            policies.append(arr)
        if len(policies) > len(taus):
            raise ValueError("more epoch policies than scheduled epochs")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "epoch_policies", tuple(policies))

    @property
    def n_epochs(self) -> int:
        return len(self.taus)

    def n(self, k: int) -> int:
        """Cumulative online sample count through epoch k."""
        if k < 0 or k > len(self.taus):
            raise ValueError(f"epoch index {k} outside schedule")
        return sum(self.taus[:k])

    def count(self, k: int) -> int:
        """Total samples available at epoch k (logged plus online)."""
        return self.m + self.n(k)

    def with_policy(self, q: np.ndarray) -> "PolicyStack":
        """New stack with one more derived epoch policy appended."""
        return PolicyStack(
            world=self.world,
            m=self.m,
            taus=self.taus,
            epoch_policies=self.epoch_policies + (np.asarray(q, dtype=np.int8),),
        )

    def mixture_denominator(self, k: int) -> np.ndarray:
        """Per-instance ``m Q0 + sum_{i<=k} tau_i Q_i``."""
        if k > len(self.epoch_policies):
            raise ValueError(f"epoch {k} policies have not been derived yet")
        denom = self.m * self.world.q0.astype(float)
        for i in range(k):
            denom = denom + self.taus[i] * self.epoch_policies[i].astype(float)
        return denom

    def weights(self, k: int) -> np.ndarray:
        """Per-instance mixture importance weights at epoch k."""
        return self.count(k) / self.mixture_denominator(k)

    def allquery_weights(self, k: int) -> np.ndarray:
        """Weights if every online epoch had queried everything.

        This is the weight variable the clip-threshold rule measures, and an
        upper bound profile used by the run diagnostics.
        """
        return self.count(k) / (self.m * self.world.q0 + self.n(k))


def mis_weight(x: int, k: int, stack: PolicyStack) -> float:
    """Mixture importance weight of instance ``x`` at epoch ``k``."""
    return float(stack.weights(k)[x])


def debias_policy(x: int, k: int, stack: PolicyStack) -> int:
    """Query indicator for epoch ``k`` at instance ``x``, derived recursively.

    Epoch j queries x iff the mass already collected there,
    ``m Q0(x) + sum_{i<j} tau_i Q_i(x)``, falls short of ``m Q0(x)/2 + n_j``.
    Earlier epochs' indicators are re-derived by the same rule, not read from
    the stack, so this function is an independent route to the policy.
    """
    if k < 1:
        raise ValueError("query policies are defined for epochs k >= 1")
    if k > len(stack.taus):
        raise ValueError(f"epoch {k} outside the schedule")
    q0x = float(stack.world.q0[x])
    m = stack.m
    derived: list[int] = []
    for j in range(1, k + 1):
        acc = m * q0x + sum(stack.taus[i] * derived[i] for i in range(j - 1))
        derived.append(1 if acc < 0.5 * m * q0x + stack.n(j) else 0)
    return derived[-1]


def debias_closed_form(x: int, k: int, stack: PolicyStack) -> int:
    """Closed form of :func:`debias_policy`: 1{2 n_k - m Q0(x) > 0}."""
    if k < 1:
        raise ValueError("query policies are defined for epochs k >= 1")
    if k > len(stack.taus):
        raise ValueError(f"epoch {k} outside the schedule")
    return int(2 * stack.n(k) - stack.m * float(stack.world.q0[x]) > 0)


# ---------------------------------------------------------------------------
# Core accumulation
# ---------------------------------------------------------------------------


class WeightScheme:
    """Per-sample weights factored through a small integer key.

    Every sample maps to a key; all samples with the same key share a weight
    and an instance.  Mixture weighting keys on the instance alone; the
    per-policy scheme splits logged and online samples of the same instance
    into separate keys.  Accumulation then reduces to one ``bincount`` plus an
    exact ``fsum`` over at most ``n_keys`` terms, in fixed key order, which is
    what makes split/merge identities and label-locality checks bit-stable.
    """

    __slots__ = ("keys", "weight_by_key", "instance_by_key")

    def __init__(self, keys, weight_by_key, instance_by_key):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.weight_by_key = np.asarray(weight_by_key, dtype=float)
        self.instance_by_key = np.asarray(instance_by_key, dtype=np.int64)

    @property
    def n_keys(self) -> int:
        return len(self.weight_by_key)

    @classmethod
    def per_instance(cls, samples: SampleSet, weights: np.ndarray) -> "WeightScheme":
        weights = np.asarray(weights, dtype=float)
        return cls(samples.x, weights, np.arange(len(weights)))

    @classmethod
    def per_policy(cls, samples: SampleSet, world: FiniteWorld) -> "WeightScheme":
        d = world.size
        keys = samples.x + d * (samples.epoch != 0)
        weight_by_key = np.concatenate([world.inverse_weights(), np.ones(d)])
        return cls(keys, weight_by_key, np.tile(np.arange(d), 2))


def _error_term_sum(
    samples: SampleSet, scheme: WeightScheme, clip_bound: float, h: np.ndarray, power: int
) -> float:
    """fsum of ``w^power`` over observed, unclipped samples that ``h`` mislabels."""
    w = scheme.weight_by_key[scheme.keys]
    keep = (samples.z == 1) & (w <= clip_bound)
    err = keep & (h[samples.x] != samples.y)
    counts = np.bincount(scheme.keys[err], minlength=scheme.n_keys)
    return math.fsum((scheme.weight_by_key**power) * counts)


def _pair_term_sum(
    samples: SampleSet,
    scheme: WeightScheme,
    clip_bound: float,
    h1: np.ndarray,
    h2: np.ndarray,
) -> float:
    """fsum of ``w^2`` over observed, unclipped samples where h1 and h2 differ.

    Label-free by construction: only the instance column is consulted.
    """
    w = scheme.weight_by_key[scheme.keys]
    keep = (samples.z == 1) & (w <= clip_bound)
    differ = keep & (h1[samples.x] != h2[samples.x])
    counts = np.bincount(scheme.keys[differ], minlength=scheme.n_keys)
    return math.fsum((scheme.weight_by_key**2) * counts)


def _gap_term_sum(
    samples: SampleSet,
    scheme: WeightScheme,
    clip_bound: float,
    h1: np.ndarray,
    h2: np.ndarray,
) -> float:
    """fsum of ``w * (err1 - err2)`` terms; zero wherever h1 and h2 agree.

    Samples on which the two hypotheses agree contribute a structural zero,
    so mutating labels outside their disagreement region cannot change the
    result, bit for bit.
    """
    w = scheme.weight_by_key[scheme.keys]
    keep = (samples.z == 1) & (w <= clip_bound)
    differ = keep & (h1[samples.x] != h2[samples.x])
    plus = differ & (h1[samples.x] != samples.y)
    minus = differ & ~(h1[samples.x] != samples.y)
    signed = np.bincount(scheme.keys[plus], minlength=scheme.n_keys) - np.bincount(
        scheme.keys[minus], minlength=scheme.n_keys
    )
    return math.fsum(scheme.weight_by_key * signed)


def _require_nonempty(samples: SampleSet):
    if len(samples) == 0:
        raise ValueError("estimator needs a nonempty sample set")


def _require_logged_only(samples: SampleSet):
    if np.any(samples.epoch != 0):
        raise ValueError("this estimator applies to logged-phase samples only")


def _resolve_epoch(samples: SampleSet, k: Optional[int], stack: PolicyStack) -> int:
    kk = samples.max_epoch() if k is None else int(k)
    if np.any(samples.epoch > kk):
        raise ValueError(f"sample set contains epochs beyond {kk}")
    if kk > stack.n_epochs:
        raise ValueError(f"epoch {kk} outside the schedule")
    return kk


# ---------------------------------------------------------------------------
# Logged-phase estimators
# ---------------------------------------------------------------------------


def iw_loss(h: np.ndarray, samples: SampleSet, world: FiniteWorld) -> float:
    """Importance weighted error estimate (1/m) sum 1{h(x) != y} z / Q0(x)."""
    _require_nonempty(samples)
    _require_logged_only(samples)
    scheme = WeightScheme.per_instance(samples, world.inverse_weights())
    return _error_term_sum(samples, scheme, math.inf, np.asarray(h), 1) / len(samples)


def clipped_iw_loss(
    h: np.ndarray, samples: SampleSet, world: FiniteWorld, M: float
) -> float:
    """Importance weighted error with weights above ``M`` zeroed out."""
    if M < 1.0:
        raise ValueError("clip bound must be at least 1")
    _require_nonempty(samples)
    _require_logged_only(samples)
    scheme = WeightScheme.per_instance(samples, world.inverse_weights())
    return _error_term_sum(samples, scheme, M, np.asarray(h), 1) / len(samples)


def second_moment(
    h: np.ndarray,
    samples: SampleSet,
    world: FiniteWorld,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """Empirical second moment (1/m) sum (1{h != y} z / Q0)^2, optionally clipped."""
    _require_nonempty(samples)
    _require_logged_only(samples)
    scheme = WeightScheme.per_instance(samples, world.inverse_weights())
    return _error_term_sum(samples, scheme, clip.bound, np.asarray(h), 2) / len(samples)


# ---------------------------------------------------------------------------
# Clip threshold selection
# ---------------------------------------------------------------------------


def empirical_weight_distribution(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and frequencies of an observed weight sample."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one weight observation")
    atoms, counts = np.unique(arr, return_counts=True)
    return atoms, counts / arr.size


def choose_clip_threshold(
    weights: Sequence[float],
    probs: Sequence[float],
    count: int,
    log_term: float,
    variant: str = "passive",
) -> float:
    """Smallest clip bound whose tail condition holds.

    Returns ``inf{M >= 1 : (2 M / count) * log_term >= Pr(W > M)}`` for the
    ``"passive"`` variant; the ``"active"`` variant evaluates the tail at
    ``M / 2`` instead.  The left side is an increasing line and the tail a
    right-continuous, nonincreasing step function, so the infimum is computed
    exactly by scanning the tail's jump points in order.  The condition always
    holds once ``M`` clears twice the largest atom, so the scan terminates.

    ``weights``/``probs`` describe the distribution of the weight variable,
    either exactly (per-instance weights with instance masses) or empirically
    (observed weights with frequencies 1/n).
    """
    if log_term <= 0:
        raise ValueError("log term must be positive")
    if count <= 0:
        raise ValueError("sample count must be positive")
    if variant not in ("passive", "active"):
        raise ValueError(f"unknown threshold variant {variant!r}")
    w = np.asarray(weights, dtype=float)
    p = np.asarray(probs, dtype=float)
    if w.shape != p.shape or w.ndim != 1 or w.size == 0:
        raise ValueError("weights and probabilities must be matching 1-d arrays")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("probabilities must be nonnegative and sum to 1")
    scale = 2.0 if variant == "active" else 1.0
    scaled = w * scale
    atoms = np.unique(scaled)
    masses = np.array([float(p[scaled == a].sum()) for a in atoms])

    slope = 2.0 * log_term / count
    a = 1.0
    above = atoms > 1.0
    tail = float(masses[above].sum())
    edges = [float(v) for v in atoms[above]] + [math.inf]
    edge_masses = [float(v) for v in masses[above]] + [0.0]
    for edge, edge_mass in zip(edges, edge_masses):
        cross = tail / slope
        cand = a if cross <= a else cross
        if cand < edge:
            return float(cand)
        tail -= edge_mass
        a = edge
    raise AssertionError("threshold scan failed to terminate")  # pragma: no cover


# ---------------------------------------------------------------------------
# Mixture-weighted estimators
# ---------------------------------------------------------------------------


def mis_loss(
    h: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """Clipped mixture-weighted error estimate over samples up to epoch ``k``.

    (1/N) sum w_k(x) z 1{h(x) != y} 1{w_k(x) <= M}, with N the number of
    samples supplied.  When ``k`` is omitted it defaults to the largest epoch
    present; passing samples from beyond ``k`` is an error.
    """
    _require_nonempty(samples)
    kk = _resolve_epoch(samples, k, stack)
    scheme = WeightScheme.per_instance(samples, stack.weights(kk))
    return _error_term_sum(samples, scheme, clip.bound, np.asarray(h), 1) / len(samples)


def mis_loss_gap(
    h1: np.ndarray,
    h2: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """Difference ``mis_loss(h1) - mis_loss(h2)`` computed term by term.

    Samples where the two hypotheses agree contribute exactly zero, so the
    gap depends only on labels inside their disagreement region.
    """
    _require_nonempty(samples)
    kk = _resolve_epoch(samples, k, stack)
    scheme = WeightScheme.per_instance(samples, stack.weights(kk))
    return _gap_term_sum(samples, scheme, clip.bound, np.asarray(h1), np.asarray(h2)) / len(
        samples
    )


def mis_second_moment(
    h: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """(1/N) sum w_k^2 z 1{h(x) != y} 1{w_k <= M}."""
    _require_nonempty(samples)
    kk = _resolve_epoch(samples, k, stack)
    scheme = WeightScheme.per_instance(samples, stack.weights(kk))
    return _error_term_sum(samples, scheme, clip.bound, np.asarray(h), 2) / len(samples)


def mis_second_moment_pair(
    h1: np.ndarray,
    h2: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """(1/N) sum w_k^2 z 1{h1(x) != h2(x)} 1{w_k <= M}; needs no labels."""
    _require_nonempty(samples)
    kk = _resolve_epoch(samples, k, stack)
    scheme = WeightScheme.per_instance(samples, stack.weights(kk))
    return _pair_term_sum(samples, scheme, clip.bound, np.asarray(h1), np.asarray(h2)) / len(
        samples
    )


# ---------------------------------------------------------------------------
# Per-policy (non-mixture) weighting, used by the mixture-off ablation
# ---------------------------------------------------------------------------


def _per_policy_scheme(samples: SampleSet, stack: PolicyStack) -> WeightScheme:
    """Each sample weighted by the inverse of its own epoch's policy.

    Logged samples get 1/Q0(x); online samples were collected by 0/1
    indicator policies, so every observed one has weight 1.
    """
    return WeightScheme.per_policy(samples, stack.world)


def per_policy_iw_loss(
    h: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    """Pooled estimate with each epoch importance-weighted separately."""
    _require_nonempty(samples)
    _resolve_epoch(samples, k, stack)
    scheme = _per_policy_scheme(samples, stack)
    return _error_term_sum(samples, scheme, clip.bound, np.asarray(h), 1) / len(samples)


def per_policy_second_moment(
    h: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    _require_nonempty(samples)
    _resolve_epoch(samples, k, stack)
    scheme = _per_policy_scheme(samples, stack)
    return _error_term_sum(samples, scheme, clip.bound, np.asarray(h), 2) / len(samples)


def per_policy_second_moment_pair(
    h1: np.ndarray,
    h2: np.ndarray,
    samples: SampleSet,
    stack: PolicyStack,
    k: Optional[int] = None,
    clip: ClipConfig = NO_CLIP,
) -> float:
    _require_nonempty(samples)
    _resolve_epoch(samples, k, stack)
    scheme = _per_policy_scheme(samples, stack)
    return _pair_term_sum(samples, scheme, clip.bound, np.asarray(h1), np.asarray(h2)) / len(
        samples
    )
