"""Finite instance spaces, hypothesis classes, and exact population quantities.

Everything in this module is exact: the instance space is enumerated, so
population errors, distances between classifiers, disagreement regions and
their masses all reduce to finite sums.  That is what lets the rest of the
library check estimators against closed-form ground truth instead of Monte
Carlo approximations.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "FiniteWorld",
    "HypothesisClass",
    "CandidateSet",
    "population_error",
    "best_hypothesis",
    "hypothesis_distance",
    "ball",
    "disagreement_region",
    "region_mass",
    "modified_dis_coefficient",
    "disagreement_coefficient",
    "sup_modified_dis_coefficient",
    "default_radius_grid",
    "world_to_doc",
    "world_from_doc",
    "dump_world_json",
    "load_world_json",
]

MASS_TOL = 1e-12


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FiniteWorld:
    """Exact joint distribution over an enumerated instance space.

    ``mass[i]`` is the probability of drawing instance ``i``, ``label_prob[i]``
    the conditional probability that its label is +1, and ``q0[i]`` the
    probability that a logged draw of instance ``i`` has its label revealed.
    ``q0`` must be strictly positive everywhere: the importance weights are
    inverse propensities and an unobservable instance would make them
    undefined.
    """

    mass: np.ndarray
    label_prob: np.ndarray
    q0: np.ndarray

    def __post_init__(self):
        mass = _frozen_array(self.mass, float)
        label_prob = _frozen_array(self.label_prob, float)
        q0 = _frozen_array(self.q0, float)
        if not (mass.ndim == label_prob.ndim == q0.ndim == 1):
            raise ValueError("world fields must be one-dimensional")
        if not (len(mass) == len(label_prob) == len(q0)) or len(mass) == 0:
            raise ValueError("world fields must share a nonzero length")
        if np.any(mass < 0.0):
            raise ValueError("instance masses must be nonnegative")
        if abs(float(mass.sum()) - 1.0) > MASS_TOL:
            raise ValueError(f"instance masses must sum to 1, got {mass.sum()!r}")
        if np.any(label_prob < 0.0) or np.any(label_prob > 1.0):
            raise ValueError("label probabilities must lie in [0, 1]")
        if np.any(q0 <= 0.0) or np.any(q0 > 1.0):
            raise ValueError("logging propensities must lie in (0, 1]")
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "label_prob", label_prob)
        object.__setattr__(self, "q0", q0)

    @property
    def size(self) -> int:
        return len(self.mass)

    @property
    def instances(self) -> range:
        return range(self.size)

    @property
    def min_propensity(self) -> float:
        """Smallest logging propensity over the instance space."""
        return float(self.q0.min())

    def inverse_weights(self) -> np.ndarray:
        """Per-instance importance weight 1 / q0."""
        return 1.0 / self.q0

    def propensity_cdf(self, x: float) -> float:
        """Pr(Q0(X) <= x) under the instance distribution."""
        return float(self.mass[self.q0 <= x].sum())


@dataclass(frozen=True)
class HypothesisClass:
    """A finite set of +/-1 labelings of the instance space.

    ``predictions`` has one row per hypothesis and one column per instance.
    Duplicate rows are permitted (they happen in randomly generated classes)
    but are surfaced through :meth:`duplicate_groups` so diagnostics can flag
    them.
    """

    predictions: np.ndarray

    def __post_init__(self):
        preds = _frozen_array(self.predictions, np.int8)
        if preds.ndim != 2 or preds.shape[0] == 0:
            raise ValueError("a hypothesis class needs at least one hypothesis")
        if not np.all(np.abs(preds) == 1):
            raise ValueError("hypothesis entries must be -1 or +1")
        object.__setattr__(self, "predictions", preds)

    @property
    def size(self) -> int:
        return self.predictions.shape[0]

    @property
    def n_instances(self) -> int:
        return self.predictions.shape[1]

    def vector(self, index: int) -> np.ndarray:
        return self.predictions[index]

    def duplicate_groups(self) -> list[tuple[int, ...]]:
        """Groups of indices whose labelings coincide (size >= 2 only)."""
        seen: dict[bytes, list[int]] = {}
        for i in range(self.size):
            seen.setdefault(self.predictions[i].tobytes(), []).append(i)
        return [tuple(g) for g in seen.values() if len(g) > 1]

    @property
    def has_duplicates(self) -> bool:
        return bool(self.duplicate_groups())


@dataclass(frozen=True)
class CandidateSet:
    """An index subset of a hypothesis class."""

    member_indices: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(i) for i in self.member_indices)
        if len(set(members)) != len(members):
            raise ValueError("candidate set indices must be distinct")
        object.__setattr__(self, "member_indices", tuple(sorted(members)))

    def __len__(self) -> int:
        return len(self.member_indices)

    def __contains__(self, index: int) -> bool:
        return index in set(self.member_indices)


def _check_vector(world: FiniteWorld, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.shape != (world.size,):
        raise ValueError(
            f"hypothesis has {h.shape} entries, world has {world.size} instances"
        )
    return h


def population_error(world: FiniteWorld, h: np.ndarray) -> float:
    """Exact error rate Pr(h(X) != Y) of a +/-1 labeling."""
    h = _check_vector(world, h)
    wrong = np.where(h > 0, 1.0 - world.label_prob, world.label_prob)
    return float(np.dot(world.mass, wrong))


def best_hypothesis(world: FiniteWorld, hclass: HypothesisClass) -> tuple[int, float]:
    """Index and error of the population error minimizer; ties go to the lowest index."""
    errors = [population_error(world, hclass.vector(i)) for i in range(hclass.size)]
    best = int(np.argmin(errors))
    return best, errors[best]


def hypothesis_distance(world: FiniteWorld, h1: np.ndarray, h2: np.ndarray) -> float:
    """Probability mass of the region where two labelings disagree."""
    h1 = _check_vector(world, h1)
    h2 = _check_vector(world, h2)
    return float(world.mass[h1 != h2].sum())


def ball(
    world: FiniteWorld, hclass: HypothesisClass, center: int | np.ndarray, r: float
) -> CandidateSet:
    """All hypotheses within disagreement mass ``r`` of ``center``."""
    if r < 0:
        raise ValueError("ball radius must be nonnegative")
    center_vec = hclass.vector(center) if np.isscalar(center) else np.asarray(center)
    members = [
        i
        for i in range(hclass.size)
        if hypothesis_distance(world, center_vec, hclass.vector(i)) <= r
    ]
    return CandidateSet(tuple(members))


def disagreement_region(hclass: HypothesisClass, cand: CandidateSet) -> np.ndarray:
    """Instance indices on which at least two members of ``cand`` differ."""
    if len(cand) <= 1:
        return np.empty(0, dtype=int)
    rows = hclass.predictions[list(cand.member_indices)]
    differs = np.any(rows != rows[0], axis=0)
    return np.flatnonzero(differs)


def region_mass(world: FiniteWorld, region: np.ndarray) -> float:
    """Probability mass of an instance index subset."""
    region = np.asarray(region, dtype=int)
    return float(world.mass[region].sum()) if region.size else 0.0


def modified_dis_coefficient(
    world: FiniteWorld,
    hclass: HypothesisClass,
    r: float,
    t: float,
    center: int | None = None,
) -> float:
    """Disagreement-mass ratio restricted to the low-propensity region.

    Returns (1/r) * Pr(DIS(B(h*, r)) intersect {x : Q0(x) <= 1/t}) where h*
    is the population error minimizer (or ``center`` when supplied).  With
    t = 1 the propensity restriction is vacuous and this reduces to the
    standard disagreement-mass ratio, see :func:`disagreement_coefficient`.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if t < 1:
        raise ValueError("propensity cutoff parameter must be at least 1")
    star = best_hypothesis(world, hclass)[0] if center is None else center
    region = disagreement_region(hclass, ball(world, hclass, star, r))
    low = region[world.q0[region] <= 1.0 / t] if region.size else region
    return region_mass(world, low) / r


def disagreement_coefficient(
    world: FiniteWorld, hclass: HypothesisClass, r: float, center: int | None = None
) -> float:
    """Standard disagreement-mass ratio at radius ``r`` (no propensity cut)."""
    return modified_dis_coefficient(world, hclass, r, 1.0, center=center)


def default_radius_grid(nu: float, step: float = 0.01, r_max: float = 1.0) -> np.ndarray:
    """Grid {2 nu + k step : k >= 1} up to ``r_max``, for supremum reporting."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    start = 2.0 * nu
    ks = np.arange(1, int(np.floor((r_max - start) / step)) + 1)
    return start + step * ks


def sup_modified_dis_coefficient(
    world: FiniteWorld,
    hclass: HypothesisClass,
    r_grid: Iterable[float],
    m: int,
    n: int,
) -> float:
    """Supremum of the modified coefficient over a caller-supplied radius grid.

    Radii must exceed twice the optimal error; smaller grid values are
    skipped.  The propensity cutoff is t = 2 m / n, the ratio used by the
    run-record diagnostics.
    """
    star, nu = best_hypothesis(world, hclass)
    t = 2.0 * m / n
    values = [
        modified_dis_coefficient(world, hclass, float(r), t, center=star)
        for r in r_grid
        if r > 2.0 * nu
    ]
    if not values:
        raise ValueError("radius grid contains no value above twice the optimal error")
    return max(values)


def world_to_doc(world: FiniteWorld, hclass: HypothesisClass) -> dict:
    """Structured document for a world plus hypothesis class."""
    return {
        "mass": world.mass.tolist(),
        "label_prob": world.label_prob.tolist(),
        "q0": world.q0.tolist(),
        "hypotheses": world_hypotheses_list(hclass),
    }


def world_hypotheses_list(hclass: HypothesisClass) -> list[list[int]]:
    return [[int(v) for v in row] for row in hclass.predictions]


def world_from_doc(doc: dict) -> tuple[FiniteWorld, HypothesisClass]:
    world = FiniteWorld(
        mass=doc["mass"], label_prob=doc["label_prob"], q0=doc["q0"]
    )
    hclass = HypothesisClass(predictions=np.asarray(doc["hypotheses"], dtype=np.int8))
    if hclass.n_instances != world.size:
        raise ValueError("hypotheses and world disagree on the number of instances")
    return world, hclass


def dump_world_json(world: FiniteWorld, hclass: HypothesisClass) -> str:
    return json.dumps(world_to_doc(world, hclass), indent=2)


def load_world_json(text: str) -> tuple[FiniteWorld, HypothesisClass]:
    return world_from_doc(json.loads(text))
