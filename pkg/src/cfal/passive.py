"""Passive learners over logged data: plain, regularized, and clipped ERM.

The regularized learner adds a square-root second-moment penalty to the
importance weighted loss.  Unlike a variance penalty, the second moment
averages exactly across segments of the data, which is what allows the same
objective to be reused inside the interactive loop.
"""

from __future__ import annotations

import math

import numpy as np

from .estimators import NO_CLIP, ClipConfig, SampleSet, clipped_iw_loss, iw_loss, second_moment
from .worlds import FiniteWorld, HypothesisClass

__all__ = [
    "erm",
    "regularized_erm",
    "variance_trap_world",
    "binomial_tail_lower_bound",
]


def erm(
    hclass: HypothesisClass,
    samples: SampleSet,
    world: FiniteWorld,
    clip: ClipConfig = NO_CLIP,
) -> int:
    """Exhaustive minimizer of the (optionally clipped) importance weighted loss.

    Ties break toward the lowest index.  The class is assumed small enough to
    enumerate; there is deliberately no optimization shortcut here.
    """
    if hclass.size == 0:
        raise ValueError("cannot run ERM over an empty class")
    losses = [
        clipped_iw_loss(hclass.vector(i), samples, world, clip.bound)
        if clip.active
        else iw_loss(hclass.vector(i), samples, world)
        for i in range(hclass.size)
    ]
    return int(np.argmin(losses))


def regularized_erm(
    hclass: HypothesisClass,
    samples: SampleSet,
    world: FiniteWorld,
    log_term: float,
    clip: ClipConfig = NO_CLIP,
    lam: float | None = None,
) -> int:
    """Minimizer of loss + sqrt((lam / m) * second_moment), ties to lowest index.

    ``log_term`` is log(|H|/delta); ``lam`` defaults to 4 * log_term and may
    be any value at least that large without changing the guarantees the
    objective is built around.
    """
    if hclass.size == 0:
        raise ValueError("cannot run ERM over an empty class")
    if log_term <= 0:
        raise ValueError("log term must be positive")
    lam = 4.0 * log_term if lam is None else float(lam)
    m = len(samples)
    objectives = []
    for i in range(hclass.size):
        h = hclass.vector(i)
        if clip.active:
            loss = clipped_iw_loss(h, samples, world, clip.bound)
        else:
            loss = iw_loss(h, samples, world)
        moment = second_moment(h, samples, world, clip)
        objectives.append(loss + math.sqrt(lam / m * moment))
    return int(np.argmin(objectives))


def variance_trap_world(nu: float, m: int) -> tuple[FiniteWorld, HypothesisClass]:
    """Three-instance world where unregularized IW ERM fails with constant probability.

    A rarely-logged instance carries the runner-up's whole error mass, so with
    probability bounded away from zero the runner-up's entire empirical loss
    vanishes and plain loss minimization picks it over the true optimum.  The
    regularized objective charges the runner-up for its enormous weights
    whenever any of its errors are observed.

    ``nu`` is the optimal error; the rare instance's propensity is nu / 40 and
    the runner-up's extra mass eps solves m = (nu + eps) / (9 q0 eps^2), which
    calibrates the failure probability.  Requires 0 < nu < 1/3 and
    m >= 49 / nu^2.
    """
    if not 0.0 < nu < 1.0 / 3.0:
        raise ValueError("optimal error must lie strictly between 0 and 1/3")
    if m < 49.0 / nu**2:
        raise ValueError("sample budget too small for this construction")
    q0 = nu / 40.0
    c = 1.0 / 3.0
    eps = (c**2 + math.sqrt(c**4 + 4.0 * c**2 * q0 * nu * m)) / (2.0 * q0 * m)
    world = FiniteWorld(
        mass=[nu, nu + eps, 1.0 - 2.0 * nu - eps],
        label_prob=[1.0, 1.0, 1.0],
        q0=[1.0, q0, 1.0],
    )
    hclass = HypothesisClass(predictions=np.array([[-1, 1, 1], [1, -1, 1]], dtype=np.int8))
    return world, hclass


def binomial_tail_lower_bound(n: int, p: float, t: float) -> float:
    """Analytic lower bound on Pr(Bin(n, p) < n t) for 0 < t < p < 1/2.

    With d = sqrt(4 n (t - p)^2 / p), the bound is
    d / (sqrt(2 pi) (d^2 + 1)) * exp(-d^2 / 2).  It combines a Gaussian tail
    lower bound with a KL-to-chi-squared comparison, and is the device behind
    the constant-probability failure event of :func:`variance_trap_world`.
    """
    if not 0.0 < t < p < 0.5:
        raise ValueError("bound requires 0 < t < p < 1/2")
    d = math.sqrt(4.0 * n * (t - p) ** 2 / p)
    return d / (math.sqrt(2.0 * math.pi) * (d**2 + 1.0)) * math.exp(-0.5 * d**2)
