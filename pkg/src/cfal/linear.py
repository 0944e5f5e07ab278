"""Linear-classifier approximation of the active loop for larger experiments.

Instead of enumerating a finite class, a single linear model is trained by
online gradient descent on a weighted squared hinge, the candidate set is
never materialized, and membership in the disagreement region is decided by
a margin test against the model's current confidence radius.  Clipping and
the under-coverage query gate carry over unchanged, with the weight tail
estimated empirically on the logged instances (no labels consulted).

The capacity parameter C stands in for the class-size log term of the exact
mode everywhere it appears: in the clip-bound rule, the margin test, and the
moment penalty.

Two deliberate translations from the enumerated-class algorithm, both load
bearing and worth knowing about:

* Updates use the closed-form no-overshoot step: the margin decays toward
  its target by ``1 - exp(-2 a h x.x)`` instead of moving by the raw
  weighted gradient.  For small steps the two coincide; for large step-size
  times importance weight the raw step diverges, while this one cannot
  cross the target.
* Labels inferred outside the disagreement region must not manufacture
  confidence (in the enumerated setting they provably cannot change loss
  differences among surviving candidates).  Inferred examples therefore
  train with target margin 0: they pull the model back only if it later
  crosses the anchor's label, and are otherwise inert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .estimators import choose_clip_threshold, empirical_weight_distribution
from .sim import LinearDataset, doubling_schedule

__all__ = [
    "LinearModel",
    "squared_hinge",
    "squared_hinge_grad",
    "ogd_step",
    "approx_in_disagreement",
    "regularized_objective",
    "regularized_objective_gradient",
    "TrialCurve",
    "run_linear_passive",
    "run_linear_vc_active",
]


@dataclass(frozen=True)
class LinearModel:
    """Linear classifier with a folded-in bias coordinate.

    ``weights`` has dim + 1 entries, bias last.  ``eta`` sets the step-size
    schedule sqrt(eta / (eta + t)); ``capacity`` is the tuned stand-in for
    the class-size log term.
    """

    weights: np.ndarray
    eta: float
    capacity: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        object.__setattr__(self, "weights", w)

    def step_size(self, t: int) -> float:
        return math.sqrt(self.eta / (self.eta + t))

    def predict(self, x_aug: np.ndarray) -> int:
        return 1 if float(self.weights @ x_aug) >= 0 else -1


def _aug1(x: np.ndarray) -> np.ndarray:
    """Append the bias coordinate to a single feature vector."""
    return np.concatenate([np.asarray(x, dtype=float), [1.0]])


def squared_hinge(w: np.ndarray, x_aug: np.ndarray, y: int, target: float = 1.0) -> float:
    """(target - y w.x)^2 short of the target margin, 0 past it."""
    margin = y * float(w @ x_aug)
    return (target - margin) ** 2 if margin < target else 0.0


def squared_hinge_grad(
    w: np.ndarray, x_aug: np.ndarray, y: int, target: float = 1.0
) -> np.ndarray:
    margin = y * float(w @ x_aug)
    if margin < target:
        return -2.0 * (target - margin) * y * x_aug
    return np.zeros_like(w)


def ogd_step(
    model: LinearModel,
    x: np.ndarray,
    y: int,
    weight: float,
    t: int,
    target: float = 1.0,
) -> LinearModel:
    """One weighted squared-hinge step with step size sqrt(eta/(eta+t)).

    ``weight`` carries whatever combination of importance weight, clip gate
    and moment-penalty coefficient the caller has assembled; zero weight
    leaves the model untouched.  The update is the closed-form no-overshoot
    step: the margin moves toward ``target`` by the fraction
    ``1 - exp(-2 a weight x.x)``, which equals the plain gradient step to
    first order and never crosses the target however large the weight.
    """
    if weight < 0:
        raise ValueError("step weight must be nonnegative")
    if weight == 0.0:
        return model
    x_aug = _aug1(x)
    margin = y * float(model.weights @ x_aug)
    if margin >= target:
        return model
    xx = float(x_aug @ x_aug)
    if xx <= 0.0:
        return model
    a = model.step_size(t)
    frac = 1.0 - math.exp(-2.0 * a * weight * xx)
    new_w = model.weights + y * x_aug * (target - margin) * frac / xx
    if not np.all(np.isfinite(new_w)):
        raise RuntimeError("update produced non-finite weights")
    return replace(model, weights=new_w)


def approx_in_disagreement(
    model: LinearModel,
    x: np.ndarray,
    step_size: float,
    capacity: float,
    second_moment_est: float,
    count: int,
    clip_bound: float,
) -> bool:
    """Margin test standing in for candidate-set disagreement.

    x is in the region when |2 w.x| / (a x.x) <= sqrt(C V / N) + C M / N:
    the effective importance weight needed to flip the prediction in one
    step is within the loss slack a surviving competitor could still carry.
    The zero vector is always in the region (its label is undetermined).
    """
    x_aug = _aug1(x)
    denom = step_size * float(x_aug @ x_aug)
    if denom <= 0.0:
        return True
    lhs = abs(2.0 * float(model.weights @ x_aug)) / denom
    rhs = (
        math.sqrt(capacity * max(second_moment_est, 0.0) / count)
        + capacity * clip_bound / count
    )
    return lhs <= rhs


def regularized_objective(
    weights: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    sample_weights: np.ndarray,
    clip_bound: float,
    lambda_term: float,
) -> float:
    """Batch objective: clipped weighted hinge mean + sqrt(lambda/N * moment)."""
    n = len(xs)
    if n == 0:
        raise ValueError("objective needs a nonempty batch")
    aug = np.hstack([xs, np.ones((n, 1))])
    margins = ys * (aug @ weights)
    losses = np.where(margins < 1.0, (1.0 - margins) ** 2, 0.0)
    keep = sample_weights <= clip_bound
    loss = float(np.mean(sample_weights * losses * keep))
    moment = float(np.mean(sample_weights**2 * losses * keep))
    return loss + math.sqrt(lambda_term / n * moment)


def regularized_objective_gradient(
    weights: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    sample_weights: np.ndarray,
    clip_bound: float,
    lambda_term: float,
) -> np.ndarray:
    """Analytic gradient of :func:`regularized_objective`.

    The moment penalty's chain rule reuses the per-sample loss gradients with
    squared weights; at zero moment the penalty's gradient is taken as zero.
    """
    n = len(xs)
    if n == 0:
        raise ValueError("gradient needs a nonempty batch")
    aug = np.hstack([xs, np.ones((n, 1))])
    margins = ys * (aug @ weights)
    active = margins < 1.0
    keep = sample_weights <= clip_bound
    coeff = np.where(active, -2.0 * (1.0 - margins), 0.0) * ys * keep
    grad_losses = aug * coeff[:, None]  # rows: d loss_i / d w
    grad_loss = (sample_weights[:, None] * grad_losses).mean(axis=0)
    losses = np.where(active, (1.0 - margins) ** 2, 0.0)
    moment = float(np.mean(sample_weights**2 * losses * keep))
    if moment <= 0.0:
        return grad_loss
    grad_moment = (sample_weights[:, None] ** 2 * grad_losses).mean(axis=0)
    reg_grad = math.sqrt(lambda_term / n) * grad_moment / (2.0 * math.sqrt(moment))
    return grad_loss + reg_grad


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


@dataclass
class TrialCurve:
    """Error checkpoints of one trial: (labels_used, test_error) pairs."""

    points: list[tuple[int, float]]

    @property
    def labels_used(self) -> int:
        return self.points[-1][0] if self.points else 0


class _MomentTracker:
    """Running mean of w^2 * loss over the examples already consumed.

    Contributions are frozen at the parameters current when each example was
    seen; this one-pass approximation is what prices the moment penalty and
    the margin test without recomputing history.
    """

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, value: float):
        self.total += value
        self.count += 1

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


def _surcharged(weight: float, capacity: float, tracker: _MomentTracker) -> float:
    """Moment-penalty surcharge folded into the step weight.

    The penalty's per-step gradient is proportional to w^2 times the loss
    gradient, so it rides along as w + 0.5 sqrt(C / (N V)) w^2.
    """
    if tracker.mean <= 0.0 or tracker.count == 0:
        return weight
    return weight + 0.5 * math.sqrt(capacity / (tracker.count * tracker.mean)) * weight**2


def run_linear_passive(
    data: LinearDataset,
    eta: float,
    record_every: int = 50,
    tau1: int = 64,
) -> TrialCurve:
    """Query-everything baseline optimizing the plain importance weighted loss.

    Logged rows keep their inverse-propensity weights, stream rows (all
    queried) weight 1; no pooling, clipping, or moment penalty.  At each
    epoch boundary the optimizer takes a refresh pass over everything
    collected so far, then keeps stepping on arrivals.
    """
    dim = data.logged_x.shape[1]
    model = LinearModel(weights=np.zeros(dim + 1), eta=eta, capacity=1.0)
    t = 0
    m, n = data.m, data.n
    store: list[tuple[np.ndarray, int, float]] = [
        (data.logged_x[i], int(data.logged_y[i]), 1.0 / float(data.logged_q0[i]))
        for i in range(m)
        if data.logged_z[i] == 1
    ]
    points: list[tuple[int, float]] | None = None
    n_seen = 0
    for tau in doubling_schedule(n, tau1) if n else ():
        for x, y, wt in store:
            model = ogd_step(model, x, y, wt, t)
            t += 1
        if points is None:
            points = [(0, data.test_error(model.weights))]  # logged labels are free
        for j in range(tau):
            i = n_seen + j
            y = data.reveal_stream_label(i)
            store.append((data.stream_x[i], y, 1.0))
            model = ogd_step(model, data.stream_x[i], y, 1.0, t)
            t += 1
            if (i + 1) % record_every == 0 or i + 1 == n:
                points.append((data.queries_used, data.test_error(model.weights)))
        n_seen += tau
    if points is None:  # empty stream: single refresh over the logged phase
        for x, y, wt in store:
            model = ogd_step(model, x, y, wt, t)
            t += 1
        points = [(0, data.test_error(model.weights))]
    return TrialCurve(points=points)


def run_linear_vc_active(
    data: LinearDataset,
    capacity: float,
    eta: float,
    record_every: int = 50,
    tau1: int = 64,
    clipping: bool = True,
    regularizer: bool = True,
    debias: bool = True,
    use_dis_test: bool = True,
) -> TrialCurve:
    """Variance-controlled active trainer over one dataset draw.

    Epochs follow a doubling plan over the stream.  Each epoch refreshes the
    clip bound from the empirical pooled-weight tail, re-fits the epoch
    minimizer with a pass over everything collected at the epoch's mixture
    weights, then walks its slice of the stream: the under-coverage gate
    drops instances whose logging propensity is already adequate, the margin
    test decides between querying and inferring the label, and every
    consumed example takes one weighted step (inferred ones with the inert
    anchoring target).

    The margin test reads its step size off the label clock, sqrt(eta /
    (eta + labels bought)): querying slows itself down as real labels
    accumulate, mirroring how the enumerated-class radius shrinks with data.
    """
    dim = data.logged_x.shape[1]
    model = LinearModel(weights=np.zeros(dim + 1), eta=eta, capacity=capacity)
    m, n = data.m, data.n
    tracker = _MomentTracker()
    t = 0

    def current_clip(n_k: int) -> float:
        if not clipping:
            return math.inf
        pooled = (m + n_k) / (m * data.logged_q0 + n_k)
        atoms, probs = empirical_weight_distribution(pooled)
        return choose_clip_threshold(atoms, probs, m + n_k, capacity, variant="active")

    # Stored rows: (features, label, q0, target margin).  Inferred labels
    # carry target 0 so replaying them can only anchor, never inflate.
    store: list[tuple[np.ndarray, int, float, float]] = [
        (data.logged_x[i], int(data.logged_y[i]), float(data.logged_q0[i]), 1.0)
        for i in range(m)
        if data.logged_z[i] == 1
    ]
    plan = list(doubling_schedule(n, tau1)) if n else []
    cums = [0]
    for tau in plan:
        cums.append(cums[-1] + tau)

    def covered(q0x: float, k: int) -> float:
        """Online coverage sum tau_i Q_i(x) through epoch k, via the gate's closed form."""
        total = 0.0
        for i in range(k):
            if (not debias) or m * q0x < 2.0 * cums[i + 1]:
                total += cums[i + 1] - cums[i]
        return total

    def consume(x: np.ndarray, y: int, weight: float, clip_bound: float, target: float):
        nonlocal model, t
        if weight <= clip_bound:
            eff = _surcharged(weight, capacity, tracker) if regularizer else weight
            tracker.add(weight**2 * squared_hinge(model.weights, _aug1(x), y, target))
            model = ogd_step(model, x, y, eff, t, target)
        t += 1

    points: list[tuple[int, float]] | None = None
    n_seen = 0
    for k, tau in enumerate(plan):
        n_next = cums[k + 1]
        clip_bound = current_clip(n_seen)
        for x, y, q0x, target in list(store):  # epoch refresh at current weights
            wt = 1.0 / q0x if k == 0 else (m + n_seen) / (m * q0x + covered(q0x, k))
            consume(x, y, wt, clip_bound, target)
        if points is None:
            points = [(0, data.test_error(model.weights))]  # logged labels are free
        anchor = model
        for j in range(tau):
            i = n_seen + j
            q0x = float(data.stream_q0[i])
            gate = (not debias) or (m * q0x < 2.0 * n_next)
            if gate:
                wt = (m + n_next) / (m * q0x + covered(q0x, k + 1))
                a_test = math.sqrt(eta / (eta + data.queries_used))
                if use_dis_test:
                    in_dis = approx_in_disagreement(
                        anchor,
                        data.stream_x[i],
                        a_test,
                        capacity,
                        tracker.mean,
                        m + n_next,
                        clip_bound,
                    )
                else:
                    in_dis = True
                if in_dis:
                    y = data.reveal_stream_label(i)
                    target = 1.0
                else:
                    y = anchor.predict(_aug1(data.stream_x[i]))
                    target = 0.0
                store.append((data.stream_x[i], y, q0x, target))
                consume(data.stream_x[i], y, wt, clip_bound, target)
            else:
                t += 1
            if (i + 1) % record_every == 0 or i + 1 == n:
                points.append((data.queries_used, data.test_error(model.weights)))
        n_seen = n_next
    if points is None:
        clip_bound = current_clip(0)
        for x, y, q0x, target in list(store):
            consume(x, y, 1.0 / q0x, clip_bound, target)
        points = [(0, data.test_error(model.weights))]
    return TrialCurve(points=points)
