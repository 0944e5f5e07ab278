"""Experiment orchestration: seeded runs, parameter sweeps, and curve CSVs.

A config names a world (fixture or inline), an algorithm, and its parameters;
``run_experiment`` replays N seeded trials and emits one CSV row per curve
checkpoint plus a JSON sidecar with every reproducibility-relevant constant.
``sweep`` evaluates a parameter grid by the area under the error-vs-labels
curve and reports the winner.

Trial seeds are derived by hashing (root seed, algorithm, params, trial), so
growing the grid or reordering it never changes any already-computed trial.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .active import Ablations, AlgoConfig, EpochState, interim_output, run_epoch
from .estimators import PolicyStack, SampleSet, WeightScheme, _error_term_sum
from .linear import run_linear_passive, run_linear_vc_active
from .passive import variance_trap_world
from .sim import (
    Environment,
    LinearWorld,
    clipping_ladder_world,
    debias_savings_class,
    debias_savings_world,
    noisy_benchmark_world,
    sample_linear_dataset,
    variance_probe_world,
)
from .worlds import CandidateSet, FiniteWorld, HypothesisClass, population_error, world_from_doc

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CurvePoint",
    "trial_seed",
    "run_experiment",
    "auc",
    "sweep",
    "fixture",
    "FIXTURES",
]

CSV_HEADER = ["algorithm", "params", "trial", "labels_used", "test_error"]


class ConfigError(ValueError):
    """Invalid experiment configuration; maps to exit code 2 in the CLI."""


def fixture(name: str) -> tuple[FiniteWorld, HypothesisClass, dict]:
    """Named fixture worlds with their companion hypothesis classes."""
    if name == "clipping-ladder":
        world, hclass = clipping_ladder_world(nu=0.05, alpha=0.005)
        meta = {"nu": 0.05, "alpha": 0.005}
    elif name == "debias-savings":
        world = debias_savings_world(mu=0.1, alpha=0.0025, lam=2.0)
        hclass = debias_savings_class()
        meta = {"mu": 0.1, "alpha": 0.0025, "lam": 2.0}
    elif name == "variance-trap":
        world, hclass = variance_trap_world(nu=0.3, m=1000)
        meta = {"nu": 0.3, "m": 1000}
    elif name == "noisy-benchmark":
        world, hclass = noisy_benchmark_world()
        meta = {"nu": 0.05, "instances": world.size, "hypotheses": hclass.size}
    elif name == "variance-probe":
        world, hclass = variance_probe_world()
        meta = {}
    else:
        raise ConfigError(f"unknown fixture {name!r}")
    return world, hclass, meta


FIXTURES = ("clipping-ladder", "debias-savings", "variance-trap", "noisy-benchmark", "variance-probe")


@dataclass(frozen=True)
class CurvePoint:
    labels_used: int
    test_error: float
    trial: int
    algorithm: str
    params: str


@dataclass
class ExperimentConfig:
    """Parsed experiment description; see README for the JSON schema."""

    mode: str
    algorithm: str
    seed: int = 0
    trials: int = 1
    out: str | None = None
    # exact mode
    world: str | dict | None = None
    m: int = 0
    schedule: tuple[int, ...] = ()
    delta: float = 0.1
    slack_factor: float = 4.0
    slack_factor_grid: tuple[float, ...] = ()
    ablate: tuple[str, ...] = ()
    # linear mode
    policy: str = "certainty"
    capacity: float | None = None
    eta: float | None = None
    capacity_grid: tuple[float, ...] = ()
    eta_grid: tuple[float, ...] = ()
    record_every: int = 50
    tau1: int = 64
    linear_world: LinearWorld = field(default_factory=LinearWorld)

    @classmethod
    def from_doc(cls, doc: dict) -> "ExperimentConfig":
        try:
            mode = doc["mode"]
            algorithm = doc["algorithm"]
        except KeyError as exc:
            raise ConfigError(f"config missing required key {exc}") from exc
        if mode not in ("exact", "linear"):
            raise ConfigError(f"unknown mode {mode!r}")
        if algorithm not in ("passive", "active_iw", "vc_active"):
            raise ConfigError(f"unknown algorithm {algorithm!r}")
        cfg = cls(mode=mode, algorithm=algorithm)
        cfg.seed = int(doc.get("seed", 0))
        cfg.trials = int(doc.get("trials", 1))
        if cfg.trials < 1:
            raise ConfigError("need at least one trial")
        cfg.out = doc.get("out")
        cfg.ablate = tuple(doc.get("ablate", ()))
        if mode == "exact":
            if "world" not in doc:
                raise ConfigError("exact mode needs a world (fixture name or document)")
            cfg.world = doc["world"]
            cfg.m = int(doc.get("m", 0))
            if cfg.m <= 0:
                raise ConfigError("exact mode needs a positive logged budget m")
            sched = doc.get("schedule")
            if isinstance(sched, dict):
                cfg.schedule = sim.doubling_schedule(
                    int(sched["total"]), int(sched.get("tau1", 1))
                )
            elif isinstance(sched, list):
                cfg.schedule = tuple(int(t) for t in sched)
            else:
                raise ConfigError("exact mode needs a schedule (list or {total, tau1})")
            cfg.delta = float(doc.get("delta", 0.1))
            cfg.slack_factor = float(doc.get("slack_factor", 4.0))
            cfg.slack_factor_grid = tuple(doc.get("slack_factor_grid", ()))
        else:
            cfg.policy = doc.get("policy", "certainty")
            if cfg.policy not in ("certainty", "uncertainty"):
                raise ConfigError(f"unknown logging policy {cfg.policy!r}")
            cfg.capacity = doc.get("capacity")
            cfg.eta = doc.get("eta")
            cfg.capacity_grid = tuple(doc.get("capacity_grid", ()))
            cfg.eta_grid = tuple(doc.get("eta_grid", ()))
            cfg.record_every = int(doc.get("record_every", 50))
            cfg.tau1 = int(doc.get("tau1", 64))
            lw = doc.get("linear_world", {})
            cfg.linear_world = LinearWorld(**lw) if lw else LinearWorld()
        return cfg

    def resolve_world(self) -> tuple[FiniteWorld, HypothesisClass, dict]:
        if isinstance(self.world, str):
            return fixture(self.world)
        if isinstance(self.world, dict):
            world, hclass = world_from_doc(self.world)
            return world, hclass, {}
        raise ConfigError("config has no world to resolve")


def trial_seed(root_seed: int, algorithm: str, params: str, trial: int) -> int:
    """Stable per-trial seed; adding grid points never perturbs existing trials."""
    key = f"{root_seed}|{algorithm}|{params}|{trial}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


# ---------------------------------------------------------------------------
# Exact-mode trial runners
# ---------------------------------------------------------------------------


def _exact_active_trial(
    world: FiniteWorld,
    hclass: HypothesisClass,
    config: AlgoConfig,
    env: Environment,
) -> list[tuple[int, float]]:
    """Epoch-boundary curve of the anytime output's exact error."""
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
    points = [
        (0, population_error(world, hclass.vector(interim_output(state, config))))
    ]
    for _ in range(len(config.schedule)):
        state = run_epoch(state, config, env)
        idx = interim_output(state, config)
        points.append((env.queries_used, population_error(world, hclass.vector(idx))))
    return points


def _exact_passive_trial(
    world: FiniteWorld,
    hclass: HypothesisClass,
    schedule: tuple[int, ...],
    env: Environment,
) -> list[tuple[int, float]]:
    """Query-everything baseline: plain importance weighted loss minimizer.

    Logged rows keep their inverse-propensity weights, queried stream rows
    weight 1 (each epoch under its own policy; no pooling).
    """
    logged = env.generate_logged()
    data = logged

    def erm_error() -> float:
        scheme = WeightScheme.per_policy(data, world)
        losses = [
            _error_term_sum(data, scheme, math.inf, hclass.vector(i), 1) / len(data)
            for i in range(hclass.size)
        ]
        return population_error(world, hclass.vector(int(np.argmin(losses))))

    points = [(0, erm_error())]
    for k, tau in enumerate(schedule):
        batch = env.stream_online(tau)
        ys = np.array([batch.reveal(t) for t in range(tau)], dtype=np.int8)
        data = data.concat(
            SampleSet(
                batch.instances,
                np.ones(tau, dtype=np.int8),
                ys,
                np.full(tau, k + 1, dtype=np.int32),
            )
        )
        points.append((env.queries_used, erm_error()))
    return points


def _algo_config(cfg: ExperimentConfig, slack_factor: float) -> AlgoConfig:
    off = list(cfg.ablate)
    if cfg.algorithm == "active_iw":
        # Baseline without variance control: no clipping, no moment penalty,
        # same query gate.  The shrink threshold is then vacuous.
        off = sorted(set(off) | {"clipping", "regularizer"})
    ablations = Ablations.from_off_list(off)
    return AlgoConfig(
        delta=cfg.delta,
        schedule=cfg.schedule,
        gamma1=slack_factor,
        ablations=ablations,
    )


def _params_string(cfg: ExperimentConfig, **kv) -> str:
    return ";".join(f"{k}={v!r}" for k, v in sorted(kv.items()))


def _run_trials(cfg: ExperimentConfig, params_kv: dict) -> list[CurvePoint]:
    """All trials for one parameter point, in deterministic seed order."""
    params = _params_string(cfg, **params_kv)
    points: list[CurvePoint] = []
    for trial in range(cfg.trials):
        seed = trial_seed(cfg.seed, cfg.algorithm, params, trial)
        if cfg.mode == "exact":
            world, hclass, _ = cfg.resolve_world()
            n = sum(cfg.schedule)
            env = Environment(world, cfg.m, n, seed)
            if cfg.algorithm == "passive":
                curve = _exact_passive_trial(world, hclass, cfg.schedule, env)
            else:
                algo = _algo_config(cfg, params_kv.get("slack_factor", cfg.slack_factor))
                curve = _exact_active_trial(world, hclass, algo, env)
        else:
            data = sample_linear_dataset(cfg.linear_world, cfg.policy, seed)
            if cfg.algorithm == "passive":
                curve = run_linear_passive(
                    data, eta=params_kv["eta"], record_every=cfg.record_every
                ).points
            else:
                curve = run_linear_vc_active(
                    data,
                    capacity=params_kv["capacity"],
                    eta=params_kv["eta"],
                    record_every=cfg.record_every,
                    tau1=cfg.tau1,
                    clipping="clipping" not in cfg.ablate and cfg.algorithm != "active_iw",
                    regularizer="regularizer" not in cfg.ablate and cfg.algorithm != "active_iw",
                    debias="debias" not in cfg.ablate,
                    use_dis_test="dbal" not in cfg.ablate,
                ).points
        points.extend(
            CurvePoint(labels, err, trial, cfg.algorithm, params) for labels, err in curve
        )
    return points


# ---------------------------------------------------------------------------
# AUC and sweeps
# ---------------------------------------------------------------------------


def auc(trial_curves: Sequence[Sequence[tuple[int, float]]], max_labels: int | None = None) -> float:
    """Mean area under the per-trial error-vs-labels step curve.

    Each trial contributes sum over unit label increments of the trapezoid
    (e(l) + e(l+1)) / 2, with the error held constant between checkpoints
    (later checkpoints at the same label count supersede earlier ones).
    ``max_labels`` extends every curve to a common budget by carrying the
    final error forward; without it each trial stops at its own last label.
    """
    if not trial_curves:
        raise ValueError("need at least one trial curve")
    totals = []
    for curve in trial_curves:
        if not curve:
            raise ValueError("empty trial curve")
        pts = sorted(curve, key=lambda t: t[0])  # stable: chronology kept at ties
        if pts[0][0] != 0:
            raise ValueError("trial curves must start at zero labels")
        end = pts[-1][0] if max_labels is None else int(max_labels)
        e = np.empty(end + 1, dtype=float)
        e[:] = np.nan
        for label, err in pts:
            if label <= end:
                e[label:] = err  # carried forward until the next checkpoint
        totals.append(float(np.sum((e[:-1] + e[1:]) / 2.0)) if end > 0 else 0.0)
    return float(np.mean(totals))


def sweep(cfg: ExperimentConfig) -> dict:
    """Evaluate the parameter grid, pick the AUC minimizer, keep all curves.

    AUC follows the printed definition: each trial's area runs over its own
    label span, so the metric rewards reaching low error with few labels.
    A common-budget view (every curve extended to the largest label count in
    the sweep by carrying its final error forward) is reported alongside for
    context but plays no part in the selection.
    """
    grid = _parameter_grid(cfg)
    all_points: dict[str, list[CurvePoint]] = {}
    for params_kv in grid:
        pts = _run_trials(cfg, params_kv)
        all_points[_params_string(cfg, **params_kv)] = pts
    budget = max(
        (p.labels_used for pts in all_points.values() for p in pts), default=0
    )
    table = []
    padded_table = []
    for params, pts in all_points.items():
        curves = _group_trials(pts)
        table.append((params, auc(curves)))
        padded_table.append((params, auc(curves, max_labels=budget)))
    best_params, best_auc = table[0]
    for params, value in table[1:]:  # strict <: ties keep the earliest grid point
        if value < best_auc:
            best_params, best_auc = params, value
    return {
        "best_params": best_params,
        "best_auc": best_auc,
        "table": table,
        "padded_table": padded_table,
        "points": all_points,
        "budget": budget,
    }


def _parameter_grid(cfg: ExperimentConfig) -> list[dict]:
    if cfg.mode == "exact":
        factors = cfg.slack_factor_grid or (cfg.slack_factor,)
        return [{"slack_factor": g} for g in factors]
    if cfg.algorithm == "passive":
        etas = cfg.eta_grid or ((cfg.eta,) if cfg.eta is not None else ())
        if not etas:
            raise ConfigError("passive linear mode needs eta or eta_grid")
        return [{"eta": e} for e in etas]
    caps = cfg.capacity_grid or ((cfg.capacity,) if cfg.capacity is not None else ())
    etas = cfg.eta_grid or ((cfg.eta,) if cfg.eta is not None else ())
    if not caps or not etas:
        raise ConfigError("linear active mode needs capacity and eta (or grids)")
    return [{"capacity": c, "eta": e} for c in caps for e in etas]


def _group_trials(points: Iterable[CurvePoint]) -> list[list[tuple[int, float]]]:
    by_trial: dict[int, list[tuple[int, float]]] = {}
    for p in points:
        by_trial.setdefault(p.trial, []).append((p.labels_used, p.test_error))
    return [sorted(v) for _, v in sorted(by_trial.items())]


# ---------------------------------------------------------------------------
# Entry points used by the CLI
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> tuple[str, dict]:
    """Run all trials at the config's single parameter point; return CSV + metadata."""
    params_kv = _single_params(cfg)
    points = _run_trials(cfg, params_kv)
    return points_to_csv(points), _metadata(cfg, {"params": _params_string(cfg, **params_kv)})


def run_sweep(cfg: ExperimentConfig) -> tuple[str, dict]:
    result = sweep(cfg)
    rows = [p for pts in result["points"].values() for p in pts]
    meta = _metadata(
        cfg,
        {
            "best_params": result["best_params"],
            "best_auc": result["best_auc"],
            "auc_table": result["table"],
            "auc_table_common_budget": result["padded_table"],
            "auc_budget": result["budget"],
        },
    )
    return points_to_csv(rows), meta


def _single_params(cfg: ExperimentConfig) -> dict:
    if cfg.mode == "exact":
        return {"slack_factor": cfg.slack_factor}
    if cfg.algorithm == "passive":
        if cfg.eta is None:
            raise ConfigError("passive linear run needs eta")
        return {"eta": cfg.eta}
    if cfg.capacity is None or cfg.eta is None:
        raise ConfigError("linear active run needs capacity and eta")
    return {"capacity": cfg.capacity, "eta": cfg.eta}


def points_to_csv(points: Sequence[CurvePoint]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in sorted(points, key=lambda p: (p.algorithm, p.params, p.trial, p.labels_used)):
        writer.writerow([p.algorithm, p.params, p.trial, p.labels_used, repr(p.test_error)])
    return out.getvalue()


def _metadata(cfg: ExperimentConfig, extra: dict) -> dict:
    meta = {
        "seed": cfg.seed,
        "rng": sim.RNG_KIND,
        "numpy_version": np.__version__,
        "mode": cfg.mode,
        "algorithm": cfg.algorithm,
        "trials": cfg.trials,
        "ablate": list(cfg.ablate),
        "constants": {
            "slack_factor_default": 4.0,
            "propensity_floor": sim.DEFAULT_Q_MIN,
            "linear_record_every": cfg.record_every,
            "surrogate_loss": "squared hinge, flat past margin 1",
            "radius_grid_note": "modified disagreement supremum uses a finite caller grid",
        },
    }
    if cfg.mode == "exact":
        meta["m"] = cfg.m
        meta["schedule"] = list(cfg.schedule)
        meta["delta"] = cfg.delta
        if isinstance(cfg.world, str):
            meta["world_fixture"] = cfg.world
    else:
        meta["policy"] = cfg.policy
        meta["tau1"] = cfg.tau1
    meta.update(extra)
    return meta


def write_outputs(csv_text: str, meta: dict, out_path: str):
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path + ".csv", "w") as f:
        f.write(csv_text)
    with open(out_path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
