"""Synthetic experiments with endogenous ad exposure and a known treatment effect.

Generative model (per user, all users drawn i.i.d.):

* dense features ``x ~ N(0, I)``; the first half of the dense block drives
  exposure, of which a leading fraction also drives conversion;
* sparse interest sets: a Poisson number of uniform vocabulary indices, each
  carrying fixed random selection/outcome weights;
* action rate: the platform's noisy estimate of the conversion propensity;
* exposure for test users: ``P(W=1 | X) = sigmoid((a + s * index(X)) / noise)``
  bounded to [0.01, 0.99];
* conversion: ``P(Y(0)=1 | X) = sigmoid(alpha + o(X))`` and
  ``P(Y(1)=1 | X) = sigmoid(alpha + o(X) + delta)`` with ``delta`` solved so
  that the exposure-weighted lift equals the configured lift exactly.

The exposure logit is linear in the observed feature matrix
(:meth:`ExperimentDataset.feature_matrix`), so a logistic propensity model is
correctly specified whenever no feature is hidden.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit

from .data import ExperimentDataset, ExperimentMeta, FeatureSchema, OutcomeEvent

E_MIN, E_MAX = 0.01, 0.99
ACTION_RATE_NOISE = 1.0
ACTION_RATE_WEIGHT = 0.5
RETARGET_WEIGHT = 1.5
SPARSE_WEIGHT_SD = 0.3

# Default conversion rates mimic the funnel ordering (upper events are commoner).
FUNNEL_BASELINES = {"upper": 0.05, "mid": 0.02, "lower": 0.005}


@dataclass(frozen=True)
class EventSpec:
    name: str
    funnel: str
    baseline_rate: float
    true_lift: float


def funnel_events(lifts=(0.3, 0.2, 0.1)) -> tuple[EventSpec, ...]:
    """One event per funnel position using the default baseline ladder."""
    return tuple(
        EventSpec(f"{f}_event", f, FUNNEL_BASELINES[f], lift) for f, lift in zip(("upper", "mid", "lower"), lifts)
    )


@dataclass(frozen=True)
class SimConfig:
    n_users: int = 10_000
    planned_split: float = 0.9
    dense_dim: int = 10
    sparse_vocab: int = 20
    sparse_mean_active: float = 3.0
    selection_strength: float = 1.0
    confounding_overlap: float = 1.0
    hidden_fraction: float = 0.0
    true_lift: float = 0.2
    baseline_rate: float = 0.02
    exposure_noise: float = 1.0
    seed: int = 0
    exposure_target: float = 0.6
    outcome_strength: float = 1.0
    event_name: str = "purchase"
    funnel: str = "lower"
    extra_events: tuple[EventSpec, ...] = ()
    experiment_id: str = "sim"
    length_days: int = 30
    vertical: str = "other"
    prospecting_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(
            self, "extra_events", tuple(e if isinstance(e, EventSpec) else EventSpec(**e) for e in self.extra_events)
        )
        problems = []
        if self.n_users < 2:
            problems.append("n_users must be at least 2")
        if not 0.0 < self.planned_split < 1.0:
            problems.append("planned_split must lie strictly inside (0, 1)")
        if self.dense_dim < 1:
            problems.append("dense_dim must be at least 1")
        if self.sparse_vocab < 0 or self.sparse_mean_active < 0:
            problems.append("sparse_vocab and sparse_mean_active must be non-negative")
        if self.selection_strength < 0:
            problems.append("selection_strength must be non-negative")
        for name in ("confounding_overlap", "hidden_fraction", "prospecting_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.exposure_noise <= 0:
            problems.append("exposure_noise must be positive")
        if not E_MIN < self.exposure_target < E_MAX:
            problems.append(f"exposure_target must lie in ({E_MIN}, {E_MAX})")
        for ev in self.events:
            if not 0.0 < ev.baseline_rate < 1.0:
                problems.append(f"baseline_rate of {ev.name} must lie in (0, 1)")
            if ev.true_lift <= -1.0:
                problems.append(f"true_lift of {ev.name} must exceed -1")
            elif ev.baseline_rate * (1.0 + ev.true_lift) > 1.0:
                problems.append(f"baseline_rate * (1 + true_lift) exceeds 1 for {ev.name}")
        if len({ev.name for ev in self.events}) != len(self.events):
            problems.append("event names must be unique")
        if problems:
            raise ValueError("invalid SimConfig: " + "; ".join(problems))

    @property
    def events(self) -> tuple[EventSpec, ...]:
        return (EventSpec(self.event_name, self.funnel, self.baseline_rate, self.true_lift), *self.extra_events)

    @property
    def n_selection(self) -> int:
        return max(1, self.dense_dim // 2)

    @property
    def n_confounding(self) -> int:
        return int(round(self.confounding_overlap * self.n_selection))

    @property
    def n_hidden(self) -> int:
        return int(round(self.hidden_fraction * self.n_selection))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extra_events"] = [asdict(e) for e in self.extra_events]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EventTruth:
    true_att: float
    true_lift: float
    treated_baseline: float


@dataclass(frozen=True)
class Latent:
    """Per-user generating probabilities; kept in memory only."""

    exposure_prob: np.ndarray
    p0: dict
    p1: dict


@dataclass(frozen=True)
class GroundTruth:
    true_att: float
    true_lift: float
    exposure_rate: float
    hidden_feature_indices: frozenset[int]
    events: dict = field(default_factory=dict)
    latent: Latent | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "true_att": self.true_att,
            "true_lift": self.true_lift,
            "exposure_rate": self.exposure_rate,
            "hidden_feature_indices": sorted(self.hidden_feature_indices),
            "events": {k: asdict(v) for k, v in self.events.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            true_att=float(d["true_att"]),
            true_lift=float(d["true_lift"]),
            exposure_rate=float(d["exposure_rate"]),
            hidden_feature_indices=frozenset(int(i) for i in d["hidden_feature_indices"]),
            events={k: EventTruth(**v) for k, v in d.get("events", {}).items()},
        )


def action_rate_logit(action_rate: np.ndarray) -> np.ndarray:
    return logit(np.clip(action_rate, 1e-9, 1 - 1e-9))


def _sparse_sets(rng: np.random.Generator, n: int, vocab: int, mean_active: float):
    if vocab == 0 or mean_active == 0:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    counts = rng.poisson(mean_active, size=n)
    rows = np.repeat(np.arange(n, dtype=np.int64), counts)
    idx = rng.integers(0, vocab, size=rows.size)
    keys = np.unique(rows * vocab + idx)
    rows, idx = keys // vocab, keys % vocab
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))])
    return indptr, idx


def _solve_intercept(score: np.ndarray, target_mean: float, weights=None) -> float:
    def gap(a):
        return np.average(expit(a + score), weights=weights) - target_mean

    return brentq(gap, -60.0, 60.0, xtol=1e-13)


def simulate_experiment(cfg: SimConfig) -> tuple[ExperimentDataset, GroundTruth]:
    """Draw one synthetic experiment; deterministic given ``cfg.seed``."""
    ss = np.random.SeedSequence(cfg.seed)
    world_rng, user_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    n, d = cfg.n_users, cfg.dense_dim
    n_sel, n_conf = cfg.n_selection, cfg.n_confounding

    sparse_sel_w = world_rng.normal(0.0, SPARSE_WEIGHT_SD, size=cfg.sparse_vocab)
    sparse_out_w = world_rng.normal(0.0, SPARSE_WEIGHT_SD, size=cfg.sparse_vocab)
    outcome_dims = list(range(n_conf)) + list(range(n_sel, d))

    x = user_rng.standard_normal((n, d))
    indptr, indices = _sparse_sets(user_rng, n, cfg.sparse_vocab, cfg.sparse_mean_active)
    sparse_rows = np.repeat(np.arange(n), np.diff(indptr))
    sparse_sel = np.bincount(sparse_rows, weights=sparse_sel_w[indices], minlength=n).astype(float)
    sparse_out = np.bincount(sparse_rows, weights=sparse_out_w[indices], minlength=n).astype(float)

    outcome_score = sparse_out.copy()
    if outcome_dims:
        outcome_score += cfg.outcome_strength * x[:, outcome_dims].sum(axis=1) / np.sqrt(len(outcome_dims))

    events = cfg.events
    primary = events[0]
    alpha = {ev.name: _solve_intercept(outcome_score, ev.baseline_rate) for ev in events}

    ar_logit = alpha[primary.name] + outcome_score + ACTION_RATE_NOISE * user_rng.standard_normal(n)
    action_rate = expit(ar_logit)
    ar_logit = action_rate_logit(action_rate)
    prior_outcome = (user_rng.random(n) < expit(alpha[primary.name] + outcome_score)).astype(np.int8)

    index = (
        x[:, :n_sel].sum(axis=1) / np.sqrt(n_sel)
        + sparse_sel
        + ACTION_RATE_WEIGHT * (ar_logit - alpha[primary.name])
        + RETARGET_WEIGHT * (1.0 - cfg.prospecting_ratio) * prior_outcome
    )
    score = cfg.selection_strength * index / cfg.exposure_noise
    lo, hi = logit(E_MIN), logit(E_MAX)

    def exposure_prob(a):
        return expit(np.clip(a + score, lo, hi))

    a = brentq(lambda a: exposure_prob(a).mean() - cfg.exposure_target, -60.0, 60.0, xtol=1e-13)
    e = exposure_prob(a)

    z = (user_rng.random(n) < cfg.planned_split).astype(np.int8)
    if not z.any():
        raise ValueError(f"seed {cfg.seed} assigned no user to the test group; increase n_users")
    w = np.where(z == 1, user_rng.random(n) < e, False).astype(np.int8)

    p0, p1, y, truths = {}, {}, {}, {}
    for ev in events:
        base = alpha[ev.name] + outcome_score
        p0_k = expit(base)
        target = (1.0 + ev.true_lift) * np.sum(e * p0_k)

        def gap(delta, base=base, target=target):
            return np.sum(e * expit(base + delta)) - target

        if ev.true_lift == 0.0:
            delta = 0.0
        else:
            try:
                delta = brentq(gap, -60.0, 60.0, xtol=1e-13)
            except ValueError:
                raise ValueError(
                    f"infeasible config: lift {ev.true_lift} for event {ev.name} needs a conversion "
                    "probability above 1 among exposed users"
                ) from None
        p1_k = expit(base + delta)
        u = user_rng.random(n)
        y[ev.name] = (u < np.where(w == 1, p1_k, p0_k)).astype(np.int8)
        treated_base = float(np.sum(e * p0_k) / np.sum(e))
        att = float(np.sum(e * (p1_k - p0_k)) / np.sum(e))
        truths[ev.name] = EventTruth(true_att=att, true_lift=att / treated_base, treated_baseline=treated_base)
        p0[ev.name], p1[ev.name] = p0_k, p1_k

    schema = FeatureSchema(tuple(f"x{j}" for j in range(d)), cfg.sparse_vocab)
    meta = ExperimentMeta(
        experiment_id=cfg.experiment_id,
        outcome_events=tuple(OutcomeEvent(ev.name, ev.funnel) for ev in events),
        planned_split=cfg.planned_split,
        length_days=cfg.length_days,
        vertical=cfg.vertical,
        prospecting_ratio=cfg.prospecting_ratio,
    )
    width = len(str(n - 1))
    ds = ExperimentDataset(
        meta=meta,
        schema=schema,
        user_ids=[f"u{i:0{width}d}" for i in range(n)],
        z=z,
        w=w,
        y=y,
        dense=x,
        sparse_indptr=indptr,
        sparse_indices=indices,
        action_rate=action_rate,
        prior_outcome=prior_outcome,
    )
    head = truths[primary.name]
    gt = GroundTruth(
        true_att=head.true_att,
        true_lift=head.true_lift,
        exposure_rate=float(e.mean()),
        hidden_feature_indices=frozenset(range(cfg.n_hidden)),
        events=truths,
        latent=Latent(exposure_prob=e, p0=p0, p1=p1),
    )
    return ds, gt


def observed_view(ds: ExperimentDataset, gt: GroundTruth) -> ExperimentDataset:
    """Copy of ``ds`` with the hidden dense columns removed."""
    hidden = sorted(gt.hidden_feature_indices)
    bad = [i for i in hidden if not 0 <= i < ds.schema.dense_dim]
    if bad:
        raise IndexError(f"hidden feature indices out of range for dense_dim={ds.schema.dense_dim}: {bad}")
    keep = [j for j in range(ds.schema.dense_dim) if j not in set(hidden)]
    schema = replace(ds.schema, dense_names=tuple(ds.schema.dense_names[j] for j in keep))
    return ExperimentDataset(
        meta=ds.meta,
        schema=schema,
        user_ids=ds.user_ids,
        z=ds.z,
        w=ds.w,
        y=ds.y,
        dense=ds.dense[:, keep],
        sparse_indptr=ds.sparse_indptr,
        sparse_indices=ds.sparse_indices,
        action_rate=ds.action_rate,
        prior_outcome=ds.prior_outcome,
    )


def write_simulation(ds: ExperimentDataset, gt: GroundTruth, cfg: SimConfig, out_dir: str | Path) -> Path:
    """Write ``<id>.jsonl``, its metadata sidecar and ``<id>.truth.json``."""
    from .ingest import write_dataset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_dataset(ds, out_dir / f"{ds.meta.experiment_id}.jsonl")
    body = {"ground_truth": gt.to_dict(), "config": cfg.to_dict()}
    (out_dir / f"{ds.meta.experiment_id}.truth.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path
