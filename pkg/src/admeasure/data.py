"""Shared data model: per-user experiment records, datasets, and effect estimates.

Datasets are stored column-wise (numpy arrays) because every estimator in the
package works on whole columns; :class:`UserRecord` is the row view used for
I/O and for building small fixtures by hand.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

FUNNELS = ("upper", "mid", "lower")
METHODS = ("rct_itt", "rct_att", "exposed_unexposed", "spsm", "dml")


@dataclass(frozen=True)
class OutcomeEvent:
    name: str
    funnel: str

    def __post_init__(self):
        if self.funnel not in FUNNELS:
            raise ValueError(f"funnel must be one of {FUNNELS}, got {self.funnel!r}")


@dataclass(frozen=True)
class ExperimentMeta:
    experiment_id: str
    outcome_events: tuple[OutcomeEvent, ...]
    planned_split: float
    length_days: int = 30
    vertical: str = "other"
    prospecting_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "outcome_events", tuple(self.outcome_events))
        if not 0.0 < self.planned_split < 1.0:
            raise ValueError(f"planned_split must lie strictly inside (0, 1), got {self.planned_split}")
        if not 0.0 <= self.prospecting_ratio <= 1.0:
            raise ValueError(f"prospecting_ratio must lie in [0, 1], got {self.prospecting_ratio}")
        if self.length_days < 1:
            raise ValueError("length_days must be positive")
        if not self.outcome_events:
            raise ValueError("at least one outcome event is required")

    @property
    def event_names(self) -> list[str]:
        return [e.name for e in self.outcome_events]

    def funnel_of(self, event: str) -> str:
        for e in self.outcome_events:
            if e.name == event:
                return e.funnel
        raise KeyError(event)

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "outcome_events": [{"name": e.name, "funnel": e.funnel} for e in self.outcome_events],
            "planned_split": self.planned_split,
            "length_days": self.length_days,
            "vertical": self.vertical,
            "prospecting_ratio": self.prospecting_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentMeta":
        events = tuple(OutcomeEvent(e["name"], e["funnel"]) for e in d["outcome_events"])
        return cls(
            experiment_id=str(d["experiment_id"]),
            outcome_events=events,
            planned_split=float(d["planned_split"]),
            length_days=int(d.get("length_days", 30)),
            vertical=str(d.get("vertical", "other")),
            prospecting_ratio=float(d.get("prospecting_ratio", 1.0)),
        )


@dataclass(frozen=True)
class FeatureSchema:
    """Column description shared by every row of a dataset."""

    dense_names: tuple[str, ...]
    sparse_vocab: int

    def __post_init__(self):
        object.__setattr__(self, "dense_names", tuple(self.dense_names))
        if len(set(self.dense_names)) != len(self.dense_names):
            raise ValueError("dense feature names must be unique")
        if self.sparse_vocab < 0:
            raise ValueError("sparse_vocab must be non-negative")

    @property
    def dense_dim(self) -> int:
        return len(self.dense_names)

    def to_dict(self) -> dict:
        return {"dense_names": list(self.dense_names), "sparse_vocab": self.sparse_vocab}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(d["dense_names"]), int(d["sparse_vocab"]))


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    z: int
    w: int
    y: Mapping[str, int]
    dense: tuple[float, ...]
    sparse: frozenset[int]
    action_rate: float
    prior_outcome: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class ExperimentDataset:
    """Column-oriented experiment data.

    The constructor only checks that the arrays line up; semantic invariants
    (one-sided noncompliance, binary outcomes, unique ids) are reported by
    :func:`validate_dataset` so that invalid data can still be inspected.
    """

    def __init__(
        self,
        meta: ExperimentMeta,
        schema: FeatureSchema,
        user_ids: Sequence[str],
        z,
        w,
        y: Mapping[str, Sequence],
        dense,
        sparse_indptr,
        sparse_indices,
        action_rate,
        prior_outcome,
    ):
        n = len(user_ids)
        self.meta = meta
        self.schema = schema
        self.user_ids = tuple(str(u) for u in user_ids)
        self.z = _frozen(np.asarray(z, dtype=np.int8).reshape(-1))
        self.w = _frozen(np.asarray(w, dtype=np.int8).reshape(-1))
        self.y = {k: _frozen(np.asarray(v, dtype=np.int8).reshape(-1)) for k, v in y.items()}
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim == 1 and dense.size == 0:
            dense = dense.reshape(n, 0)
        self.dense = _frozen(dense)
        self.sparse_indptr = _frozen(np.asarray(sparse_indptr, dtype=np.int64))
        self.sparse_indices = _frozen(np.asarray(sparse_indices, dtype=np.int64))
        self.action_rate = _frozen(np.asarray(action_rate, dtype=np.float64).reshape(-1))
        self.prior_outcome = _frozen(np.asarray(prior_outcome, dtype=np.int8).reshape(-1))

        cols = {"z": self.z, "w": self.w, "action_rate": self.action_rate, "prior_outcome": self.prior_outcome}
        cols.update({f"y[{k}]": v for k, v in self.y.items()})
        for name, col in cols.items():
            if col.shape[0] != n:
                raise ValueError(f"column {name} has length {col.shape[0]}, expected {n}")
        if self.dense.ndim != 2 or self.dense.shape[0] != n:
            raise ValueError(f"dense block must be a ({n}, d) matrix, got shape {self.dense.shape}")
        if self.sparse_indptr.shape != (n + 1,) or self.sparse_indptr[-1] != self.sparse_indices.size:
            raise ValueError("sparse_indptr does not describe sparse_indices")

    def __len__(self) -> int:
        return len(self.user_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExperimentDataset):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.schema == other.schema
            and self.user_ids == other.user_ids
            and self.y.keys() == other.y.keys()
            and all(np.array_equal(self.y[k], other.y[k]) for k in self.y)
            and all(
                np.array_equal(getattr(self, a), getattr(other, a))
                for a in ("z", "w", "dense", "sparse_indptr", "sparse_indices", "action_rate", "prior_outcome")
            )
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return len(self.user_ids)

    def sparse_of(self, i: int) -> np.ndarray:
        return self.sparse_indices[self.sparse_indptr[i] : self.sparse_indptr[i + 1]]

    def record(self, i: int) -> UserRecord:
        return UserRecord(
            user_id=self.user_ids[i],
            z=int(self.z[i]),
            w=int(self.w[i]),
            y={k: int(v[i]) for k, v in self.y.items()},
            dense=tuple(float(x) for x in self.dense[i]),
            sparse=frozenset(int(s) for s in self.sparse_of(i)),
            action_rate=float(self.action_rate[i]),
            prior_outcome=int(self.prior_outcome[i]),
        )

    @property
    def users(self) -> Iterator[UserRecord]:
        return (self.record(i) for i in range(self.n))

    @classmethod
    def from_records(
        cls, records: Iterable[UserRecord], meta: ExperimentMeta, schema: FeatureSchema
    ) -> "ExperimentDataset":
        records = list(records)
        events = meta.event_names
        indptr = [0]
        indices: list[int] = []
        for r in records:
            idx = sorted(r.sparse)
            indices.extend(idx)
            indptr.append(len(indices))
        widths = {len(r.dense) for r in records}
        if len(widths) > 1:
            raise ValueError(f"ragged dense vectors: lengths {sorted(widths)}")
        d = widths.pop() if widths else schema.dense_dim
        dense = np.array([r.dense for r in records], dtype=np.float64).reshape(len(records), d)
        return cls(
            meta=meta,
            schema=schema,
            user_ids=[r.user_id for r in records],
            z=[r.z for r in records],
            w=[r.w for r in records],
            y={e: [r.y[e] for r in records] for e in events},
            dense=dense,
            sparse_indptr=indptr,
            sparse_indices=indices,
            action_rate=[r.action_rate for r in records],
            prior_outcome=[r.prior_outcome for r in records],
        )

    def subset(self, mask) -> "ExperimentDataset":
        """Rows selected by a boolean mask or index array, order preserved."""
        idx = np.arange(self.n)[mask]
        starts, ends = self.sparse_indptr[idx], self.sparse_indptr[idx + 1]
        lengths = ends - starts
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        if lengths.sum():
            gather = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
            indices = self.sparse_indices[gather]
        else:
            indices = np.zeros(0, dtype=np.int64)
        return ExperimentDataset(
            meta=self.meta,
            schema=self.schema,
            user_ids=[self.user_ids[i] for i in idx],
            z=self.z[idx],
            w=self.w[idx],
            y={k: v[idx] for k, v in self.y.items()},
            dense=self.dense[idx],
            sparse_indptr=indptr,
            sparse_indices=indices,
            action_rate=self.action_rate[idx],
            prior_outcome=self.prior_outcome[idx],
        )

    def test_group(self) -> "ExperimentDataset":
        return self.subset(self.z == 1)

    def outcome(self, event: str) -> np.ndarray:
        try:
            return self.y[event]
        except KeyError:
            raise KeyError(f"unknown outcome event {event!r}; available: {sorted(self.y)}") from None

    def feature_matrix(self) -> np.ndarray:
        """Dense block, multi-hot sparse block, action-rate log-odds and prior outcome."""
        n = self.n
        multi_hot = np.zeros((n, self.schema.sparse_vocab))
        rows = np.repeat(np.arange(n), np.diff(self.sparse_indptr))
        multi_hot[rows, self.sparse_indices] = 1.0
        ar = np.clip(self.action_rate, 1e-9, 1 - 1e-9)
        ar_logit = np.log(ar) - np.log1p(-ar)
        return np.hstack([self.dense, multi_hot, ar_logit[:, None], self.prior_outcome[:, None].astype(float)])


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    row: int | None = None


def _binary(a: np.ndarray) -> np.ndarray:
    return (a == 0) | (a == 1)


def validate_dataset(ds: ExperimentDataset) -> list[Violation]:
    """Every invariant breach in ``ds``; an empty list means the dataset is valid."""
    out: list[Violation] = []
    for uid, count in Counter(ds.user_ids).items():
        if count > 1:
            out.append(Violation("duplicate id", f"user_id {uid!r} appears {count} times"))
    for name, col in (("z", ds.z), ("w", ds.w), ("prior_outcome", ds.prior_outcome)):
        for i in np.flatnonzero(~_binary(col)):
            out.append(Violation("non-binary value", f"{name}={col[i]}", int(i)))
    for i in np.flatnonzero((ds.z == 0) & (ds.w != 0)):
        out.append(Violation("control-exposed", "z=0 but w=1", int(i)))
    missing = set(ds.meta.event_names) - set(ds.y)
    for e in sorted(missing):
        out.append(Violation("missing outcome", f"no outcome column for event {e!r}"))
    for name, col in ds.y.items():
        for i in np.flatnonzero(~_binary(col)):
            out.append(Violation("non-binary outcome", f"y[{name}]={col[i]}", int(i)))
    if ds.dense.shape[1] != ds.schema.dense_dim:
        out.append(
            Violation("ragged features", f"dense width {ds.dense.shape[1]} != declared {ds.schema.dense_dim}")
        )
    for i in np.flatnonzero(~np.isfinite(ds.dense).all(axis=1)):
        out.append(Violation("non-finite feature", "dense vector has NaN/inf", int(i)))
    bad_ar = ~((ds.action_rate >= 0) & (ds.action_rate <= 1))
    for i in np.flatnonzero(bad_ar):
        out.append(Violation("action rate out of range", f"action_rate={ds.action_rate[i]}", int(i)))
    if ds.sparse_indices.size:
        bad = (ds.sparse_indices < 0) | (ds.sparse_indices >= ds.schema.sparse_vocab)
        if bad.any():
            rows = np.searchsorted(ds.sparse_indptr, np.flatnonzero(bad), side="right") - 1
            for r in np.unique(rows):
                out.append(Violation("sparse index out of range", f"vocab size {ds.schema.sparse_vocab}", int(r)))
    if ds.n < 2:
        out.append(Violation("too few users", f"N={ds.n}"))
    if not (ds.z == 1).any():
        out.append(Violation("empty test group", "no user has z=1"))
    return out


def validate_records(records: Sequence[UserRecord], schema: FeatureSchema) -> list[Violation]:
    """Row-level checks that cannot be expressed once data is columnar (ragged rows)."""
    out = []
    for i, r in enumerate(records):
        if len(r.dense) != schema.dense_dim:
            out.append(Violation("ragged features", f"dense length {len(r.dense)} != {schema.dense_dim}", i))
    return out


@dataclass(frozen=True)
class EffectEstimate:
    """An ATT (or ITT) estimate; ``lift`` is None when its denominator is not positive."""

    method: str
    att: float
    se: float
    lift: float | None
    lift_se: float | None
    n_used: int
    diagnostics: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.se >= 0 or math.isnan(self.se)):
            raise ValueError("se must be non-negative")
        if self.lift_se is not None and self.lift_se < 0:
            raise ValueError("lift_se must be non-negative")

    @property
    def lift_defined(self) -> bool:
        return self.lift is not None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "att": self.att,
            "se": self.se,
            "lift": self.lift,
            "lift_se": self.lift_se,
            "n_used": self.n_used,
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EffectEstimate":
        return cls(
            method=d["method"],
            att=float(d["att"]),
            se=float(d["se"]),
            lift=None if d.get("lift") is None else float(d["lift"]),
            lift_se=None if d.get("lift_se") is None else float(d["lift_se"]),
            n_used=int(d["n_used"]),
            diagnostics=d.get("diagnostics", {}),
        )
