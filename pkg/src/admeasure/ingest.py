"""Reading and writing experiment datasets, plus the randomization check.

On-disk layout: the user rows live in ``<name>.jsonl`` (or ``<name>.csv``) and
the experiment metadata plus feature schema in the sidecar
``<name>.meta.json``. CSV files carry a single outcome event in column ``y``
and encode the sparse index set as a ``;``-separated list.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from scipy import stats

from .data import (
    ExperimentDataset,
    ExperimentMeta,
    FeatureSchema,
    UserRecord,
    Violation,
    validate_dataset,
    validate_records,
)

EXACT_MAX_N = 10_000
USER_KEYS = ("user_id", "z", "w", "y", "dense", "sparse", "action_rate", "prior_outcome")


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DatasetValidationError(ValueError):
    def __init__(self, report: Sequence[Violation]):
        self.report = list(report)
        head = "; ".join(f"{v.kind} ({v.detail})" for v in self.report[:5])
        more = f" and {len(self.report) - 5} more" if len(self.report) > 5 else ""
        super().__init__(f"dataset failed validation: {head}{more}")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _read_sidecar(path: Path) -> tuple[ExperimentMeta, FeatureSchema]:
    side = sidecar_path(path)
    if not side.exists():
        raise ParseError(f"missing metadata sidecar {side}")
    try:
        d = json.loads(side.read_text())
        return ExperimentMeta.from_dict(d["meta"]), FeatureSchema.from_dict(d["schema"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad metadata sidecar {side}: {exc}") from exc


def _write_sidecar(ds: ExperimentDataset, path: Path) -> None:
    body = {"meta": ds.meta.to_dict(), "schema": ds.schema.to_dict()}
    sidecar_path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _as_binary(value, name: str, line: int) -> int:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, float)) and float(value).is_integer():
        return int(value)
    raise ParseError(f"{name} must be an integer, got {value!r}", line)


def _parse_json_row(obj: dict, line: int, events: list[str]) -> UserRecord:
    missing = [k for k in USER_KEYS if k not in obj]
    if missing:
        raise ParseError(f"missing key(s) {', '.join(missing)}", line)
    y = obj["y"]
    if not isinstance(y, dict):
        raise ParseError("y must be an object keyed by event name", line)
    absent = [e for e in events if e not in y]
    if absent:
        raise ParseError(f"y lacks outcome event(s) {', '.join(absent)}", line)
    try:
        return UserRecord(
            user_id=str(obj["user_id"]),
            z=_as_binary(obj["z"], "z", line),
            w=_as_binary(obj["w"], "w", line),
            y={e: _as_binary(y[e], f"y[{e}]", line) for e in events},
            dense=tuple(float(x) for x in obj["dense"]),
            sparse=frozenset(int(s) for s in obj["sparse"]),
            action_rate=float(obj["action_rate"]),
            prior_outcome=_as_binary(obj["prior_outcome"], "prior_outcome", line),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), line) from exc


def _read_jsonl(path: Path, meta: ExperimentMeta) -> list[UserRecord]:
    records = []
    events = meta.event_names
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            records.append(_parse_json_row(obj, lineno, events))
    return records


def _csv_columns(schema: FeatureSchema) -> list[str]:
    return ["user_id", "z", "w", "y", *schema.dense_names, "sparse", "action_rate", "prior_outcome"]


def _read_csv(path: Path, meta: ExperimentMeta, schema: FeatureSchema) -> list[UserRecord]:
    if len(meta.outcome_events) != 1:
        raise ParseError("CSV datasets hold exactly one outcome event; metadata lists "
                         f"{len(meta.outcome_events)}")
    event = meta.event_names[0]
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        expected = _csv_columns(schema)
        missing = [c for c in expected if c not in header]
        if missing:
            raise ParseError(f"header is missing column(s): {', '.join(missing)}", 1)
        pos = {c: header.index(c) for c in expected}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
            try:
                sparse_raw = row[pos["sparse"]].strip()
                records.append(
                    UserRecord(
                        user_id=row[pos["user_id"]],
                        z=int(row[pos["z"]]),
                        w=int(row[pos["w"]]),
                        y={event: int(row[pos["y"]])},
                        dense=tuple(float(row[pos[c]]) for c in schema.dense_names),
                        sparse=frozenset(int(s) for s in sparse_raw.split(";")) if sparse_raw else frozenset(),
                        action_rate=float(row[pos["action_rate"]]),
                        prior_outcome=int(row[pos["prior_outcome"]]),
                    )
                )
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
    return records


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise ValueError(f"unsupported format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "jsonl"


def load_dataset(path: str | Path, format: str | None = None) -> ExperimentDataset:
    """Load and validate a dataset; raises ParseError or DatasetValidationError."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if not path.exists():
        raise FileNotFoundError(path)
    meta, schema = _read_sidecar(path)
    records = _read_jsonl(path, meta) if fmt == "jsonl" else _read_csv(path, meta, schema)
    report = validate_records(records, schema)
    if report:
        raise DatasetValidationError(report)
    ds = ExperimentDataset.from_records(records, meta, schema)
    report = validate_dataset(ds)
    if report:
        raise DatasetValidationError(report)
    return ds


def write_dataset(ds: ExperimentDataset, path: str | Path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with path.open("w") as fh:
            for i in range(ds.n):
                row = {
                    "user_id": ds.user_ids[i],
                    "z": int(ds.z[i]),
                    "w": int(ds.w[i]),
                    "y": {k: int(v[i]) for k, v in ds.y.items()},
                    "dense": [float(x) for x in ds.dense[i]],
                    "sparse": [int(s) for s in ds.sparse_of(i)],
                    "action_rate": float(ds.action_rate[i]),
                    "prior_outcome": int(ds.prior_outcome[i]),
                }
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    else:
        if len(ds.y) != 1:
            raise ValueError("CSV output supports a single outcome event; select one first")
        (yname,) = ds.y
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_csv_columns(ds.schema))
            for i in range(ds.n):
                writer.writerow(
                    [ds.user_ids[i], int(ds.z[i]), int(ds.w[i]), int(ds.y[yname][i])]
                    + [repr(float(x)) for x in ds.dense[i]]
                    + [";".join(str(int(s)) for s in ds.sparse_of(i)),
                       repr(float(ds.action_rate[i])), int(ds.prior_outcome[i])]
                )
    _write_sidecar(ds, path)
    return path


@dataclass(frozen=True)
class RandomizationCheck:
    n_test: int
    n_total: int
    planned_split: float
    p_value: float
    method: str

    def to_dict(self) -> dict:
        return {
            "n_test": self.n_test,
            "n_total": self.n_total,
            "planned_split": self.planned_split,
            "p_value": self.p_value,
            "method": self.method,
        }


def binomial_split_pvalue(n_test: int, n_total: int, planned_split: float) -> tuple[float, str]:
    """Two-sided p-value for H0: P(test) = planned_split.

    Exact (minimum-likelihood) up to EXACT_MAX_N users, normal approximation
    with continuity correction above that.
    """
    if not 0.0 < planned_split < 1.0:
        raise ValueError("planned_split must lie strictly inside (0, 1)")
    if n_total < 1 or not 0 <= n_test <= n_total:
        raise ValueError("need 0 <= n_test <= n_total and n_total >= 1")
    if n_total <= EXACT_MAX_N:
        p = stats.binomtest(n_test, n_total, planned_split, alternative="two-sided").pvalue
        return float(min(1.0, max(0.0, p))), "exact"
    mean = n_total * planned_split
    sd = math.sqrt(n_total * planned_split * (1.0 - planned_split))
    zstat = (abs(n_test - mean) - 0.5) / sd
    if zstat <= 0:
        return 1.0, "normal"
    return float(min(1.0, 2.0 * stats.norm.sf(zstat))), "normal"


def randomization_check(ds: ExperimentDataset) -> RandomizationCheck:
    n_test = int((ds.z == 1).sum())
    p, method = binomial_split_pvalue(n_test, ds.n, ds.meta.planned_split)
    return RandomizationCheck(n_test, ds.n, ds.meta.planned_split, p, method)


def pvalue_uniformity(pvals: Sequence[float], thresholds=(0.05, 0.25, 0.75)) -> tuple[float, ...]:
    """Share of p-values strictly below each threshold."""
    if len(pvals) == 0:
        raise ValueError("no p-values given")
    if any(not 0.0 <= p <= 1.0 for p in pvals):
        raise ValueError("p-values must lie in [0, 1]")
    n = len(pvals)
    return tuple(sum(p < t for p in pvals) / n for t in thresholds)
