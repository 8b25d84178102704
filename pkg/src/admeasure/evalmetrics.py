"""Comparing observational lifts with RCT lifts: APE, AE, RPB and summary tables."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .data import FUNNELS

OBS_METHODS = ("exposed_unexposed", "spsm", "dml")
ALPHA = 0.05


def ape(lift_m: float, lift_rct: float) -> float | None:
    """|(lift_m - lift_rct) / lift_rct|; None unless the RCT lift is positive."""
    if lift_rct is None or lift_m is None or lift_rct <= 0:
        return None
    return abs((lift_m - lift_rct) / lift_rct)


def ae(lift_m: float, lift_rct: float) -> float:
    return abs(lift_m - lift_rct)


def rpb(ape_eu: float, ape_m: float) -> float | None:
    """Remaining percentage bias, (1 - (ape_eu - ape_m) / ape_eu) * 100; unbounded above."""
    if ape_eu is None or ape_m is None or ape_eu <= 0:
        return None
    # ratio form: keeps rpb < 100 exactly when ape_m < ape_eu
    return 100.0 * (ape_m / ape_eu)


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct * n)-th smallest value."""
    if not values:
        raise ValueError("empty sample")
    if not 0.0 < pct <= 1.0:
        raise ValueError("pct must lie in (0, 1]")
    s = sorted(values)
    k = max(1, math.ceil(pct * len(s) - 1e-12))
    return s[k - 1]


def winsorize(values: Sequence[float | None], upper_pct: float = 0.95, groups: Sequence | None = None) -> list:
    """Cap values above each group's nearest-rank ``upper_pct`` percentile; None entries pass through."""
    values = list(values)
    if groups is None:
        groups = [None] * len(values)
    if len(groups) != len(values):
        raise ValueError("groups must align with values")
    caps = {}
    for g in dict.fromkeys(groups):
        members = [v for v, gg in zip(values, groups) if gg == g and v is not None]
        if members:
            caps[g] = nearest_rank(members, upper_pct)
    return [v if v is None or v <= caps[g] else caps[g] for v, g in zip(values, groups)]


def assign_deciles(lifts: Sequence[float], funnels: Sequence | None = None) -> list[int]:
    """Equal-count deciles by rank within each funnel; ties keep input order."""
    lifts = np.asarray(lifts, dtype=float)
    funnels = np.asarray(funnels if funnels is not None else ["all"] * lifts.size, dtype=object)
    out = np.zeros(lifts.size, dtype=int)
    for f in dict.fromkeys(funnels.tolist()):
        idx = np.flatnonzero(funnels == f)
        if idx.size < 10:
            raise ValueError(f"funnel {f!r} has {idx.size} items; deciles need at least 10")
        order = idx[np.argsort(lifts[idx], kind="stable")]
        out[order] = np.arange(idx.size) * 10 // idx.size + 1
    return out.tolist()


def two_sided_p(estimate: float, se: float) -> float:
    if se is None or not se > 0:
        return 0.0 if estimate != 0 else 1.0
    return float(2.0 * stats.norm.sf(abs(estimate) / se))


def difference_pvalue(lift_a: float, se_a: float, lift_b: float, se_b: float) -> float:
    """Two-sided z-test of lift_a = lift_b treating the two estimates as independent."""
    return two_sided_p(lift_a - lift_b, math.hypot(se_a, se_b))


@dataclass
class EvaluationRecord:
    experiment_id: str
    event: str
    funnel: str
    rct_lift: float | None
    rct_lift_se: float | None
    rct_significant: bool
    method_lifts: dict = field(default_factory=dict)
    method_lift_se: dict = field(default_factory=dict)
    ape: dict = field(default_factory=dict)
    ae: dict = field(default_factory=dict)
    rpb: dict = field(default_factory=dict)
    method_diff_significant: dict = field(default_factory=dict)
    decile: int | None = None
    characteristics: dict = field(default_factory=dict)
    truth: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationRecord":
        return cls(**dict(d))


def build_record(
    rct: Mapping,
    estimates: Mapping[str, Mapping],
    characteristics: Mapping[str, float],
    funnel: str,
    truth: Mapping | None = None,
) -> EvaluationRecord:
    """Join one RCT result with the observational estimates for the same (experiment, event).

    ``rct`` is an RctResult dict and ``estimates`` maps method to an
    EffectEstimate dict.
    """
    lr, lr_se = rct.get("lift"), rct.get("lift_se")
    rec = EvaluationRecord(
        experiment_id=rct["experiment_id"],
        event=rct["event"],
        funnel=funnel,
        rct_lift=lr,
        rct_lift_se=lr_se,
        rct_significant=bool(rct.get("significant_5pct", False)),
        characteristics=dict(characteristics),
        truth=dict(truth) if truth is not None else None,
    )
    for m, est in estimates.items():
        lm, lm_se = est.get("lift"), est.get("lift_se")
        rec.method_lifts[m] = lm
        rec.method_lift_se[m] = lm_se
        rec.ape[m] = ape(lm, lr) if lm is not None and lr is not None else None
        rec.ae[m] = ae(lm, lr) if lm is not None and lr is not None else None
        if None in (lm, lr, lm_se, lr_se):
            rec.method_diff_significant[m] = None
        else:
            rec.method_diff_significant[m] = difference_pvalue(lm, lm_se, lr, lr_se) <= ALPHA
    eu = rec.ape.get("exposed_unexposed")
    for m in estimates:
        if m != "exposed_unexposed":
            rec.rpb[m] = rpb(eu, rec.ape[m])
    return rec


def significance_table(records: Iterable[EvaluationRecord], methods=("spsm", "dml")) -> dict:
    """Counts of statistically indistinguishable / different method-vs-RCT lifts.

    Rows are (funnel, RCT p-value bucket) with an "all" funnel first.
    """
    records = list(records)
    rows = []
    for funnel in ("all", *FUNNELS):
        for bucket, sig in ((">0.05", False), ("<=0.05", True)):
            sel = [r for r in records if (funnel == "all" or r.funnel == funnel) and r.rct_significant == sig]
            row = {"funnel": funnel, "rct_p": bucket}
            for m in methods:
                flags = [r.method_diff_significant.get(m) for r in sel]
                flags = [f for f in flags if f is not None]
                diff = sum(flags)
                same = len(flags) - diff
                row[m] = {"p>0.05": same, "p<=0.05": diff, "pct_significant": diff / len(flags) if flags else None}
            rows.append(row)
    return {"methods": list(methods), "rows": rows}


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def decile_table(records: Sequence[EvaluationRecord], metric: str, methods=("spsm", "dml")) -> dict:
    """Median ``metric`` ("ape" or "ae") per funnel, RCT decile and method, plus a per-funnel median row."""
    out = {}
    for funnel in FUNNELS:
        sel = [r for r in records if r.funnel == funnel]
        if not sel:
            continue
        block = {}
        for d in range(1, 11):
            dsel = [r for r in sel if r.decile == d]
            if dsel:
                block[str(d)] = {m: _median(getattr(r, metric).get(m) for r in dsel) for m in methods}
        block["median"] = {m: _median(getattr(r, metric).get(m) for r in sel) for m in methods}
        out[funnel] = block
    return out


def share_improved(records: Sequence[EvaluationRecord], method: str) -> float | None:
    """Share of records where the method's APE beats the exposed-unexposed APE."""
    pairs = [(r.ape.get(method), r.ape.get("exposed_unexposed")) for r in records]
    pairs = [(a, b) for a, b in pairs if a is not None and b is not None and b > 0]
    if not pairs:
        return None
    return sum(a < b for a, b in pairs) / len(pairs)


def rpb_table(records: Sequence[EvaluationRecord], methods=("spsm", "dml")) -> dict:
    """Per funnel and method: share improved (RPB < 100) and shares with bias cut by half or by 80%."""
    out = {}
    for funnel in ("all", *FUNNELS):
        sel = [r for r in records if funnel == "all" or r.funnel == funnel]
        block = {}
        for m in methods:
            vals = [r.rpb.get(m) for r in sel]
            vals = [v for v in vals if v is not None]
            if not vals:
                block[m] = None
                continue
            v = np.asarray(vals)
            block[m] = {
                "n": int(v.size),
                "median_rpb": float(np.median(v)),
                "share_improved": float(np.mean(v < 100)),
                "share_rpb_le_50": float(np.mean(v <= 50)),
                "share_rpb_le_20": float(np.mean(v <= 20)),
            }
        out[funnel] = block
    return out


def _fmt(x, pct=False):
    if x is None:
        return "-"
    return f"{100 * x:.0f}%" if pct else f"{x:.3g}"


def render_significance_table(table: dict) -> str:
    methods = table["methods"]
    header = ["funnel", "RCT p"]
    for m in methods:
        header += [f"{m} p>0.05", f"{m} p<=0.05", f"{m} %sig"]
    lines = [header]
    for row in table["rows"]:
        cells = [row["funnel"], row["rct_p"]]
        for m in methods:
            c = row[m]
            cells += [str(c["p>0.05"]), str(c["p<=0.05"]), _fmt(c["pct_significant"], pct=True)]
        lines.append(cells)
    return _align(lines)


def render_decile_table(table: dict, methods=("spsm", "dml"), pct=True) -> str:
    funnels = list(table)
    header = ["decile"] + [f"{f}:{m}" for f in funnels for m in methods]
    keys = [str(d) for d in range(1, 11)] + ["median"]
    lines = [header]
    for k in keys:
        if not any(k in table[f] for f in funnels):
            continue
        lines.append([k] + [_fmt(table[f].get(k, {}).get(m), pct) for f in funnels for m in methods])
    return _align(lines)


def _align(lines: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in lines) for i in range(len(lines[0]))]
    return "\n".join("  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in lines) + "\n"
