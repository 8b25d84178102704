"""Experimental analysis: ITT, 2SLS ATT, lift, bootstrap inference, power and Cohen's d."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import ExperimentDataset

Z_CRIT = 1.96
MAX_DROPPED_SHARE = 0.2


def _arms(ds: ExperimentDataset, event: str) -> tuple[np.ndarray, np.ndarray]:
    y = ds.outcome(event).astype(float)
    test, control = y[ds.z == 1], y[ds.z == 0]
    if test.size == 0 or control.size == 0:
        raise ValueError("both test and control groups must be non-empty")
    return test, control


def estimate_itt(ds: ExperimentDataset, event: str) -> tuple[float, float]:
    test, control = _arms(ds, event)
    p1, p0 = test.mean(), control.mean()
    se = math.sqrt(p1 * (1 - p1) / test.size + p0 * (1 - p0) / control.size)
    return float(p1 - p0), se


def tsls(y, w, z) -> tuple[np.ndarray, np.ndarray]:
    """Just-identified 2SLS of y on (1, w) instrumented by (1, z); HC0 sandwich covariance."""
    y = np.asarray(y, dtype=float)
    X = np.column_stack([np.ones(y.size), np.asarray(w, dtype=float)])
    Z = np.column_stack([np.ones(y.size), np.asarray(z, dtype=float)])
    ZX = Z.T @ X
    beta = np.linalg.solve(ZX, Z.T @ y)
    u = y - X @ beta
    meat = (Z * (u * u)[:, None]).T @ Z
    bread = np.linalg.inv(ZX)
    return beta, bread @ meat @ bread.T


def estimate_att_2sls(ds: ExperimentDataset, event: str) -> tuple[float, float]:
    _arms(ds, event)
    if not (ds.w[ds.z == 1] == 1).any():
        raise ValueError("weak/degenerate instrument: no exposed users in the test group")
    beta, cov = tsls(ds.outcome(event), ds.w, ds.z)
    return float(beta[1]), float(math.sqrt(max(cov[1, 1], 0.0)))


def lift_from_att(att: float, treated_rate: float) -> float | None:
    """att / (treated_rate - att); None when the counterfactual rate is not positive."""
    if not 0.0 <= treated_rate <= 1.0:
        raise ValueError("treated_rate must lie in [0, 1]")
    denom = treated_rate - att
    if denom <= 0:
        return None
    return att / denom


def _cell_counts(ds: ExperimentDataset, event: str) -> tuple[np.ndarray, np.ndarray]:
    """Test-arm counts of (w, y) in order 00, 01, 10, 11 and control-arm counts of y in order 0, 1."""
    y = ds.outcome(event)
    t = ds.z == 1
    code = 2 * ds.w[t].astype(int) + y[t].astype(int)
    test = np.bincount(code, minlength=4)
    control = np.bincount(y[~t].astype(int), minlength=2)
    return test, control


def _lift_from_cells(test: np.ndarray, control: np.ndarray) -> np.ndarray:
    """RCT lift from cell counts; works on stacked replicates (last axis = cells).

    With q = test cell shares and c = control conversion rate, the Bloom ATT
    is (q01 + q11 - c) / (q10 + q11) and the lift simplifies to
    (q01 + q11 - c) / (c - q01). Undefined lifts come back as NaN.
    """
    test = np.asarray(test, dtype=float)
    control = np.asarray(control, dtype=float)
    q = test / test.sum(axis=-1, keepdims=True)
    c = control[..., 1] / control.sum(axis=-1)
    exposed = q[..., 2] + q[..., 3]
    num = q[..., 1] + q[..., 3] - c
    den = c - q[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lift = np.where((den > 0) & (exposed > 0), num / den, np.nan)
    return lift


def rct_lift(ds: ExperimentDataset, event: str) -> float | None:
    test, control = _cell_counts(ds, event)
    if test[2] + test[3] == 0:
        return None
    att, _ = estimate_att_2sls(ds, event)
    return lift_from_att(att, test[3] / (test[2] + test[3]))


def delta_lift_se(ds: ExperimentDataset, event: str) -> float | None:
    """Delta-method SE of the RCT lift (multinomial cells in the test arm, binomial control)."""
    test, control = _cell_counts(ds, event)
    n_t, n_c = test.sum(), control.sum()
    q01, q11 = test[1] / n_t, test[3] / n_t
    c = control[1] / n_c
    num, den = q01 + q11 - c, c - q01
    if den <= 0:
        return None
    g11 = 1.0 / den
    g01 = 1.0 / den + num / den**2
    gc = -g01
    var_t = (g11**2 * q11 + g01**2 * q01 - (g11 * q11 + g01 * q01) ** 2) / n_t
    var_c = gc**2 * c * (1 - c) / n_c
    return float(math.sqrt(max(var_t + var_c, 0.0)))


@dataclass(frozen=True)
class BootstrapLift:
    lift_se: float | None
    ci: tuple[float, float] | None
    n_dropped: int
    unreliable: bool


def bootstrap_lift(ds: ExperimentDataset, event: str, B: int = 200, seed: int = 0) -> BootstrapLift:
    """Bootstrap SD and 95% percentile interval of the RCT lift.

    Users are resampled with replacement within each assignment arm. The lift
    depends on the data only through the (z, w, y) cell counts, so each
    replicate draws those counts from the multinomial a user-level resample
    induces. Replicates with an undefined lift are dropped.
    """
    if B < 50:
        raise ValueError("use at least 50 bootstrap replicates")
    test, control = _cell_counts(ds, event)
    rng = np.random.default_rng(seed)
    n_t, n_c = int(test.sum()), int(control.sum())
    if n_t == 0 or n_c == 0:
        raise ValueError("both test and control groups must be non-empty")
    t_rep = rng.multinomial(n_t, test / n_t, size=B)
    c_rep = rng.multinomial(n_c, control / n_c, size=B)
    lifts = _lift_from_cells(t_rep, c_rep)
    ok = lifts[np.isfinite(lifts)]
    dropped = B - ok.size
    if ok.size < 2:
        return BootstrapLift(None, None, dropped, True)
    lo, hi = np.percentile(ok, [2.5, 97.5])
    return BootstrapLift(float(ok.std(ddof=1)), (float(lo), float(hi)), dropped, dropped > MAX_DROPPED_SHARE * B)


def detectable_lift_check(lift_se: float, target_lift: float) -> bool:
    """True when the design has 50% power to detect ``target_lift`` at the 5% level."""
    if lift_se < 0:
        raise ValueError("lift_se must be non-negative")
    return lift_se <= target_lift / Z_CRIT


def cohens_d(ds: ExperimentDataset, event: str) -> float | None:
    test, control = _arms(ds, event)
    n1, n0 = test.size, control.size
    if n1 + n0 <= 2:
        return None
    pooled_var = ((n1 - 1) * test.var(ddof=1 if n1 > 1 else 0) + (n0 - 1) * control.var(ddof=1 if n0 > 1 else 0)) / (
        n1 + n0 - 2
    )
    if pooled_var <= 0:
        return None
    return float((test.mean() - control.mean()) / math.sqrt(pooled_var))


@dataclass(frozen=True)
class RctResult:
    experiment_id: str
    event: str
    itt: float
    itt_se: float
    att: float
    att_se: float
    lift: float | None
    lift_se: float | None
    lift_se_delta: float | None
    lift_ci: tuple[float, float] | None
    lift_ci_unreliable: bool
    treated_rate: float
    exposure_rate: float
    n_test: int
    n_control: int
    control_conv_rate: float
    cohens_d: float | None
    significant_5pct: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lift_ci"] = list(self.lift_ci) if self.lift_ci is not None else None
        return d


def analyze_rct(ds: ExperimentDataset, event: str, B: int = 200, seed: int = 0) -> RctResult:
    itt, itt_se = estimate_itt(ds, event)
    att, att_se = estimate_att_2sls(ds, event)
    test_mask = ds.z == 1
    w_t = ds.w[test_mask]
    y = ds.outcome(event)
    exposure_rate = float(w_t.mean())
    treated_rate = float(y[test_mask][w_t == 1].mean())
    lift = lift_from_att(att, treated_rate)
    boot = bootstrap_lift(ds, event, B=B, seed=seed)
    significant = bool(lift is not None and boot.lift_se is not None and boot.lift_se > 0
                       and abs(lift) / boot.lift_se > Z_CRIT)
    return RctResult(
        experiment_id=ds.meta.experiment_id,
        event=event,
        itt=itt,
        itt_se=itt_se,
        att=att,
        att_se=att_se,
        lift=lift,
        lift_se=boot.lift_se,
        lift_se_delta=delta_lift_se(ds, event),
        lift_ci=boot.ci,
        lift_ci_unreliable=boot.unreliable,
        treated_rate=treated_rate,
        exposure_rate=exposure_rate,
        n_test=int(test_mask.sum()),
        n_control=int((~test_mask).sum()),
        control_conv_rate=float(y[~test_mask].mean()),
        cohens_d=cohens_d(ds, event),
        significant_5pct=significant,
    )
