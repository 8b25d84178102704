"""Observational ATT estimators on test-group data.

All three estimators return an :class:`EffectEstimate` whose lift uses the
exposed users' conversion rate as the anchor: lift = att / (mean(Y|W=1) - att).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EffectEstimate, ExperimentDataset
from .models import CrossFitPredictions


def obs_lift(att: float, exposed_rate: float) -> float | None:
    if not 0.0 <= exposed_rate <= 1.0:
        raise ValueError("exposed_rate must lie in [0, 1]")
    denom = exposed_rate - att
    if denom <= 0:
        return None
    return att / denom


def _lift_se(att: float, att_se: float, exposed_rate: float, n_exposed: int) -> float | None:
    """Delta-method SE of att / (r1 - att) with r1 the exposed conversion rate.

    The ATT estimate moves with r1 through the exposed users' outcomes, so
    Cov(att, r1) is taken as Var(r1) = r1 (1 - r1) / n_exposed. This is exact
    for the exposed-unexposed difference.
    """
    denom = exposed_rate - att
    if denom <= 0:
        return None
    var_r1 = exposed_rate * (1.0 - exposed_rate) / n_exposed
    var = (exposed_rate**2 * att_se**2 + att**2 * var_r1 - 2.0 * exposed_rate * att * var_r1) / denom**4
    return math.sqrt(max(var, 0.0))


def _wy(ds: ExperimentDataset, event: str) -> tuple[np.ndarray, np.ndarray]:
    if not (ds.z == 1).all():
        raise ValueError("observational estimators take test-group data only (all z = 1)")
    w = ds.w.astype(bool)
    y = ds.outcome(event).astype(float)
    if w.all() or not w.any():
        raise ValueError("both exposed and unexposed users are required")
    return w, y


def exposed_unexposed(ds: ExperimentDataset, event: str) -> EffectEstimate:
    w, y = _wy(ds, event)
    y1, y0 = y[w], y[~w]
    r1, r0 = y1.mean(), y0.mean()
    att = float(r1 - r0)
    se = math.sqrt(r1 * (1 - r1) / y1.size + r0 * (1 - r0) / y0.size)
    return EffectEstimate("exposed_unexposed", att, se, obs_lift(att, r1), _lift_se(att, se, r1, y1.size), ds.n)


@dataclass(frozen=True)
class Stratification:
    boundaries: np.ndarray
    assignment: np.ndarray
    counts: np.ndarray  # (2, J): row w holds N_wj
    kept: np.ndarray
    dropped_strata: tuple[int, ...]

    @property
    def weights(self) -> np.ndarray:
        n1 = np.where(self.kept, self.counts[1], 0).astype(float)
        return n1 / n1.sum()


def stratify(e_hat, w, J: int = 100) -> Stratification:
    """Equal-width strata with b_{j-1} < e <= b_j; e = 0 lands in the first stratum."""
    if J < 1:
        raise ValueError("need at least one stratum")
    e_hat = np.asarray(e_hat, dtype=float)
    if ((e_hat < 0) | (e_hat > 1)).any():
        raise ValueError("propensity scores must lie in [0, 1]")
    b = np.linspace(0.0, 1.0, J + 1)
    assignment = np.clip(np.searchsorted(b[1:], e_hat, side="left"), 0, J - 1)
    w = np.asarray(w).astype(int)
    counts = np.vstack([np.bincount(assignment[w == k], minlength=J) for k in (0, 1)])
    kept = (counts[0] > 0) & (counts[1] > 0)
    dropped = tuple(int(j) for j in np.flatnonzero((counts[1] > 0) & (counts[0] == 0)))
    return Stratification(b, assignment, counts, kept, dropped)


def spsm_att(
    ds: ExperimentDataset,
    event: str,
    e_hat,
    J: int = 100,
    literal_variance: bool = False,
) -> tuple[EffectEstimate, Stratification]:
    """Stratified propensity score ATT.

    Strata that hold treated but no untreated users are dropped and the
    treated-share weights renormalized over the rest. The variance is
    sum_j (V0j + V1j) * (N1j / N1)^2 with V_wj = S_wj^2 / N_wj; set
    ``literal_variance`` to square the bracket instead.
    """
    w, y = _wy(ds, event)
    e_hat = np.asarray(e_hat, dtype=float)
    if e_hat.shape != y.shape:
        raise ValueError("e_hat must hold one score per user")
    st = stratify(e_hat, w, J)
    if not st.kept.any():
        raise ValueError("every stratum lacks either exposed or unexposed users")
    sums = np.vstack([np.bincount(st.assignment[w == k], weights=y[w == k], minlength=J) for k in (False, True)])
    sq = np.vstack([np.bincount(st.assignment[w == k], weights=y[w == k] ** 2, minlength=J) for k in (False, True)])
    with np.errstate(divide="ignore", invalid="ignore"):
        means = sums / st.counts
        s2 = sq / st.counts - means**2
        v = np.maximum(s2, 0.0) / st.counts
    tau_j = np.where(st.kept, means[1] - means[0], 0.0)
    wts = st.weights
    att = float(np.sum(wts * tau_j))
    vsum = np.where(st.kept, v[0] + v[1], 0.0)
    var = float(np.sum((vsum**2 if literal_variance else vsum) * wts**2))
    se = math.sqrt(var)
    r1 = float(y[w].mean())
    est = EffectEstimate(
        "spsm",
        att,
        se,
        obs_lift(att, r1),
        _lift_se(att, se, r1, int(w.sum())),
        int(st.counts[:, st.kept].sum()),
        {
            "strata": J,
            "dropped_strata": list(st.dropped_strata),
            "n_treated_dropped": int(st.counts[1, ~st.kept].sum()),
            "variance_form": "literal" if literal_variance else "standard",
        },
    )
    return est, st


@dataclass(frozen=True)
class DmlComponents:
    psi: np.ndarray
    tau_k: np.ndarray
    tau: float
    jacobian: float
    sigma2: float


def dml_att(
    ds: ExperimentDataset,
    event: str,
    cf: CrossFitPredictions,
    residual_variant: str = "g0",
) -> tuple[EffectEstimate, DmlComponents]:
    """Orthogonal-score ATT with cross-fitted nuisances.

    Per fold the score sum is zero at
    tau_k = sum[W (Y - g) - e (1 - W)(Y - g) / (1 - e)] / sum W,
    where g is g(0, X) ("g0") or g(W, X) ("gw"). The score is scaled by the
    treated share, so the Jacobian is -1 and the variance is the mean squared
    score.
    """
    if residual_variant not in ("g0", "gw"):
        raise ValueError("residual_variant must be 'g0' or 'gw'")
    w_b, y = _wy(ds, event)
    n = y.size
    if cf.e_hat.shape != (n,) or cf.g_hat.shape != (n, 2) or cf.fold_of.shape != (n,):
        raise ValueError("cross-fit predictions do not cover every user")
    w = w_b.astype(float)
    e = cf.e_hat
    if ((e <= 0) | (e >= 1)).any():
        raise ValueError("propensity scores must be clipped strictly inside (0, 1)")
    g = cf.g_hat[:, 0] if residual_variant == "g0" else np.where(w_b, cf.g_hat[:, 1], cf.g_hat[:, 0])
    resid = y - g
    core = w * resid - e * (1 - w) * resid / (1 - e)
    folds = np.unique(cf.fold_of)
    tau_k = np.empty(folds.size)
    tau_of_user = np.empty(n)
    for i, k in enumerate(folds):
        m = cf.fold_of == k
        n1k = w[m].sum()
        if n1k == 0:
            raise ValueError(f"fold {k} has no exposed users")
        tau_k[i] = core[m].sum() / n1k
        tau_of_user[m] = tau_k[i]
    tau = float(tau_k.mean())
    p_hat = w.mean()
    psi = (core - w * tau_of_user) / p_hat
    jacobian = float(-np.mean(w / p_hat))
    sigma2 = float(np.mean(psi**2) / jacobian**2)
    se = math.sqrt(sigma2 / n)
    r1 = float(y[w_b].mean())
    est = EffectEstimate(
        "dml",
        tau,
        se,
        obs_lift(tau, r1),
        _lift_se(tau, se, r1, int(w_b.sum())),
        n,
        {"tau_k": [float(t) for t in tau_k], "residual_variant": residual_variant, **cf.diagnostics()},
    )
    return est, DmlComponents(psi, tau_k, tau, jacobian, sigma2)


def trivial_predictions(ds: ExperimentDataset) -> CrossFitPredictions:
    """Single-fold nuisances with e = treated share and g = 0."""
    n = ds.n
    share = float(ds.w.mean())
    return CrossFitPredictions(
        fold_of=np.zeros(n, dtype=np.int64),
        e_hat=np.full(n, share),
        g_hat=np.zeros((n, 2)),
        auc_propensity=(float("nan"),),
        auc_outcome=(float("nan"),),
        n_folds=1,
    )


def bootstrap_obs_lift(
    ds: ExperimentDataset,
    event: str,
    method: str,
    B: int = 200,
    seed: int = 0,
    cf: CrossFitPredictions | None = None,
    J: int = 100,
    residual_variant: str = "g0",
) -> float | None:
    """Bootstrap SD of an observational lift, resampling users with the fitted nuisances held fixed."""
    w_b, y = _wy(ds, event)
    rng = np.random.default_rng(seed)
    n = y.size
    w = w_b.astype(float)
    lifts = []
    if method in ("spsm", "dml") and cf is None:
        raise ValueError(f"{method} bootstrap needs cross-fit predictions")
    if method == "dml":
        g = cf.g_hat[:, 0] if residual_variant == "g0" else np.where(w_b, cf.g_hat[:, 1], cf.g_hat[:, 0])
        core = w * (y - g) - cf.e_hat * (1 - w) * (y - g) / (1 - cf.e_hat)
        n_folds = int(cf.fold_of.max()) + 1
    elif method == "spsm":
        st = stratify(cf.e_hat, w_b, J)
        cell = st.assignment * 2 + w_b.astype(int)
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        wi, yi = w[idx], y[idx]
        n1 = wi.sum()
        if n1 == 0 or n1 == n:
            continue
        r1 = yi[wi == 1].mean()
        if method == "exposed_unexposed":
            att = r1 - yi[wi == 0].mean()
        elif method == "dml":
            num = np.bincount(cf.fold_of[idx], weights=core[idx], minlength=n_folds)
            den = np.bincount(cf.fold_of[idx], weights=wi, minlength=n_folds)
            if (den == 0).any():
                continue
            att = np.mean(num / den)
        elif method == "spsm":
            c = np.bincount(cell[idx], minlength=2 * J).reshape(J, 2)
            s = np.bincount(cell[idx], weights=yi, minlength=2 * J).reshape(J, 2)
            kept = (c[:, 0] > 0) & (c[:, 1] > 0)
            if not kept.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                tau_j = s[:, 1] / c[:, 1] - s[:, 0] / c[:, 0]
            wts = np.where(kept, c[:, 1], 0) / c[kept, 1].sum()
            att = np.sum(wts[kept] * tau_j[kept])
        else:
            raise ValueError(f"unknown method {method!r}")
        lift = obs_lift(float(att), float(r1))
        if lift is not None:
            lifts.append(lift)
    if len(lifts) < 2:
        return None
    return float(np.std(lifts, ddof=1))
