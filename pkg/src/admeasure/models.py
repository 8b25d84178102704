"""Propensity and outcome models, cross-fitting, and AUC diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import rankdata

from .data import ExperimentDataset

CLIP_LO, CLIP_HI = 0.01, 0.99


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic"
    hidden_layers: tuple[int, ...] = (32, 16)
    learning_rate: float = 0.01
    epochs: int = 20
    l2: float = 1e-4
    batch: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be at least 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ValueError("learning_rate must be positive and l2 non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class _Standardizer:
    def __init__(self, X: np.ndarray):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


class LogisticModel:
    def __init__(self, std: _Standardizer, coef: np.ndarray, intercept: float):
        self.std, self.coef, self.intercept = std, coef, intercept

    def decision_function(self, X) -> np.ndarray:
        return self.std(np.asarray(X, dtype=float)) @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))


def _fit_logistic(spec: ModelSpec, X: np.ndarray, t: np.ndarray) -> LogisticModel:
    std = _Standardizer(X)
    Xs = std(X)
    n, p = Xs.shape
    base = np.log(t.mean() / (1 - t.mean()))

    def loss_grad(theta):
        b, w = theta[0], theta[1:]
        m = Xs @ w + b
        # log(1 + e^m) - t*m, written to stay finite for large |m|
        loss = np.mean(np.logaddexp(0.0, m) - t * m) + 0.5 * spec.l2 * w @ w
        r = (expit(m) - t) / n
        return loss, np.concatenate([[r.sum()], Xs.T @ r + spec.l2 * w])

    theta0 = np.zeros(p + 1)
    theta0[0] = base
    res = minimize(loss_grad, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-9, "ftol": 1e-14})
    return LogisticModel(std, res.x[1:], float(res.x[0]))


class MLPModel:
    def __init__(self, std: _Standardizer, weights: list, biases: list):
        self.std, self.weights, self.biases = std, weights, biases

    def decision_function(self, X) -> np.ndarray:
        h = self.std(np.asarray(X, dtype=float))
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        return (h @ self.weights[-1] + self.biases[-1]).ravel()

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))


def _fit_mlp(spec: ModelSpec, X: np.ndarray, t: np.ndarray) -> MLPModel:
    rng = np.random.default_rng(spec.seed)
    std = _Standardizer(X)
    Xs = std(X)
    n = Xs.shape[0]
    sizes = [Xs.shape[1], *spec.hidden_layers, 1]
    Ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    bs[-1][:] = np.log(t.mean() / (1 - t.mean()))
    params = Ws + bs
    m = [np.zeros_like(q) for q in params]
    v = [np.zeros_like(q) for q in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    L = len(Ws)
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch):
            idx = order[start : start + spec.batch]
            xb, tb = Xs[idx], t[idx]
            acts = [xb]
            for W, b in zip(Ws[:-1], bs[:-1]):
                acts.append(np.maximum(acts[-1] @ W + b, 0.0))
            out = (acts[-1] @ Ws[-1] + bs[-1]).ravel()
            delta = ((expit(out) - tb) / len(idx))[:, None]
            gW, gb = [None] * L, [None] * L
            for layer in range(L - 1, -1, -1):
                gW[layer] = acts[layer].T @ delta + spec.l2 * Ws[layer]
                gb[layer] = delta.sum(axis=0)
                if layer:
                    delta = (delta @ Ws[layer].T) * (acts[layer] > 0)
            step += 1
            for i, g in enumerate(gW + gb):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                mhat = m[i] / (1 - beta1**step)
                vhat = v[i] / (1 - beta2**step)
                params[i] -= spec.learning_rate * mhat / (np.sqrt(vhat) + eps)
    return MLPModel(std, params[:L], params[L:])


def fit(spec: ModelSpec, X, t):
    """Fit a binary classifier; the returned model exposes ``predict_proba``."""
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != t.size:
        raise ValueError(f"X has shape {X.shape} but there are {t.size} targets")
    if t.size < 2:
        raise ValueError("need at least two training rows")
    if np.unique(t).size < 2:
        raise ValueError("degenerate target: only one class present")
    if spec.kind == "logistic":
        return _fit_logistic(spec, X, t)
    return _fit_mlp(spec, X, t)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n1 = int((labels == 1).sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class CrossFitPredictions:
    fold_of: np.ndarray
    e_hat: np.ndarray
    g_hat: np.ndarray  # (n, 2): columns g(0, X), g(1, X)
    auc_propensity: tuple[float, ...]
    auc_outcome: tuple[float, ...]
    n_folds: int = field(default=0)

    def __post_init__(self):
        if not self.n_folds:
            object.__setattr__(self, "n_folds", int(self.fold_of.max()) + 1 if self.fold_of.size else 0)

    @property
    def g0(self) -> np.ndarray:
        return self.g_hat[:, 0]

    @property
    def g1(self) -> np.ndarray:
        return self.g_hat[:, 1]

    def diagnostics(self) -> dict:
        def mean_or_none(xs):
            xs = [a for a in xs if a == a]
            return float(np.mean(xs)) if xs else None

        return {
            "n_folds": self.n_folds,
            "auc_propensity": list(self.auc_propensity),
            "auc_outcome": [a if a == a else None for a in self.auc_outcome],
            "mean_auc_propensity": mean_or_none(self.auc_propensity),
            "mean_auc_outcome": mean_or_none(self.auc_outcome),
        }


def assign_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Uniform random partition into K folds whose sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K
    return fold_of


def crossfit(
    spec_e: ModelSpec,
    spec_g: ModelSpec,
    ds: ExperimentDataset,
    event: str,
    K: int = 3,
    seed: int = 0,
) -> CrossFitPredictions:
    """Out-of-fold propensity and outcome predictions for test-group users."""
    if K < 2:
        raise ValueError("cross-fitting needs K >= 2")
    if not (ds.z == 1).all():
        raise ValueError("crossfit expects test-group data only (all z = 1)")
    X = ds.feature_matrix()
    w = ds.w.astype(float)
    y = ds.outcome(event).astype(float)
    n = ds.n
    fold_of = assign_folds(n, K, seed)
    e_hat = np.empty(n)
    g_hat = np.empty((n, 2))
    auc_e, auc_g = [], []
    for k in range(K):
        held = fold_of == k
        train = ~held
        for part, label in ((train, "training folds"), (held, f"fold {k}")):
            if np.unique(w[part]).size < 2:
                raise ValueError(
                    f"{label} lack both exposure classes; use more data or fewer folds (K={K})"
                )
        if np.unique(y[train]).size < 2:
            raise ValueError(f"training folds for fold {k} have no variation in {event!r}; use more data or fewer folds")
        e_model = fit(spec_e, X[train], w[train])
        e_hat[held] = np.clip(e_model.predict_proba(X[held]), CLIP_LO, CLIP_HI)
        g_model = fit(spec_g, np.column_stack([X[train], w[train]]), y[train])
        Xh = X[held]
        g_hat[held, 0] = g_model.predict_proba(np.column_stack([Xh, np.zeros(len(Xh))]))
        g_hat[held, 1] = g_model.predict_proba(np.column_stack([Xh, np.ones(len(Xh))]))
        auc_e.append(auc(e_hat[held], w[held]))
        g_obs = np.where(w[held] == 1, g_hat[held, 1], g_hat[held, 0])
        auc_g.append(auc(g_obs, y[held]) if np.unique(y[held]).size == 2 else float("nan"))
    return CrossFitPredictions(fold_of, e_hat, g_hat, tuple(auc_e), tuple(auc_g), K)
