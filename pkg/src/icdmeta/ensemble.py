"""Stacked logistic-regression meta-classifier with k-fold evaluation.

Every base model contributes one probability per (document, label).  By
default the meta-classifier for label l sees only the base probabilities
for label l (``features="same_label"``); ``features="all_labels"`` feeds it
every base probability instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PredictionMatrix
from .metrics import evaluate

MAX_ITERS = 10_000
GRAD_TOL = 1e-8
STEP = 0.1


class StackingOnTestWarning(UserWarning):
    """Cross-validation runs on the split the base models were evaluated on."""


@dataclass
class StackedDataset:
    ids: list
    codes: tuple
    features: np.ndarray     # (L, n, p)
    labels: np.ndarray       # (n, L)
    folds: np.ndarray        # (n,)
    sources: list = field(default_factory=list)
    base_probs: np.ndarray | None = None   # (m, n, L)

    @property
    def n_folds(self) -> int:
        return int(self.folds.max()) + 1 if len(self.folds) else 0


@dataclass
class LogisticModel:
    coef: np.ndarray         # (L, p)
    intercept: np.ndarray    # (L,)
    train_ids: list = field(default_factory=list)
    converged: np.ndarray | None = None
    iterations: np.ndarray | None = None
    history: list = field(default_factory=list)   # objective per label after each iteration

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """``features`` is (L, n, p); returns (n, L)."""
        z = np.einsum("lnp,lp->ln", features, self.coef) + self.intercept[:, None]
        return sigmoid(z).T


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def assign_folds(ids, n_folds: int = 5, seed: int = 0) -> np.ndarray:
    """Seeded shuffle of the sorted ids dealt round-robin into folds."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = np.empty(len(ids), dtype=np.int64)
    for rank, p in enumerate(perm):
        folds[order[p]] = rank % n_folds
    return folds


def stack(predictions, labels, n_folds: int = 5, seed: int = 0, features: str = "same_label",
          sources=None) -> StackedDataset:
    """Align base predictions on a shared id set and build per-label features.

    ``labels`` is either an (n, L) matrix in the first prediction's id order
    or a mapping ``id -> label bit vector``.
    """
    predictions = list(predictions)
    if not predictions:
        raise ValueError("need at least one prediction matrix")
    ref = predictions[0]
    ref_ids = set(ref.ids)
    for p in predictions[1:]:
        if set(p.ids) != ref_ids:
            raise ValueError("base models were not evaluated on the same id set")
        if tuple(p.codes) != tuple(ref.codes):
            raise ValueError("base models disagree on label codes")
    ids = sorted(ref.ids)
    if isinstance(labels, dict):
        y = np.stack([np.asarray(labels[i]) for i in ids]) if ids else np.zeros((0, len(ref.codes)))
    else:
        y = np.asarray(labels)
        pos = {d: i for i, d in enumerate(ref.ids)}
        y = y[[pos[d] for d in ids]]
    base = np.stack([p.reindex(ids).probs for p in predictions])      # (m, n, L)
    m, n, n_labels = base.shape
    if features == "same_label":
        x = base.transpose(2, 1, 0)                                   # (L, n, m)
    elif features == "all_labels":
        flat = base.transpose(1, 0, 2).reshape(n, m * n_labels)
        x = np.broadcast_to(flat, (n_labels, n, m * n_labels)).copy()
    else:
        raise ValueError(f"unknown feature mode {features!r}")
    return StackedDataset(ids, tuple(ref.codes), x, y.astype(np.int8),
                          assign_folds(ids, n_folds, seed),
                          list(sources) if sources else [f"model{i}" for i in range(m)], base)


def _objective(xa, y, theta):
    z = np.einsum("lnp,lp->ln", xa, theta)
    return np.mean(np.logaddexp(0.0, z) - y * z, axis=1), z


def fit_logistic(x: np.ndarray, y: np.ndarray, max_iters: int = MAX_ITERS,
                 grad_tol: float = GRAD_TOL, step: float = STEP, record: bool = False):
    """Full-batch gradient descent on the mean cross-entropy, one problem per label.

    ``x`` is (L, n, p) and ``y`` is (L, n).  A step that raises a label's
    objective is rejected and that label's step size halved.
    """
    n_labels, n, p = x.shape
    xa = np.concatenate([x, np.ones((n_labels, n, 1))], axis=2)
    y = np.asarray(y, dtype=np.float64)
    theta = np.zeros((n_labels, p + 1))
    steps = np.full(n_labels, step)
    obj, z = _objective(xa, y, theta)
    grad = np.einsum("lnp,ln->lp", xa, sigmoid(z) - y) / max(n, 1)
    done = np.abs(grad).max(axis=1) < grad_tol
    iters = np.zeros(n_labels, dtype=np.int64)
    history = [obj.copy()] if record else []
    for _ in range(max_iters):
        live = ~done & (steps > 1e-300)
        if not np.any(live):
            break
        cand = theta - steps[:, None] * grad
        cobj, cz = _objective(xa, y, cand)
        g_new = np.einsum("lnp,ln->lp", xa, sigmoid(cz) - y) / max(n, 1)
        # near the optimum the decrease drops below the objective's rounding
        # error; a step inside that noise band is kept if it shrinks the gradient
        noise = 8 * np.finfo(np.float64).eps * np.maximum(np.abs(obj), 1.0)
        flat = (np.abs(cobj - obj) <= noise) & \
            (np.abs(g_new).max(axis=1) < np.abs(grad).max(axis=1))
        ok = live & ((cobj <= obj) | flat)
        theta[ok] = cand[ok]
        obj[ok] = cobj[ok]
        grad[ok] = g_new[ok]
        steps[live & ~ok] *= 0.5
        iters[live] += 1
        done |= np.abs(grad).max(axis=1) < grad_tol
        if record:
            history.append(obj.copy())
    return theta[:, :-1], theta[:, -1], done, iters, history


def train_logistic(data: StackedDataset, fold: int, record: bool = False, **kw) -> LogisticModel:
    if not 0 <= fold < data.n_folds:
        raise ValueError(f"fold {fold} out of range")
    train = data.folds != fold
    coef, icpt, done, iters, hist = fit_logistic(data.features[:, train], data.labels[train].T,
                                                 record=record, **kw)
    return LogisticModel(coef, icpt, [i for i, t in zip(data.ids, train) if t], done, iters, hist)


def _nan_stat(fn, values):
    values = np.asarray(values, dtype=np.float64)
    return float(fn(values)) if np.any(~np.isnan(values)) else float("nan")


def _summary(rows: list) -> tuple:
    keys = [k for k in rows[0] if isinstance(rows[0][k], float)]
    # folds too small to define AUC contribute NaN and are left out
    mean = {k: _nan_stat(np.nanmean, [r[k] for r in rows]) for k in keys}
    std = {k: _nan_stat(np.nanstd, [r[k] for r in rows]) for k in keys}
    return mean, std


def evaluate_cv(data: StackedDataset, k: int = 8, threshold: float = 0.5) -> dict:
    """Train on all folds but one, score the held-out fold, aggregate mean and std.

    Base-model metrics on the same held-out folds are reported alongside.
    """
    warnings.warn("stacked meta-classifier is cross-validated on the base models' test split",
                  StackingOnTestWarning, stacklevel=2)
    fold_reports, base_reports = [], {name: [] for name in data.sources}
    oof = np.zeros(data.labels.shape)
    for f in range(data.n_folds):
        model = train_logistic(data, f)
        held = data.folds == f
        if set(model.train_ids) & {i for i, h in zip(data.ids, held) if h}:
            raise AssertionError("test fold leaked into training data")
        probs = model.predict_proba(data.features[:, held])
        oof[held] = probs
        fold_reports.append(evaluate(probs, data.labels[held], k, threshold, "nan").to_dict())
        for name, bp in zip(data.sources, data.base_probs):
            rep = evaluate(bp[held], data.labels[held], k, threshold, "nan")
            base_reports[name].append(rep.to_dict())
    mean, std = _summary(fold_reports)
    out = {
        "folds": fold_reports,
        "mean": mean,
        "std": std,
        "formatted": {m: f"{mean[m]:.4f} ± {std[m]:.4f}" for m in mean},
        "base_models": {},
        "n_folds": data.n_folds,
        "sources": list(data.sources),
    }
    for name, rows in base_reports.items():
        bm, bs = _summary(rows)
        out["base_models"][name] = {"mean": bm, "std": bs}
    out["out_of_fold"] = PredictionMatrix(data.ids, data.codes, oof)
    return out
