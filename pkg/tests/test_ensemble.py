import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdmeta.data import PredictionMatrix
from icdmeta.ensemble import (StackingOnTestWarning, assign_folds, evaluate_cv, fit_logistic,
                              sigmoid, stack, train_logistic)
from icdmeta.metrics import f1_scores


def newton_oracle(x, y, iters=100):
    """Damped Newton on the mean cross-entropy with an intercept column."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    beta = np.zeros(xa.shape[1])

    def obj(b):
        z = xa @ b
        return np.mean(np.logaddexp(0, z) - y * z)

    for _ in range(iters):
        p = 1 / (1 + np.exp(-(xa @ beta)))
        g = xa.T @ (p - y) / len(y)
        h = (xa * (p * (1 - p))[:, None]).T @ xa / len(y)
        step = np.linalg.solve(h, g)
        t = 1.0
        while obj(beta - t * step) > obj(beta) + 1e-4 * t * (g @ -step) and t > 1e-10:
            t *= 0.5
        beta = beta - t * step
        if np.max(np.abs(g)) < 1e-14:
            break
    return beta, obj(beta)


def preds(ids, probs, codes=("A", "B")):
    return PredictionMatrix(list(ids), codes, np.asarray(probs, dtype=float))


def test_sigmoid_zero():
    assert sigmoid(0.0) == 0.5


def test_fold_sizes_and_determinism():
    ids = [f"d{i}" for i in range(10)]
    folds = assign_folds(ids, 5, seed=3)
    assert sorted(np.bincount(folds).tolist()) == [2, 2, 2, 2, 2]
    shuffled = ids[::-1]
    again = assign_folds(shuffled, 5, seed=3)
    assert {i: f for i, f in zip(ids, folds)} == {i: f for i, f in zip(shuffled, again)}


def test_stack_single_model_features():
    p = preds(["b", "a", "c"], [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    data = stack([p], np.array([[0, 1], [1, 0], [1, 1]]), n_folds=3)
    assert data.ids == ["a", "b", "c"]
    assert data.features.shape == (2, 3, 1)
    assert data.features[:, :, 0].T.tolist() == [[0.3, 0.4], [0.1, 0.2], [0.5, 0.6]]
    assert data.labels.tolist() == [[1, 0], [0, 1], [1, 1]]


def test_stack_feature_modes_and_errors():
    ids = ["x", "y"]
    p1, p2 = preds(ids, [[0.1, 0.2], [0.3, 0.4]]), preds(ids, [[0.5, 0.6], [0.7, 0.8]])
    y = {"x": [0, 1], "y": [1, 0]}
    assert stack([p1, p2], y, n_folds=2).features.shape == (2, 2, 2)
    assert stack([p1, p2], y, n_folds=2, features="all_labels").features.shape == (2, 2, 4)
    with pytest.raises(ValueError):
        stack([p1, preds(["x", "z"], [[0.1, 0.2], [0.3, 0.4]])], y)
    with pytest.raises(ValueError):
        stack([p1, preds(ids, [[0.1, 0.2], [0.3, 0.4]], codes=("A", "C"))], y)
    with pytest.raises(ValueError):
        stack([], y)


def test_logistic_matches_newton_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    y = (rng.random(200) < sigmoid(x @ [1.5, -1.0] + 0.3)).astype(float)
    coef, icpt, done, iters, hist = fit_logistic(x[None], y[None], record=True)
    theta = np.append(coef[0], icpt[0])
    xa = np.hstack([x, np.ones((200, 1))])
    grad = xa.T @ (sigmoid(xa @ theta) - y) / 200
    assert np.max(np.abs(grad)) < 1e-8 and done[0]
    _, oracle = newton_oracle(x, y)
    assert hist[-1][0] == pytest.approx(oracle, abs=1e-6)
    h = np.array([r[0] for r in hist])
    assert np.all(np.diff(h) <= 1e-15)


def test_logistic_degenerate_all_zero():
    x = np.random.default_rng(1).random((50, 2))
    coef, icpt, *_ = fit_logistic(x[None], np.zeros((1, 50)), max_iters=10_000)
    p = sigmoid(x @ coef[0] + icpt[0])
    assert icpt[0] < -4 and np.all(p < 0.01)


def test_monotone_single_feature():
    rng = np.random.default_rng(2)
    x = rng.random(100)
    y = (rng.random(100) < x).astype(float)
    coef, icpt, *_ = fit_logistic(x[None, :, None], y[None])
    assert coef[0, 0] > 0
    grid = np.linspace(0, 1, 11)
    assert np.all(np.diff(sigmoid(grid * coef[0, 0] + icpt[0])) > 0)


def _dataset(n=60, labels=3, seed=0, perfect=False):
    rng = np.random.default_rng(seed)
    y = (rng.random((n, labels)) < 0.4).astype(int)
    ids = [f"a{i:03d}" for i in range(n)]
    base = y.astype(float) if perfect else np.clip(y * 0.6 + rng.random((n, labels)) * 0.4, 0, 1)
    codes = tuple(f"C{j}" for j in range(labels))
    return ids, y, PredictionMatrix(ids, codes, base)


def test_no_fold_leakage_structural():
    ids, y, p = _dataset()
    data = stack([p], y, n_folds=5)
    for f in range(5):
        model = train_logistic(data, f)
        held = {i for i, g in zip(data.ids, data.folds) if g == f}
        assert held and not held & set(model.train_ids)
        assert len(model.train_ids) + len(held) == len(ids)


def test_cv_report_format_and_warning():
    ids, y, p = _dataset()
    data = stack([p, p], y, n_folds=5, sources=["m1", "m2"])
    with pytest.warns(StackingOnTestWarning):
        rep = evaluate_cv(data, k=2)
    assert len(rep["folds"]) == 5
    for metric in ("micro_f1", "macro_f1", "micro_auc", "macro_auc", "precision_at_k"):
        mean, std = rep["mean"][metric], rep["std"][metric]
        assert rep["formatted"][metric] == f"{mean:.4f} ± {std:.4f}"
        assert mean == pytest.approx(np.mean([f[metric] for f in rep["folds"]]))
    assert set(rep["base_models"]) == {"m1", "m2"}


def test_cv_perfect_base_model():
    ids, y, p = _dataset(perfect=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StackingOnTestWarning)
        rep = evaluate_cv(stack([p], y, n_folds=5), k=2)
    assert rep["mean"]["micro_f1"] == 1.0 and rep["std"]["micro_f1"] == 0.0


def test_cv_constant_half_probabilities():
    ids = [f"d{i}" for i in range(10)]
    y = np.zeros((10, 2), dtype=int)
    y[:3, 0] = 1
    y[5:, 1] = 1
    p = PredictionMatrix(ids, ("A", "B"), np.full((10, 2), 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StackingOnTestWarning)
        data = stack([p], y, n_folds=5)
        rep = evaluate_cv(data, k=1)
    # the meta-model can only learn a per-label intercept from the training folds
    expected = []
    for f in range(5):
        held = data.folds == f
        model = train_logistic(data, f)
        probs = model.predict_proba(data.features[:, held])
        expected.append(f1_scores(probs, data.labels[held])[0])
    assert rep["mean"]["micro_f1"] == pytest.approx(np.mean(expected))
    # label B (positives 5/10) keeps an intercept near 0 -> mostly >= or < 0.5; label A is all-negative
    for f in range(5):
        model = train_logistic(data, f)
        assert model.predict_proba(data.features[:, data.folds == f])[:, 0].max() < 0.5


def test_cv_order_independent():
    ids, y, p = _dataset(seed=4)
    perm = np.random.default_rng(0).permutation(len(ids))
    q = PredictionMatrix([ids[i] for i in perm], p.codes, p.probs[perm])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StackingOnTestWarning)
        a = evaluate_cv(stack([p], y, n_folds=5), k=2)
        b = evaluate_cv(stack([q], y[perm], n_folds=5), k=2)
    assert a["folds"] == b["folds"]


def test_single_calibrated_model_keeps_auc():
    rng = np.random.default_rng(7)
    n = 400
    score = rng.random((n, 2))
    y = (rng.random((n, 2)) < score).astype(int)
    ids = [f"i{i}" for i in range(n)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StackingOnTestWarning)
        rep = evaluate_cv(stack([PredictionMatrix(ids, ("A", "B"), score)], y, n_folds=5), k=1)
    base = rep["base_models"]["model0"]["mean"]["macro_auc"]
    assert rep["mean"]["macro_auc"] >= base - 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(2, 6), st.integers(0, 100))
def test_folds_partition(n, k, seed):
    folds = assign_folds([f"x{i}" for i in range(n)], k, seed)
    counts = np.bincount(folds, minlength=k)
    assert counts.sum() == n and counts.max() - counts.min() <= 1
