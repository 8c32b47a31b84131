import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdmeta import caml
from icdmeta.caml import (EarlyStopper, TrainConfig, TrainingDivergedError, attend, encode,
                          init_model, load_model, loss, loss_and_grad, predict, save_model)
from icdmeta.corpus import SyntheticSpec, generate_synthetic
from icdmeta.data import LabelSpace
from icdmeta.embed_core import EmbeddingSet


def tiny_model(seed=0, k=2, d_e=3, d_c=2, n_labels=3, vocab=5):
    rng = np.random.default_rng(seed)
    emb = EmbeddingSet([f"t{i}" for i in range(vocab)], rng.normal(size=(vocab, d_e)))
    model = init_model(emb, LabelSpace(tuple(f"L{i}" for i in range(n_labels))), k, d_c, seed,
                       dropout=0.0)
    # non-zero biases and OOV row so every parameter is exercised
    model.params["conv_b"] = rng.normal(size=d_c)
    model.params["output_b"] = rng.normal(size=n_labels)
    model.params["embeddings"][-1] = rng.normal(size=d_e)
    return model


def naive_encode(model, tokens):
    p = model.params
    k, d_e, d_c = p["conv_w"].shape
    ids = model.token_ids(tokens)
    left = (k - 1) // 2
    out = np.zeros((len(ids), d_c))
    for i in range(len(ids)):
        for c in range(d_c):
            acc = p["conv_b"][c]
            for j in range(k):
                pos = i + j - left
                if 0 <= pos < len(ids):
                    for e in range(d_e):
                        acc += p["conv_w"][j, e, c] * p["embeddings"][ids[pos], e]
            out[i, c] = np.tanh(acc)
    return out


def naive_predict(model, tokens):
    p = model.params
    h = naive_encode(model, tokens)
    probs = []
    for l in range(len(model.labels)):
        scores = [sum(p["attention"][l, c] * h[n, c] for c in range(h.shape[1]))
                  for n in range(len(h))]
        m = max(scores)
        w = [np.exp(s - m) for s in scores]
        w = [x / sum(w) for x in w]
        v = [sum(w[n] * h[n, c] for n in range(len(h))) for c in range(h.shape[1])]
        z = sum(p["output_w"][l, c] * v[c] for c in range(len(v))) + p["output_b"][l]
        probs.append(1 / (1 + np.exp(-z)))
    return np.array(probs)


DOC = ["t0", "t3", "t1", "unk", "t4", "t2", "t0"]


def test_encode_zero_model():
    m = tiny_model()
    for name in m.params:
        m.params[name] = np.zeros_like(m.params[name])
    assert np.array_equal(encode(m, DOC), np.zeros((len(DOC), 2)))


def test_encode_single_token_padding():
    m = tiny_model(k=4)
    h = encode(m, ["t1"])
    assert h.shape == (1, 2)
    np.testing.assert_allclose(h, naive_encode(m, ["t1"]), atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_encode_matches_naive_convolution(k):
    m = tiny_model(seed=k, k=k)
    np.testing.assert_allclose(encode(m, DOC), naive_encode(m, DOC), atol=1e-12)


def test_attend_cases():
    m = tiny_model()
    h = encode(m, DOC)
    m.params["attention"][:] = 0
    a, v = attend(m, h)
    np.testing.assert_allclose(a, 1 / len(DOC), atol=1e-15)
    m = tiny_model(seed=3)
    a, v = attend(m, h[:1])
    assert np.array_equal(a, np.ones((3, 1)))
    np.testing.assert_allclose(v, np.repeat(h[:1], 3, axis=0), atol=1e-15)
    a, v = attend(m, h)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    explicit = np.array([sum(a[l, n] * h[n] for n in range(len(h))) for l in range(3)])
    np.testing.assert_allclose(v, explicit, atol=1e-12)


def test_predict_cases():
    m = tiny_model()
    m.params["output_w"][:] = 0
    m.params["output_b"][:] = 0
    assert np.array_equal(predict(m, DOC), np.full(3, 0.5))
    m.params["output_b"][:] = 20
    assert np.all(predict(m, DOC) > 1 - 1e-8)
    m = tiny_model(seed=5)
    np.testing.assert_allclose(predict(m, DOC), naive_predict(m, DOC), atol=1e-12)


def test_predict_label_permutation_and_monotone_bias():
    m = tiny_model(seed=6)
    base = predict(m, DOC)
    perm = [2, 0, 1]
    q = copy.deepcopy(m)
    for name in ("attention", "output_w", "output_b"):
        q.params[name] = m.params[name][perm]
    np.testing.assert_allclose(predict(q, DOC), base[perm], atol=1e-15)
    m.params["output_b"][1] += 0.5
    after = predict(m, DOC)
    assert after[1] > base[1] and after[0] == base[0]


def test_loss_cases():
    y = np.array([1, 0, 1, 0])
    assert loss(y.astype(float), y) <= 4 * 1e-11
    assert loss(np.full(4, 0.5), y) == pytest.approx(4 * np.log(2), rel=1e-15)
    rng = np.random.default_rng(0)
    p, t = rng.random(6), rng.integers(0, 2, 6)
    scalar = 0.0
    for pi, ti in zip(p, t):
        scalar -= np.log(pi) if ti else np.log(1 - pi)
    assert loss(p, t) == pytest.approx(scalar, rel=1e-13)
    with pytest.raises(ValueError):
        loss(np.zeros(2), np.zeros(3))


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


@pytest.mark.parametrize("with_dropout", [False, True])
def test_full_gradient_finite_differences(with_dropout):
    m = tiny_model(seed=11)
    docs = [m.token_ids(DOC), m.token_ids(["t2", "t4", "zz"])]
    ys = [np.array([1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])]
    masks = None
    if with_dropout:
        rng = np.random.default_rng(0)
        masks = [(rng.random((len(d), 2)) < 0.5) / 0.5 for d in docs]
    _, grads = loss_and_grad(m, docs, ys, masks)
    eps = 1e-5
    for name, value in m.params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            up, _ = loss_and_grad(m, docs, ys, masks)
            value[idx] = orig - eps
            down, _ = loss_and_grad(m, docs, ys, masks)
            value[idx] = orig
            fd[idx] = (up - down) / (2 * eps)
        assert _relative_error(fd, grads[name]) < 1e-4, name
        np.testing.assert_allclose(grads[name], fd, atol=1e-7)


def test_logit_loss_agrees_with_probability_loss():
    m = tiny_model(seed=2)
    y = np.array([1.0, 0.0, 1.0])
    value, _ = loss_and_grad(m, [m.token_ids(DOC)], [y])
    assert value == pytest.approx(loss(predict(m, DOC), y), rel=1e-12)


def test_early_stopper_contract():
    scores = [0.1, 0.4, 0.6, 0.55, 0.6, 0.5, 0.9]
    s = EarlyStopper(3)
    stopped = None
    for epoch, sc in enumerate(scores, 1):
        if s.update(epoch, sc):
            stopped = epoch
            break
    assert s.best_epoch == 3 and stopped == 6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 5))
def test_early_stopper_halts_within_patience(scores, patience):
    s = EarlyStopper(patience)
    for epoch, sc in enumerate(scores, 1):
        if s.update(epoch, sc):
            assert epoch - s.best_epoch == patience
            return
    assert len(scores) - s.best_epoch < patience


def small_corpus(seed=0, n_train=60):
    spec = SyntheticSpec(n_labels=4, n_train=n_train, n_dev=20, n_test=10, background_vocab=30,
                         exclusive_vocab=5, doc_length=12, n_source_b_docs=10, seed=seed)
    return generate_synthetic(spec)


def _emb_for(data, dim=6, seed=0):
    vocab = sorted({t for s in data.source_a for t in s})
    return EmbeddingSet(vocab, np.random.default_rng(seed).normal(size=(len(vocab), dim)) * 0.3)


def test_train_is_bitwise_reproducible_and_returns_best():
    data = small_corpus()
    emb = _emb_for(data)
    cfg = TrainConfig(learning_rate=0.01, max_epochs=4, patience=10, filter_maps=8, seed=3)
    runs = []
    for _ in range(2):
        m = init_model(emb, data.labels, 4, 8, seed=3)
        runs.append(caml.train(m, data.splits["train"], data.splits["dev"], cfg))
    (m1, log1), (m2, log2) = runs
    for name in m1.params:
        assert np.array_equal(m1.params[name], m2.params[name])
    assert log1.epochs == log2.epochs
    best = max(e["dev_micro_f1"] for e in log1.epochs)
    assert log1.best_dev_micro_f1 == best
    from icdmeta.metrics import f1_scores
    dev = data.splits["dev"]
    got, _ = f1_scores(caml.predict_matrix(m1, dev), dev.label_matrix())
    assert got == best


def test_frozen_embeddings_untouched():
    data = small_corpus(seed=1)
    emb = _emb_for(data)
    m = init_model(emb, data.labels, 4, 8)
    cfg = TrainConfig(learning_rate=0.01, max_epochs=2, filter_maps=8, freeze_embeddings=True)
    trained, _ = caml.train(m, data.splits["train"], data.splits["dev"], cfg)
    assert np.array_equal(trained.params["embeddings"], m.params["embeddings"])
    assert not np.array_equal(trained.params["conv_w"], m.params["conv_w"])


def test_divergence_is_reported(monkeypatch):
    data = small_corpus(seed=2, n_train=10)
    m = init_model(_emb_for(data), data.labels, 4, 8)
    monkeypatch.setattr(caml, "loss_and_grad",
                        lambda *a, **k: (float("nan"), {n: np.zeros_like(v)
                                                       for n, v in m.params.items()}))
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        caml.train(m, data.splits["train"], data.splits["dev"], TrainConfig(max_epochs=1))


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(seed=9)
    m.max_length = 77
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.vocab == m.vocab and back.labels.codes == m.labels.codes
    assert back.max_length == 77 and back.dropout == m.dropout
    for name in m.params:
        assert np.array_equal(back.params[name], m.params[name])
    assert np.array_equal(predict(back, DOC), predict(m, DOC))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTCAML\0" + raw[8:])
    with pytest.raises(ValueError, match="not a CAML"):
        load_model(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_model(tmp_path / "short.bin")


def test_oov_and_truncation():
    m = tiny_model()
    assert m.token_ids(["nope"]).tolist() == [m.oov_index]
    assert m.token_ids([]).tolist() == [m.oov_index]
    m.max_length = 3
    assert len(m.token_ids(DOC)) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
