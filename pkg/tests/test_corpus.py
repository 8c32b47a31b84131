import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdmeta.corpus import (SgnsConfig, SyntheticSpec, generate_synthetic, icd10_targets, icd_table,
                            map_icd9_to_icd10, preprocess, read_bags, read_events, train_sgns,
                            write_bags, write_events, write_synthetic)
from icdmeta.metrics import f1_scores


def test_preprocess_examples():
    assert preprocess("BP 120/80 stable.") == ["bp", "stable"]
    assert preprocess("") == []
    assert preprocess("Pt had COVID19; 3x daily, -- ok") == ["pt", "had", "covid19", "3x", "daily",
                                                              "ok"]


def test_preprocess_idempotent_on_synthetic_sample():
    data = generate_synthetic(SyntheticSpec(n_train=600, n_dev=200, n_test=200, seed=5))
    assert len(data.records) == 1000
    for r in data.records:
        once = preprocess(r["text"])
        assert preprocess(" ".join(once)) == once


@settings(max_examples=200)
@given(st.text())
def test_preprocess_idempotent_on_arbitrary_text(text):
    once = preprocess(text)
    assert preprocess(" ".join(once)) == once


def test_documents_match_preprocessed_text():
    data = generate_synthetic(SyntheticSpec(n_train=30, n_dev=5, n_test=5, seed=2))
    by_id = {d.id: d.tokens for s in data.splits.values() for d in s.documents}
    for r in data.records:
        assert preprocess(r["text"]) == by_id[r["id"]]


def _cos(e, a, b):
    u, v = e.vector(a), e.vector(b)
    return float(u @ v / np.linalg.norm(u) / np.linalg.norm(v))


def test_sgns_shape_and_cooccurrence():
    rng = np.random.default_rng(0)
    filler = [f"f{i}" for i in range(30)]
    # alpha and beta only ever appear together, so their contexts coincide
    corpus = [["alpha", "beta", "alpha", "beta"] for _ in range(200)]
    corpus += [[str(w) for w in rng.choice(filler, 8)] for _ in range(200)]
    emb = train_sgns(corpus, SgnsConfig(dim=16, window=2, epochs=15, seed=0))
    assert emb.matrix.shape == (32, 16) and np.all(np.isfinite(emb.matrix))
    assert _cos(emb, "alpha", "beta") > 0.9


def planted_topics(seed=0, n_topics=8, words=10, n_sent=2000):
    rng = np.random.default_rng(seed)
    topics = [[f"t{k}w{i}" for i in range(words)] for k in range(n_topics)]
    corpus = [[str(w) for w in rng.choice(topics[rng.integers(n_topics)], 10)]
              for _ in range(n_sent)]
    return corpus, topics


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sgns_topic_separation_and_loss_decrease(seed):
    # big enough that the per-epoch decrease dominates negative-sampling noise
    corpus, topics = planted_topics(seed)
    history = []
    emb = train_sgns(corpus, SgnsConfig(dim=20, window=3, epochs=5, seed=seed), history)
    assert len(history) == 5
    assert all(b <= a for a, b in zip(history, history[1:]))
    related = [_cos(emb, a, b) for t in topics for i, a in enumerate(t) for b in t[i + 1:]]
    unrelated = [_cos(emb, a, b) for i, t in enumerate(topics) for u in topics[i + 1:]
                 for a in t for b in u]
    assert np.mean(unrelated) < np.mean(related)


def test_sgns_deterministic_and_errors():
    corpus, _ = planted_topics(1, n_sent=200)
    cfg = SgnsConfig(dim=8, epochs=2, seed=3)
    assert np.array_equal(train_sgns(corpus, cfg).matrix, train_sgns(corpus, cfg).matrix)
    with pytest.raises(ValueError, match="empty vocabulary"):
        train_sgns([["a"]], SgnsConfig(dim=4, min_count=2))
    with pytest.raises(ValueError):
        SgnsConfig(dim=0)


def test_trigger_rule_recovers_labels():
    spec = SyntheticSpec(trigger_prob=1.0, n_train=200, n_dev=50, n_test=50, seed=4)
    data = generate_synthetic(spec)
    codes = data.labels.codes
    for split in data.splits.values():
        rule = np.array([[any(t in doc.tokens for t in data.triggers[c]) for c in codes]
                         for doc in split.documents], dtype=float)
        micro, macro = f1_scores(rule, split.label_matrix())
        assert micro == 1.0


def test_label_marginals():
    spec = SyntheticSpec(n_train=10_000, n_dev=0, n_test=0, doc_length=1, n_items=0,
                         n_source_b_docs=0, seed=7)
    y = generate_synthetic(spec).splits["train"].label_matrix()
    assert np.all(np.abs(y.mean(axis=0) - spec.label_rate) <= 0.02)


def test_splits_disjoint_and_every_label_has_triggers():
    data = generate_synthetic(SyntheticSpec(n_train=40, n_dev=10, n_test=10))
    ids = [set(s.ids) for s in data.splits.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert all(len(t) >= 1 for t in data.triggers.values())
    a = {t for s in data.source_a for t in s}
    b = {t for s in data.source_b for t in s}
    assert a & b and a - b and b - a


def test_synthetic_files_are_deterministic(tmp_path):
    spec = SyntheticSpec(n_train=30, n_dev=10, n_test=10, n_source_b_docs=20, seed=9)
    p1 = write_synthetic(generate_synthetic(spec), tmp_path / "a")
    p2 = write_synthetic(generate_synthetic(spec), tmp_path / "b")
    for name in p1:
        assert open(p1[name], "rb").read() == open(p2[name], "rb").read(), name
    other = write_synthetic(generate_synthetic(SyntheticSpec(n_train=30, n_dev=10, n_test=10,
                                                             n_source_b_docs=20, seed=10)),
                            tmp_path / "c")
    assert open(other["train.jsonl"], "rb").read() != open(p1["train.jsonl"], "rb").read()


def test_event_and_bag_round_trip(tmp_path):
    events = [("a1", "i1", 0.1), ("a1", "i2", -3.25e-7), ("a2", "i1", 1 / 3)]
    write_events(events, tmp_path / "e.csv")
    assert read_events(tmp_path / "e.csv") == events
    bags = {"a1": ["x", "y", "x"], "a2": []}
    write_bags(bags, tmp_path / "b.csv")
    assert read_bags(tmp_path / "b.csv") == bags


def test_icd_mapping():
    assert map_icd9_to_icd10("4019") == "I10"
    assert map_icd9_to_icd10("73300") == "M81.0"
    assert map_icd9_to_icd10("99999") is None
    assert map_icd9_to_icd10("99592") == "R65.20"
    table = icd_table()
    assert len(table) == 44
    assert len({icd10 for _, icd10 in table}) == 32
    assert len(icd10_targets()) == 32
