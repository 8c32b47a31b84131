import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdmeta.embed_core import (EmbeddingFormatError, EmbeddingSet, Vocabulary,
                                common_vocabulary, format_embeddings, from_pairs,
                                load_embeddings, save_embeddings)

from conftest import random_set


def test_single_row_parse(tmp_path):
    p = tmp_path / "a.vec"
    p.write_text("1 2\na 0.5 -0.5\n")
    emb = load_embeddings(p)
    assert emb.vocab.tokens == ("a",)
    assert emb.matrix.tolist() == [[0.5, -0.5]]
    assert emb.source_id == "a"


@pytest.mark.parametrize("text", [
    "2 2\na 1 0\na 0 1\n",          # duplicate token
    "1 2 3\na 1 0\n",               # header arity
    "x 2\na 1 0\n",                 # header not numeric
    "1 2\na 1\n",                   # row arity
    "1 2\na 1 nan\n",               # non-finite
    "1 2\na 1 inf\n",
    "2 2\na 1 0\n",                 # too few rows
    "1 2\na 1 0\nb 0 1\n",          # too many rows
    "1 2\na 1 zz\n",
])
def test_malformed_files_rejected(tmp_path, text):
    p = tmp_path / "bad.vec"
    p.write_text(text)
    with pytest.raises(EmbeddingFormatError):
        load_embeddings(p)


def test_save_header_and_empty(tmp_path):
    emb = EmbeddingSet(["a"], [[0.5, -0.5]])
    assert format_embeddings(emb).splitlines()[0] == "1 2"
    empty = EmbeddingSet([], np.zeros((0, 3)))
    save_embeddings(empty, tmp_path / "e.vec")
    assert (tmp_path / "e.vec").read_text() == "0 3\n"
    back = load_embeddings(tmp_path / "e.vec")
    assert len(back) == 0 and back.dim == 3


def test_round_trip_50x200(tmp_path):
    emb = random_set(50, 200, seed=3)
    save_embeddings(emb, tmp_path / "r.vec")
    back = load_embeddings(tmp_path / "r.vec")
    assert back.vocab == emb.vocab
    assert np.array_equal(back.matrix, emb.matrix)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12), st.integers(1, 4))
def test_round_trip_exact_on_arbitrary_floats(tmp_path_factory, values, dim):
    rows = max(1, len(values) // dim)
    m = np.resize(np.array(values), (rows, dim))
    emb = EmbeddingSet([f"t{i}" for i in range(rows)], m)
    p = tmp_path_factory.mktemp("rt") / "x.vec"
    save_embeddings(emb, p)
    assert np.array_equal(load_embeddings(p).matrix, emb.matrix)


def test_invariants_enforced():
    with pytest.raises(EmbeddingFormatError):
        Vocabulary(("a", "a"))
    with pytest.raises(EmbeddingFormatError):
        Vocabulary(("a b",))
    with pytest.raises(EmbeddingFormatError):
        Vocabulary(("",))
    with pytest.raises(EmbeddingFormatError):
        EmbeddingSet(["a", "b"], [[1.0, 2.0]])
    with pytest.raises(EmbeddingFormatError):
        EmbeddingSet(["a"], [[np.nan]])
    with pytest.raises(EmbeddingFormatError):
        EmbeddingSet(["a"], np.zeros((1, 0)))
    emb = EmbeddingSet(["a"], [[1.0]])
    with pytest.raises(ValueError):
        emb.matrix[0, 0] = 2.0


def test_common_vocabulary_cases():
    a = from_pairs([("a", [1]), ("b", [2]), ("c", [3])])
    b = from_pairs([("d", [1]), ("c", [2]), ("b", [3])])
    assert common_vocabulary(a, b).tokens == ("b", "c")
    assert common_vocabulary(a, from_pairs([("z", [0])])).tokens == ()
    assert common_vocabulary(a, a) == a.vocab


@given(st.sets(st.sampled_from("abcdefgh")), st.sets(st.sampled_from("abcdefgh")))
def test_common_vocabulary_is_ordered_intersection(sa, sb):
    a = from_pairs([(t, [0.0]) for t in sorted(sa, reverse=True)])
    b = from_pairs([(t, [0.0]) for t in sorted(sb)])
    got = common_vocabulary(a, b).tokens
    assert set(got) == sa & sb
    assert list(got) == [t for t in a.vocab.tokens if t in sb]


def test_restrict_reorders_rows():
    emb = from_pairs([("a", [1.0]), ("b", [2.0]), ("c", [3.0])])
    sub = emb.restrict(["c", "a"])
    assert sub.matrix[:, 0].tolist() == [3.0, 1.0]
    with pytest.raises(KeyError):
        emb.restrict(["zz"])
