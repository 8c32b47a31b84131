"""Text preprocessing, a small skip-gram trainer, synthetic data and the ICD map.

The synthetic generator stands in for the restricted clinical data: every
label has trigger tokens that mark it in the text, a second "external"
corpus shares part of the vocabulary, and the structured / bag-of-terms
side channels are correlated with the labels.
"""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import Document, LabeledDocumentSet, LabelSpace, write_codes, write_jsonl, \
    write_label_csv
from .embed_core import EmbeddingSet, Vocabulary

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def preprocess(text: str) -> list:
    """Lowercase and keep alphanumeric runs that contain at least one letter."""
    return [t for t in _WORD.findall(text.lower()) if any(c.isalpha() for c in t)]


# ICD-9 -> ICD-10 -----------------------------------------------------------

def icd_table() -> list:
    """The (icd9, icd10) rows in table order, duplicates included."""
    text = resources.files("icdmeta").joinpath("data/icd9_to_icd10.csv").read_text("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    return [(r[0], r[1]) for r in rows[1:] if r]


def map_icd9_to_icd10(code: str):
    """First listed ICD-10 target for ``code`` or None when unmapped."""
    for icd9, icd10 in icd_table():
        if icd9 == code:
            return icd10
    return None


def icd10_targets() -> list:
    seen = []
    for _, icd10 in icd_table():
        if icd10 not in seen:
            seen.append(icd10)
    return seen


# skip-gram with negative sampling ------------------------------------------

@dataclass
class SgnsConfig:
    dim: int = 200
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    min_count: int = 1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0 or self.window < 1 or self.negatives < 1 or self.epochs < 1:
            raise ValueError("dim > 0, window >= 1, negatives >= 1 and epochs >= 1 required")


def _sgns_vocab(corpus, min_count):
    counts: dict = {}
    for sent in corpus:
        for t in sent:
            counts[t] = counts.get(t, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return kept, np.array([counts[t] for t in kept], dtype=np.float64)


def _pairs(sentences, window):
    centers, contexts = [], []
    for ids in sentences:
        n = len(ids)
        for off in range(1, window + 1):
            if off >= n:
                break
            centers += [ids[:-off], ids[off:]]
            contexts += [ids[off:], ids[:-off]]
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def train_sgns(corpus, cfg: SgnsConfig = SgnsConfig(), history: list | None = None,
               source_id: str = "sgns") -> EmbeddingSet:
    """Skip-gram with negative sampling over tokenised sentences.

    Pairs are visited in a seeded shuffled order in minibatches; negatives
    come from the unigram distribution raised to 0.75; the learning rate
    decays linearly to ``min_learning_rate``.  Mean per-pair loss of each
    epoch is appended to ``history`` when given.
    """
    corpus = [list(s) for s in corpus]
    tokens, counts = _sgns_vocab(corpus, cfg.min_count)
    if not tokens:
        raise ValueError("no token reaches min_count; empty vocabulary")
    index = {t: i for i, t in enumerate(tokens)}
    sentences = [np.array([index[t] for t in s if t in index], dtype=np.int64) for s in corpus]
    centers, contexts = _pairs(sentences, cfg.window)

    rng = np.random.default_rng(cfg.seed)
    n, d = len(tokens), cfg.dim
    w_in = (rng.random((n, d)) - 0.5) / d
    w_out = np.zeros((n, d))
    noise = counts ** 0.75
    cdf = np.cumsum(noise / noise.sum())
    total_steps = max(1, cfg.epochs * -(-len(centers) // cfg.batch_size))
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(centers))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            c, o = centers[sel], contexts[sel]
            neg = np.minimum(np.searchsorted(cdf, rng.random((len(sel), cfg.negatives))), n - 1)
            lr = cfg.learning_rate - (cfg.learning_rate - cfg.min_learning_rate) * step / total_steps
            step += 1
            vin = w_in[c]
            vpos = w_out[o]
            vneg = w_out[neg]
            spos = np.einsum("bd,bd->b", vin, vpos)
            sneg = np.einsum("bd,bkd->bk", vin, vneg)
            epoch_loss -= _log_sigmoid(spos).sum() + _log_sigmoid(-sneg).sum()
            gpos = 1.0 / (1.0 + np.exp(-spos)) - 1.0
            gneg = 1.0 / (1.0 + np.exp(-sneg))
            grad_in = gpos[:, None] * vpos + np.einsum("bk,bkd->bd", gneg, vneg)
            np.add.at(w_out, o, -lr * gpos[:, None] * vin)
            np.add.at(w_out, neg.ravel(), (-lr * gneg[..., None] * vin[:, None, :]).reshape(-1, d))
            np.add.at(w_in, c, -lr * grad_in)
        if history is not None:
            history.append(epoch_loss / max(1, len(centers)))
    return EmbeddingSet(Vocabulary(tuple(tokens)), w_in, source_id)


# synthetic data ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_labels: int = 20
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 200
    label_rate: float = 0.15
    cooccurrence: float = 0.0        # P(label l+1 | label l) boost
    triggers_per_label: int = 2
    trigger_prob: float = 1.0        # chance an active label's trigger shows up
    topic_words_per_label: int = 4
    topic_prob: float = 0.5
    background_vocab: int = 300
    exclusive_vocab: int = 100       # words only in the labelled corpus, paraphrased in source B
    doc_length: int = 40
    n_source_b_docs: int = 800
    n_items: int = 30
    item_rate: float = 0.5
    item_shift: float = 1.0
    n_drugs: int = 60
    drug_prob: float = 0.5
    n_labterms: int = 60
    labterm_prob: float = 0.5
    numeric_noise: bool = True
    seed: int = 0


@dataclass
class SyntheticData:
    labels: LabelSpace
    splits: dict                      # split name -> LabeledDocumentSet
    records: list                     # JSONL-ready document records
    source_a: list                    # tokenised sentences (training documents)
    source_b: list                    # tokenised sentences of the second corpus
    events: list                      # (admission_id, item_id, value)
    prescriptions: dict               # admission_id -> [terms]
    labexams: dict
    label_map: dict                   # admission_id -> [codes]
    triggers: dict = field(default_factory=dict)


_ONSETS = ["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "ch", "dr", "pl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def _pseudo_words(rng, count, taken):
    out = []
    while len(out) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS)
                    for _ in range(int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synthetic_codes(n_labels: int) -> tuple:
    base = icd10_targets()
    return tuple(base[:n_labels]) + tuple(f"SYN{i:03d}" for i in range(len(base), n_labels))


def _sample_labels(rng, spec):
    on = rng.random(spec.n_labels) < spec.label_rate
    if spec.cooccurrence > 0:
        for l in range(spec.n_labels - 1):
            if on[l] and rng.random() < spec.cooccurrence:
                on[l + 1] = True
    return on


def _doc_tokens(rng, spec, active, background, triggers, topics, rename=None):
    toks = list(rng.choice(background, size=spec.doc_length))
    for l in np.flatnonzero(active):
        if rng.random() < spec.trigger_prob:
            toks.insert(int(rng.integers(0, len(toks) + 1)), rng.choice(triggers[l]))
        if rng.random() < spec.topic_prob:
            toks.insert(int(rng.integers(0, len(toks) + 1)), rng.choice(topics[l]))
    if rename:
        toks = [rename.get(t, t) for t in toks]
    return [str(t) for t in toks]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    taken: set = set()
    triggers = [_pseudo_words(rng, spec.triggers_per_label, taken) for _ in range(spec.n_labels)]
    topics = [_pseudo_words(rng, spec.topic_words_per_label, taken) for _ in range(spec.n_labels)]
    shared = _pseudo_words(rng, spec.background_vocab, taken)
    a_only = _pseudo_words(rng, spec.exclusive_vocab, taken)
    b_only = _pseudo_words(rng, spec.exclusive_vocab, taken)
    paraphrase = dict(zip(a_only, b_only))
    background = np.array(shared + a_only)

    labels = LabelSpace(synthetic_codes(spec.n_labels))
    records, splits, label_map = [], {}, {}
    source_a = []
    item_of_label = np.arange(spec.n_labels) % max(1, spec.n_items)
    drug_pool = [f"drug{x}" for x in _pseudo_words(rng, spec.n_drugs, taken)]
    lab_pool = [f"lab{x}" for x in _pseudo_words(rng, spec.n_labterms, taken)]
    drugs_of = [drug_pool[l % spec.n_drugs::max(1, spec.n_labels)][:3] or [drug_pool[0]]
                for l in range(spec.n_labels)]
    labs_of = [lab_pool[l % spec.n_labterms::max(1, spec.n_labels)][:3] or [lab_pool[0]]
               for l in range(spec.n_labels)]
    events, prescriptions, labexams = [], {}, {}
    counter = 0
    for split, size in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        docs = []
        for _ in range(size):
            doc_id = f"adm{counter:06d}"
            counter += 1
            active = _sample_labels(rng, spec)
            toks = _doc_tokens(rng, spec, active, background, triggers, topics)
            text_parts = list(toks)
            if spec.numeric_noise:
                for _ in range(int(rng.integers(0, 4))):
                    text_parts.insert(int(rng.integers(0, len(text_parts) + 1)),
                                      f"{int(rng.integers(10, 200))}/{int(rng.integers(10, 99))}")
            codes = [labels.codes[l] for l in np.flatnonzero(active)]
            records.append({"id": doc_id, "text": " ".join(text_parts) + ".", "labels": codes,
                            "split": split})
            docs.append(Document(doc_id, toks, active.astype(np.int8)))
            label_map[doc_id] = codes
            if split == "train":
                source_a.append(toks)
            for item in range(spec.n_items):
                if rng.random() < spec.item_rate:
                    shift = spec.item_shift * float(np.sum(active & (item_of_label == item)))
                    for _ in range(int(rng.integers(1, 5))):
                        events.append((doc_id, f"item{item:03d}",
                                       round(float(rng.normal(shift, 1.0)), 6)))
            bag = [str(t) for t in rng.choice(drug_pool, size=int(rng.integers(2, 7)))]
            lab = [str(t) for t in rng.choice(lab_pool, size=int(rng.integers(2, 7)))]
            for l in np.flatnonzero(active):
                bag += [t for t in drugs_of[l] if rng.random() < spec.drug_prob]
                lab += [t for t in labs_of[l] if rng.random() < spec.labterm_prob]
            prescriptions[doc_id] = bag
            labexams[doc_id] = lab
        splits[split] = LabeledDocumentSet(labels, docs, split)

    source_b = []
    for _ in range(spec.n_source_b_docs):
        active = _sample_labels(rng, spec)
        source_b.append(_doc_tokens(rng, spec, active, background, triggers, topics,
                                    rename=paraphrase))
    return SyntheticData(labels, splits, records, source_a, source_b, events, prescriptions,
                         labexams, label_map,
                         triggers={labels.codes[l]: triggers[l] for l in range(spec.n_labels)})


SYNTH_FILES = ("train.jsonl", "dev.jsonl", "test.jsonl", "codes.txt", "source_a.txt",
               "source_b.txt", "events.csv", "prescriptions.csv", "labexams.csv", "labels.csv")


def write_bags(bags: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "terms"])
        for key, terms in bags.items():
            w.writerow([key, " ".join(terms)])


def read_bags(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0] == "admission_id":
        rows = rows[1:]
    return {r[0]: (r[1].split() if len(r) > 1 else []) for r in rows if r}


def write_events(events, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "item_id", "value"])
        for adm, item, value in events:
            w.writerow([adm, item, format(float(value), ".17g")])


def read_events(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0] == "admission_id":
        rows = rows[1:]
    return [(r[0], r[1], float(r[2])) for r in rows if r]


def write_corpus(sentences, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(" ".join(s) + "\n" for s in sentences))


def read_corpus(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [preprocess(line) for line in fh if line.strip()]


def write_synthetic(data: SyntheticData, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in SYNTH_FILES}
    for split in ("train", "dev", "test"):
        write_jsonl([r for r in data.records if r["split"] == split], paths[f"{split}.jsonl"])
    write_codes(data.labels, paths["codes.txt"])
    write_corpus(data.source_a, paths["source_a.txt"])
    write_corpus(data.source_b, paths["source_b.txt"])
    write_events(data.events, paths["events.csv"])
    write_bags(data.prescriptions, paths["prescriptions.csv"])
    write_bags(data.labexams, paths["labexams.csv"])
    write_label_csv(data.label_map, paths["labels.csv"])
    return paths
