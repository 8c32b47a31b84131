"""Label spaces, document sets, prediction matrices and their file formats.

Formats
-------
documents (JSONL)   one object per line: ``{"id", "text", "labels": [codes]}``,
                    optionally ``"split"``.
codes file          one label code per line.
predictions (CSV)   header ``doc_id,<code1>,...,<codeL>``, one row of
                    probabilities per document.
labels (CSV)        header ``admission_id,codes``; codes joined with ``|``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LabelSpace:
    codes: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        codes = tuple(self.codes)
        if len(set(codes)) != len(codes) or any(not c for c in codes):
            raise ValueError("label codes must be unique and non-empty")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "index", {c: i for i, c in enumerate(codes)})

    def __len__(self):
        return len(self.codes)

    def encode(self, codes: Iterable[str]) -> np.ndarray:
        y = np.zeros(len(self.codes), dtype=np.int8)
        for c in codes:
            if c in self.index:
                y[self.index[c]] = 1
        return y


@dataclass
class Document:
    id: str
    tokens: list
    labels: np.ndarray


@dataclass
class LabeledDocumentSet:
    labels: LabelSpace
    documents: list
    split: str = "train"

    def __post_init__(self):
        for d in self.documents:
            if len(d.labels) != len(self.labels):
                raise ValueError(f"document {d.id}: label vector length {len(d.labels)} "
                                 f"!= {len(self.labels)}")

    def __len__(self):
        return len(self.documents)

    @property
    def ids(self) -> list:
        return [d.id for d in self.documents]

    def label_matrix(self) -> np.ndarray:
        if not self.documents:
            return np.zeros((0, len(self.labels)), dtype=np.int8)
        return np.stack([d.labels for d in self.documents])


@dataclass
class PredictionMatrix:
    ids: list
    codes: tuple
    probs: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.codes = tuple(self.codes)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(len(self.ids), len(self.codes))
        if np.any(~np.isfinite(self.probs)) or np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate document ids in prediction matrix")

    def reindex(self, ids: Sequence[str]) -> "PredictionMatrix":
        pos = {d: i for i, d in enumerate(self.ids)}
        missing = [d for d in ids if d not in pos]
        if missing:
            raise KeyError(f"{len(missing)} ids missing from predictions, e.g. {missing[:3]}")
        return PredictionMatrix(list(ids), self.codes, self.probs[[pos[d] for d in ids]])


def read_codes(path) -> LabelSpace:
    with open(path, encoding="utf-8") as fh:
        return LabelSpace(tuple(line.strip() for line in fh if line.strip()))


def write_codes(labels: LabelSpace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(c + "\n" for c in labels.codes))


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def documents_from_records(records, labels: LabelSpace, tokenize, split: str | None = None
                           ) -> LabeledDocumentSet:
    docs = []
    for r in records:
        if split is not None and r.get("split", split) != split:
            continue
        docs.append(Document(str(r["id"]), tokenize(r["text"]), labels.encode(r.get("labels", []))))
    return LabeledDocumentSet(labels, docs, split or "all")


def write_predictions(pred: PredictionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["doc_id", *pred.codes])
        for doc_id, row in zip(pred.ids, pred.probs):
            w.writerow([doc_id, *(format(float(p), ".17g") for p in row)])


def read_predictions(path) -> PredictionMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "doc_id":
        raise ValueError(f"{path}: expected header starting with doc_id")
    codes = tuple(rows[0][1:])
    ids = [r[0] for r in rows[1:]]
    probs = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return PredictionMatrix(ids, codes, probs.reshape(len(ids), len(codes)))


def write_label_csv(mapping: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "codes"])
        for key, codes in mapping.items():
            w.writerow([key, "|".join(codes)])


def read_label_csv(path) -> dict:
    """``admission_id -> [codes]``; also accepts a documents JSONL file."""
    if os.fspath(path).endswith(".jsonl"):
        return {str(r["id"]): list(r.get("labels", [])) for r in read_jsonl(path)}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0] == "admission_id":
        rows = rows[1:]
    return {r[0]: [c for c in (r[1].split("|") if len(r) > 1 else []) if c] for r in rows if r}


def label_matrix(ids: Sequence[str], mapping: dict, labels: LabelSpace) -> np.ndarray:
    missing = [i for i in ids if i not in mapping]
    if missing:
        raise KeyError(f"{len(missing)} ids have no labels, e.g. {missing[:3]}")
    return np.stack([labels.encode(mapping[i]) for i in ids]) if ids else \
        np.zeros((0, len(labels)), dtype=np.int8)
